#include "pmlm/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pmlm/rng.hpp"

namespace pmlm {

namespace {

double evaluate(const LossBuilder& loss_fn) {
  Tape<double> tape;
  return loss_fn(tape).value().item();
}

std::vector<std::size_t> sample_coordinates(std::size_t n, std::size_t max_coords, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (n <= max_coords) return idx;
  for (std::size_t i = 0; i < max_coords; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& loss_fn, std::span<Parameter<double>* const> params,
                           const GradCheckOptions& options) {
  for (Parameter<double>* p : params) p->grad = Tensor<double>(p->value.shape());

  double base = 0.0;
  {
    Tape<double> tape;
    Var<double> loss = loss_fn(tape);
    base = loss.value().item();
    tape.backward(loss);
  }
  const double again = evaluate(loss_fn);
  if (std::memcmp(&base, &again, sizeof(double)) != 0) {
    throw OracleInvalidError("loss is not reproducible under a fixed seed (" + std::to_string(base) + " vs " +
                             std::to_string(again) + ")");
  }

  GradCheckReport report;
  Rng rng(options.seed, "grad-check");
  for (Parameter<double>* p : params) {
    ParamGradError entry{p->name, 0.0, 0};
    for (std::size_t i : sample_coordinates(p->value.size(), options.max_coords_per_param, rng)) {
      const double original = p->value[i];
      p->value[i] = original + options.eps;
      const double plus = evaluate(loss_fn);
      p->value[i] = original - options.eps;
      const double minus = evaluate(loss_fn);
      p->value[i] = original;

      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(analytic - numeric) / denom);
      ++entry.coordinates;
    }
    if (entry.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = entry.max_rel_error;
      report.worst_param = entry.name;
    }
    report.per_param.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error < options.tol;
  return report;
}

}  // namespace pmlm
