#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pmlm/autograd.hpp"

namespace pmlm {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  std::size_t max_coords_per_param = 64;
  std::uint64_t seed = 0;  // coordinate sampling
};

struct ParamGradError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::vector<ParamGradError> per_param;
  bool passed = false;
};

// Builds the scalar loss on the given tape. Must be a deterministic function
// of the parameter values: stochastic ops have to reseed identically on
// every call.
using LossBuilder = std::function<Var<double>(Tape<double>&)>;

// Compares reverse-mode gradients against central finite differences on a
// sample of coordinates per parameter. Relative error uses the denominator
// max(|analytic|, |numeric|, 1e-8). Throws OracleInvalidError when the loss
// is not reproducible. Parameter values are restored exactly afterwards.
GradCheckReport grad_check(const LossBuilder& loss_fn, std::span<Parameter<double>* const> params,
                           const GradCheckOptions& options = {});

}  // namespace pmlm
