#include <algorithm>
#include <map>
#include <ostream>
#include <sstream>

#include "app.hpp"
#include "pmlm/errors.hpp"

namespace pmlm::app {

namespace {

constexpr double kPaperBaseF1 = 87.99;
constexpr double kPaperPositionF1 = 88.26;

struct RunInfo {
  std::filesystem::path dir;
  std::string run_id;
  PretrainMode mode = PretrainMode::kBaseline;
  std::uint64_t seed = 0;
  std::size_t seq_len = 0;
  std::vector<MetricsRecord> metrics;
};

struct FinetuneInfo {
  PretrainMode mode = PretrainMode::kBaseline;
  double f1_sum = 0.0;
  std::size_t rows = 0;
};

Json read_json(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("missing " + path.string());
  try {
    return Json::parse(read_text_file(path));
  } catch (const Json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

RunInfo load_run(const std::filesystem::path& dir) {
  RunInfo r;
  r.dir = dir;
  const std::filesystem::path metrics = dir / "metrics.csv";
  if (!std::filesystem::exists(metrics)) throw DataError("missing metrics file " + metrics.string());
  r.metrics = read_metrics_file(metrics);
  const Json meta = read_json(dir / "run.json");
  try {
    r.run_id = meta.at("run_id").get<std::string>();
    r.mode = parse_pretrain_mode(meta.at("mode").get<std::string>());
    r.seed = meta.at("seed").get<std::uint64_t>();
    r.seq_len = meta.at("config").at("train").at("phase2").at("seq_len").get<std::size_t>();
  } catch (const Json::exception& e) {
    throw DataError((dir / "run.json").string() + ": " + e.what());
  }
  return r;
}

FinetuneInfo load_finetune(const std::filesystem::path& dir) {
  FinetuneInfo f;
  const Json meta = read_json(dir / "finetune.json");
  f.mode = parse_pretrain_mode(meta.at("pretrain_mode").get<std::string>());
  std::istringstream in(read_text_file(dir / "summary.csv"));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 4) throw DataError((dir / "summary.csv").string() + ": malformed row");
    f.f1_sum += std::stod(cells[3]);
    ++f.rows;
  }
  return f;
}

// Values at the last step both runs reached.
std::optional<std::pair<MetricsRecord, MetricsRecord>> matched_final(const RunInfo& a, const RunInfo& b) {
  std::map<std::size_t, const MetricsRecord*> by_step;
  for (const MetricsRecord& r : a.metrics) by_step[r.step] = &r;
  for (auto it = b.metrics.rbegin(); it != b.metrics.rend(); ++it) {
    auto hit = by_step.find(it->step);
    if (hit != by_step.end()) return std::make_pair(*hit->second, *it);
  }
  return std::nullopt;
}

std::string opt_step(std::optional<std::size_t> s) { return s ? std::to_string(*s) : std::string(); }

}  // namespace

int cmd_report(std::span<const std::filesystem::path> run_dirs, const std::filesystem::path& out_dir, std::ostream& out) {
  std::vector<RunInfo> runs;
  std::vector<FinetuneInfo> finetunes;
  for (const auto& dir : run_dirs) {
    if (std::filesystem::exists(dir / "summary.csv") && std::filesystem::exists(dir / "finetune.json")) {
      finetunes.push_back(load_finetune(dir));
    } else {
      runs.push_back(load_run(dir));
    }
  }

  std::ostringstream curves;
  curves << "run,mode,seed,step,phase,metric,value\n";
  for (const RunInfo& r : runs) {
    for (const MetricsRecord& m : r.metrics) {
      const std::pair<const char*, double> values[] = {{"lr", m.lr},
                                                       {"total_loss", m.total_loss},
                                                       {"mlm_loss", m.mlm_loss},
                                                       {"pos_loss", m.pos_loss},
                                                       {"mlm_acc", m.mlm_accuracy},
                                                       {"pos_acc", m.pos_accuracy}};
      for (const auto& [name, value] : values) {
        curves << r.run_id << ',' << to_string(r.mode) << ',' << r.seed << ',' << m.step << ',' << m.phase << ','
               << name << ',' << format_number(value) << '\n';
      }
    }
  }

  // Pair baseline and position runs by seed.
  std::map<std::uint64_t, const RunInfo*> base, pos;
  for (const RunInfo& r : runs) (r.mode == PretrainMode::kBaseline ? base : pos)[r.seed] = &r;
  std::ostringstream cmp;
  cmp << "seed,baseline_run,position_run,step,baseline_mlm_acc,position_mlm_acc,mlm_acc_gap,baseline_pos_acc,"
         "position_pos_acc,baseline_steps_to_threshold,position_steps_to_threshold,steps_to_threshold_ratio\n";
  double gap_sum = 0.0, base_sum = 0.0, pos_sum = 0.0;
  std::size_t pairs = 0;
  for (const auto& [seed, b] : base) {
    auto it = pos.find(seed);
    if (it == pos.end()) continue;
    const RunInfo* p = it->second;
    const auto matched = matched_final(*b, *p);
    if (!matched) continue;
    const auto& [mb, mp] = *matched;
    const double gap = mb.mlm_accuracy - mp.mlm_accuracy;
    const auto sb = steps_to_threshold(b->metrics), sp = steps_to_threshold(p->metrics);
    std::string ratio;
    if (sb && sp && *sb > 0) ratio = format_number(static_cast<double>(*sp) / static_cast<double>(*sb));
    cmp << seed << ',' << b->run_id << ',' << p->run_id << ',' << mb.step << ',' << format_number(mb.mlm_accuracy)
        << ',' << format_number(mp.mlm_accuracy) << ',' << format_number(gap) << ',' << format_number(mb.pos_accuracy)
        << ',' << format_number(mp.pos_accuracy) << ',' << opt_step(sb) << ',' << opt_step(sp) << ',' << ratio << '\n';
    gap_sum += gap;
    base_sum += mb.mlm_accuracy;
    pos_sum += mp.mlm_accuracy;
    ++pairs;
  }
  if (pairs > 1) {
    const double n = static_cast<double>(pairs);
    cmp << "mean,,,," << format_number(base_sum / n) << ',' << format_number(pos_sum / n) << ','
        << format_number(gap_sum / n) << ",,,,,\n";
  }

  // Same shape as the paper's phase-2 fine-tuning table.
  std::map<PretrainMode, std::pair<double, std::size_t>> f1;
  for (const FinetuneInfo& f : finetunes) {
    f1[f.mode].first += f.f1_sum;
    f1[f.mode].second += f.rows;
  }
  std::size_t seq = 0;
  for (const RunInfo& r : runs) seq = std::max(seq, r.seq_len);
  auto desk_f1 = [&](PretrainMode m) {
    auto it = f1.find(m);
    if (it == f1.end() || it->second.second == 0) return std::string("n/a");
    return format_number(100.0 * it->second.first / static_cast<double>(it->second.second));
  };
  std::ostringstream table;
  char line[160];
  table << "Phase 2 performance (desk scale)\n";
  std::snprintf(line, sizeof line, "%-16s %-18s %s\n", "Name", "Span F1 (desk)", "Squad v1.1 F1 (paper-scale reference, not reproduced)");
  table << line;
  const std::string s = seq ? std::to_string(seq) : std::string("?");
  std::snprintf(line, sizeof line, "%-16s %-18s %.2f\n", ("Base " + s).c_str(), desk_f1(PretrainMode::kBaseline).c_str(), kPaperBaseF1);
  table << line;
  std::snprintf(line, sizeof line, "%-16s %-18s %.2f\n", ("Position " + s).c_str(),
                desk_f1(PretrainMode::kPositionMasking).c_str(), kPaperPositionF1);
  table << line;

  write_text_file(out_dir / "comparison.csv", cmp.str());
  write_text_file(out_dir / "curves.csv", curves.str());
  write_text_file(out_dir / "table.txt", table.str());
  out << table.str();
  out << "report -> " << out_dir.string() << " (" << pairs << " paired seeds)\n";
  return kExitOk;
}

}  // namespace pmlm::app
