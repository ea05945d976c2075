#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pmlm/checkpoint.hpp"
#include "pmlm/training.hpp"

namespace pmlm {

struct PretrainOptions {
  const Checkpoint* resume = nullptr;
  std::function<void(const MetricsRecord&)> on_metrics;
  std::function<void(const Checkpoint&)> on_checkpoint;  // every checkpoint_every steps
  std::optional<std::size_t> stop_after_step;
};

// Raised when a loss or gradient goes non-finite; carries the metrics
// emitted before the failure.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::vector<MetricsRecord> metrics)
      : Error(what), metrics_(std::move(metrics)) {}
  const std::vector<MetricsRecord>& metrics() const noexcept { return metrics_; }

 private:
  std::vector<MetricsRecord> metrics_;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<MetricsRecord> metrics;
};

// Two-phase pretraining with SGD+momentum. `model` is the requested
// architecture (vocab_size must match the stream's vocabulary); `mode`
// is applied to copies of both configs. Deterministic per train.seed.
PretrainResult run_pretraining(const TrainConfig& train, const ModelConfig& model,
                               std::span<const std::int32_t> token_stream, PretrainMode mode,
                               const PretrainOptions& options = {});

}  // namespace pmlm
