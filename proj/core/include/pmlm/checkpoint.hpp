#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pmlm/errors.hpp"
#include "pmlm/model.hpp"
#include "pmlm/training.hpp"

namespace pmlm {

// Full training state. All random streams are derived from
// (seed, stream name, global step), so the master seed plus the step
// counters are the complete rng state.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  ModelConfig model_config;
  TrainConfig train_config;
  PretrainMode mode = PretrainMode::kPositionMasking;
  std::size_t phase1_steps_done = 0;
  std::size_t phase2_steps_done = 0;
  std::uint64_t tokens_seen = 0;
  std::uint64_t rng_seed = 0;
  ModelWeights<float> weights;
  std::vector<Tensor<float>> momentum;  // aligned with weights.parameters()

  std::size_t global_step() const noexcept { return phase1_steps_done + phase2_steps_done; }
};

class CheckpointError : public Error {
 public:
  enum class Kind { kIo, kBadMagic, kVersionMismatch, kTruncated, kManifestMismatch, kMalformedHeader };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Layout: "PMLM", u32 LE version, u64 LE header length, UTF-8 JSON header
// (configs, counters, tensor manifest with name/shape/offset/length), then
// the concatenated little-endian float32 payloads.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pmlm
