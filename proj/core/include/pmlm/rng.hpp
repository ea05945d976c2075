#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>

namespace pmlm {

// Derives an independent stream seed from a master seed, a stream name and a
// counter (step, epoch, example index ...). Pure function of its arguments.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream, std::uint64_t index = 0);

// Seeded generator with platform-stable sampling helpers. The engine is
// std::mt19937_64; the distributions are implemented here because the
// standard library distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t master, std::string_view stream, std::uint64_t index = 0)
      : engine_(derive_seed(master, stream, index)) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  // Uniform integer in [lo, hi).
  std::uint64_t range(std::uint64_t lo, std::uint64_t hi) { return lo + below(hi - lo); }

  double normal();

  // Normal(0, stddev) truncated to +-2 stddev, rescaled so the truncated
  // distribution keeps the requested standard deviation.
  double truncated_normal(double stddev);

 private:
  std::mt19937_64 engine_;
};

}  // namespace pmlm
