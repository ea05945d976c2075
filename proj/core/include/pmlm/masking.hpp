#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "pmlm/rng.hpp"

namespace pmlm {

// One packed training sequence: [CLS] body [SEP] followed by [PAD]s.
struct Example {
  std::vector<std::int32_t> ids;
  std::size_t valid_length = 0;  // [CLS] + body + [SEP]

  std::size_t seq_len() const noexcept { return ids.size(); }
  std::size_t body_length() const noexcept { return valid_length >= 2 ? valid_length - 2 : 0; }
};

// Greedily cuts the stream into bodies of seq_len-2 tokens; the final
// example is padded. Requires seq_len >= 4.
std::vector<Example> make_examples(std::span<const std::int32_t> stream, std::size_t seq_len);

// Per-slot corruption probabilities. Each split must sum to 1.
struct BranchSplit {
  double mask = 0.0;
  double random = 0.0;
  double keep = 0.0;
};

enum class MaskBranch : std::uint8_t { kMask, kRandom, kKeep };

// Branch chosen by a uniform draw u in [0,1): mask, then random, then keep.
MaskBranch choose_branch(double u, const BranchSplit& split);

enum class SlotAlignment { kIndependent, kSameSlots };

std::string_view to_string(SlotAlignment a);
SlotAlignment parse_slot_alignment(std::string_view text);

struct MaskingConfig {
  double token_mask_pct = 0.15;
  BranchSplit token_split{0.80, 0.10, 0.10};
  double position_mask_pct = 0.10;
  BranchSplit position_split{0.90, 0.05, 0.05};
  SlotAlignment alignment = SlotAlignment::kIndependent;

  void validate() const;
};

// Number of slots to mask: round-half-up of pct*body_length, at least one
// when pct > 0 and the body is non-empty.
std::size_t mask_slot_count(double pct, std::size_t body_length);

// Distinct body slots (never [CLS]/[SEP]/[PAD]) drawn uniformly without
// replacement, returned sorted.
std::vector<std::size_t> select_mask_slots(const Example& example, double pct, Rng& rng);

struct MaskResult {
  std::vector<std::int32_t> values;  // corrupted ids (tokens) or position ids
  std::vector<std::int32_t> labels;  // original value per slot
  std::vector<MaskBranch> branches;  // branch taken per slot
};

// mask -> [MASK], random -> uniform non-special id in [5, vocab_size),
// keep -> unchanged.
MaskResult apply_token_mask(const Example& example, std::span<const std::size_t> slots, Rng& rng,
                            std::size_t vocab_size, const BranchSplit& split = {0.80, 0.10, 0.10});

// Starts from positions 0..S-1. mask -> max_positions (reserved row),
// keep -> true index, random -> uniform index in [0, valid_length).
MaskResult apply_position_mask(const Example& example, std::span<const std::size_t> slots, Rng& rng,
                               std::size_t max_positions, const BranchSplit& split = {0.90, 0.05, 0.05});

struct Slot {
  std::size_t batch = 0;
  std::size_t seq = 0;
  auto operator<=>(const Slot&) const = default;
};

// Packed training batch, row-major [batch, seq] id arrays.
struct MaskedBatch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> input_ids;
  std::vector<std::int32_t> position_ids;
  std::vector<std::int32_t> original_ids;
  std::vector<std::size_t> valid_lengths;
  std::vector<Slot> token_slots;
  std::vector<std::int32_t> token_labels;
  std::vector<Slot> position_slots;
  std::vector<std::int32_t> position_labels;
  std::uint64_t seed = 0;
};

// Masks every example with rng streams derived from `seed` (token and
// position streams are separate). Pure function of its arguments. Throws
// DataError naming the example index if a batch invariant is violated.
MaskedBatch assemble_batch(std::span<const Example> examples, const MaskingConfig& config, std::size_t vocab_size,
                           std::size_t max_positions, std::uint64_t seed);

// Verifies the MaskedBatch invariants; throws DataError on the first breach.
void check_batch_invariants(const MaskedBatch& batch, std::size_t max_positions);

}  // namespace pmlm
