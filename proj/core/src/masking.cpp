#include "pmlm/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "pmlm/errors.hpp"
#include "pmlm/vocab.hpp"

namespace pmlm {

std::vector<Example> make_examples(std::span<const std::int32_t> stream, std::size_t seq_len) {
  if (seq_len < 4) throw ConfigError("sequence length must be at least 4, got " + std::to_string(seq_len));
  const std::size_t body = seq_len - 2;
  std::vector<Example> out;
  out.reserve((stream.size() + body - 1) / body);
  for (std::size_t start = 0; start < stream.size(); start += body) {
    const std::size_t n = std::min(body, stream.size() - start);
    Example ex;
    ex.ids.assign(seq_len, Vocab::kPad);
    ex.ids[0] = Vocab::kCls;
    std::copy_n(stream.begin() + static_cast<std::ptrdiff_t>(start), n, ex.ids.begin() + 1);
    ex.ids[n + 1] = Vocab::kSep;
    ex.valid_length = n + 2;
    out.push_back(std::move(ex));
  }
  return out;
}

MaskBranch choose_branch(double u, const BranchSplit& split) {
  if (u < split.mask) return MaskBranch::kMask;
  if (u < split.mask + split.random) return MaskBranch::kRandom;
  return MaskBranch::kKeep;
}

std::string_view to_string(SlotAlignment a) {
  return a == SlotAlignment::kIndependent ? "independent" : "same_slots";
}

SlotAlignment parse_slot_alignment(std::string_view text) {
  if (text == "independent") return SlotAlignment::kIndependent;
  if (text == "same_slots") return SlotAlignment::kSameSlots;
  throw ConfigError("unknown masking alignment '" + std::string(text) + "' (expected independent|same_slots)");
}

namespace {

void validate_split(const BranchSplit& s, const char* what) {
  const bool in_range = s.mask >= 0 && s.random >= 0 && s.keep >= 0;
  if (!in_range || std::abs(s.mask + s.random + s.keep - 1.0) > 1e-9) {
    throw ConfigError(std::string(what) + " must be non-negative and sum to 1");
  }
}

void validate_pct(double pct, const char* what) {
  if (!(pct >= 0.0 && pct <= 1.0)) throw ConfigError(std::string(what) + " must be in [0,1]");
}

}  // namespace

void MaskingConfig::validate() const {
  validate_pct(token_mask_pct, "masking.token_mask_pct");
  validate_pct(position_mask_pct, "masking.position_mask_pct");
  validate_split(token_split, "masking.token_split");
  validate_split(position_split, "masking.position_split");
}

std::size_t mask_slot_count(double pct, std::size_t body_length) {
  if (pct <= 0.0 || body_length == 0) return 0;
  const auto n = static_cast<std::size_t>(std::floor(pct * static_cast<double>(body_length) + 0.5));
  return std::clamp<std::size_t>(n, 1, body_length);
}

std::vector<std::size_t> select_mask_slots(const Example& example, double pct, Rng& rng) {
  validate_pct(pct, "mask percentage");
  const std::size_t body = example.body_length();
  const std::size_t count = mask_slot_count(pct, body);
  std::vector<std::size_t> eligible(body);
  std::iota(eligible.begin(), eligible.end(), std::size_t{1});
  for (std::size_t i = 0; i < count; ++i) std::swap(eligible[i], eligible[i + rng.below(body - i)]);
  eligible.resize(count);
  std::sort(eligible.begin(), eligible.end());
  return eligible;
}

MaskResult apply_token_mask(const Example& example, std::span<const std::size_t> slots, Rng& rng,
                            std::size_t vocab_size, const BranchSplit& split) {
  if (vocab_size <= static_cast<std::size_t>(Vocab::kNumReserved)) {
    throw ConfigError("token masking needs at least one non-special vocabulary id");
  }
  MaskResult r;
  r.values = example.ids;
  r.labels.reserve(slots.size());
  r.branches.reserve(slots.size());
  for (std::size_t s : slots) {
    const std::int32_t original = example.ids.at(s);
    const MaskBranch branch = choose_branch(rng.uniform(), split);
    if (branch == MaskBranch::kMask) {
      r.values[s] = Vocab::kMask;
    } else if (branch == MaskBranch::kRandom) {
      r.values[s] = static_cast<std::int32_t>(rng.range(Vocab::kNumReserved, vocab_size));
    }
    r.labels.push_back(original);
    r.branches.push_back(branch);
  }
  return r;
}

MaskResult apply_position_mask(const Example& example, std::span<const std::size_t> slots, Rng& rng,
                               std::size_t max_positions, const BranchSplit& split) {
  if (max_positions < example.seq_len()) {
    throw ConfigError("max_positions " + std::to_string(max_positions) + " is shorter than sequence length " +
                      std::to_string(example.seq_len()));
  }
  MaskResult r;
  r.values.resize(example.seq_len());
  std::iota(r.values.begin(), r.values.end(), 0);
  r.labels.reserve(slots.size());
  r.branches.reserve(slots.size());
  for (std::size_t s : slots) {
    const MaskBranch branch = choose_branch(rng.uniform(), split);
    if (branch == MaskBranch::kMask) {
      r.values.at(s) = static_cast<std::int32_t>(max_positions);
    } else if (branch == MaskBranch::kRandom) {
      r.values.at(s) = static_cast<std::int32_t>(rng.below(example.valid_length));
    }
    r.labels.push_back(static_cast<std::int32_t>(s));
    r.branches.push_back(branch);
  }
  return r;
}

MaskedBatch assemble_batch(std::span<const Example> examples, const MaskingConfig& config, std::size_t vocab_size,
                           std::size_t max_positions, std::uint64_t seed) {
  config.validate();
  MaskedBatch batch;
  batch.batch_size = examples.size();
  batch.seq_len = examples.empty() ? 0 : examples.front().seq_len();
  batch.seed = seed;
  const std::size_t S = batch.seq_len;
  batch.input_ids.reserve(examples.size() * S);
  batch.position_ids.reserve(examples.size() * S);
  batch.original_ids.reserve(examples.size() * S);

  for (std::size_t b = 0; b < examples.size(); ++b) {
    const Example& ex = examples[b];
    if (ex.seq_len() != S) {
      throw DataError("example " + std::to_string(b) + " has length " + std::to_string(ex.seq_len()) +
                      ", batch length is " + std::to_string(S));
    }
    Rng token_rng(seed, "token-mask", b);
    Rng position_rng(seed, "position-mask", b);

    const std::vector<std::size_t> token_slots = select_mask_slots(ex, config.token_mask_pct, token_rng);
    MaskResult tok = apply_token_mask(ex, token_slots, token_rng, vocab_size, config.token_split);

    std::vector<std::size_t> position_slots;
    if (config.position_mask_pct > 0.0) {
      position_slots = config.alignment == SlotAlignment::kSameSlots
                           ? token_slots
                           : select_mask_slots(ex, config.position_mask_pct, position_rng);
    }
    MaskResult pos = apply_position_mask(ex, position_slots, position_rng, max_positions, config.position_split);

    batch.input_ids.insert(batch.input_ids.end(), tok.values.begin(), tok.values.end());
    batch.position_ids.insert(batch.position_ids.end(), pos.values.begin(), pos.values.end());
    batch.original_ids.insert(batch.original_ids.end(), ex.ids.begin(), ex.ids.end());
    batch.valid_lengths.push_back(ex.valid_length);
    for (std::size_t i = 0; i < token_slots.size(); ++i) {
      batch.token_slots.push_back({b, token_slots[i]});
      batch.token_labels.push_back(tok.labels[i]);
    }
    for (std::size_t i = 0; i < position_slots.size(); ++i) {
      batch.position_slots.push_back({b, position_slots[i]});
      batch.position_labels.push_back(pos.labels[i]);
    }
  }
  check_batch_invariants(batch, max_positions);
  return batch;
}

void check_batch_invariants(const MaskedBatch& batch, std::size_t max_positions) {
  const std::size_t B = batch.batch_size, S = batch.seq_len;
  auto fail = [](std::size_t b, const std::string& what) {
    throw DataError("batch assembly failed for example " + std::to_string(b) + ": " + what);
  };
  if (batch.input_ids.size() != B * S || batch.position_ids.size() != B * S || batch.original_ids.size() != B * S ||
      batch.valid_lengths.size() != B) {
    throw DataError("batch assembly failed: array sizes do not match batch shape");
  }
  if (batch.token_labels.size() != batch.token_slots.size() ||
      batch.position_labels.size() != batch.position_slots.size()) {
    throw DataError("batch assembly failed: labels missing for some mask slots");
  }
  std::vector<std::uint8_t> token_masked(B * S, 0), position_masked(B * S, 0);
  for (std::size_t i = 0; i < batch.token_slots.size(); ++i) {
    const Slot s = batch.token_slots[i];
    if (s.batch >= B || s.seq == 0 || s.seq + 1 >= batch.valid_lengths[s.batch]) {
      fail(s.batch, "token mask slot " + std::to_string(s.seq) + " is not a body slot");
    }
    const std::size_t flat = s.batch * S + s.seq;
    if (batch.token_labels[i] != batch.original_ids[flat]) fail(s.batch, "token label differs from original id");
    token_masked[flat] = 1;
  }
  for (std::size_t i = 0; i < batch.position_slots.size(); ++i) {
    const Slot s = batch.position_slots[i];
    if (s.batch >= B || s.seq == 0 || s.seq + 1 >= batch.valid_lengths[s.batch]) {
      fail(s.batch, "position mask slot " + std::to_string(s.seq) + " is not a body slot");
    }
    const std::size_t flat = s.batch * S + s.seq;
    if (batch.position_labels[i] != static_cast<std::int32_t>(s.seq)) fail(s.batch, "position label is not the index");
    const std::int32_t p = batch.position_ids[flat];
    if (p < 0 || static_cast<std::size_t>(p) > max_positions) fail(s.batch, "position id out of range");
    position_masked[flat] = 1;
  }
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < S; ++j) {
      const std::size_t flat = b * S + j;
      if (!token_masked[flat] && batch.input_ids[flat] != batch.original_ids[flat]) {
        fail(b, "unmasked slot " + std::to_string(j) + " was modified");
      }
      if (!position_masked[flat] && batch.position_ids[flat] != static_cast<std::int32_t>(j)) {
        fail(b, "unmasked position " + std::to_string(j) + " was modified");
      }
    }
  }
}

}  // namespace pmlm
