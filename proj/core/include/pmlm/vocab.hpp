#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pmlm {

// Lowercases ASCII letters and splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);

// Dense token <-> id table. Ids 0-4 are reserved for
// [PAD], [UNK], [CLS], [SEP], [MASK] in that order.
class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr std::int32_t kMask = 4;
  static constexpr std::int32_t kNumReserved = 5;

  static const std::vector<std::string>& reserved_tokens();

  // Ranks tokens by descending frequency, ties broken lexicographically, and
  // keeps at most max_size entries including the reserved ones.
  static Vocab build(std::span<const std::string> lines, std::size_t max_size);

  // Tokens in id order; the first five must be the reserved tokens.
  static Vocab from_tokens(std::vector<std::string> tokens);

  // One token per line, line number = id.
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  // Out-of-vocabulary tokens map to [UNK].
  std::int32_t id(std::string_view token) const;
  const std::string& token(std::int32_t id) const;

  std::vector<std::int32_t> encode(std::string_view text) const;
  std::string decode(std::span<const std::int32_t> ids) const;

  static bool is_special(std::int32_t id) { return id >= 0 && id < kNumReserved; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

}  // namespace pmlm
