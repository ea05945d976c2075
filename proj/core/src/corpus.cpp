#include "pmlm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "pmlm/errors.hpp"
#include "pmlm/rng.hpp"

namespace pmlm {

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_corpus(const std::filesystem::path& path, std::span<const std::string> lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write corpus file " + path.string());
  for (const std::string& l : lines) out << l << '\n';
}

std::vector<std::int32_t> encode_corpus(std::span<const std::string> lines, const Vocab& vocab) {
  std::vector<std::int32_t> stream;
  for (const std::string& line : lines) {
    const auto ids = vocab.encode(line);
    stream.insert(stream.end(), ids.begin(), ids.end());
  }
  return stream;
}

namespace {

std::string make_word(std::size_t index) {
  static constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
  static constexpr const char* kVowels[] = {"a", "e", "i", "o", "u"};
  std::string w;
  std::size_t x = index;
  do {
    w += kOnsets[x % 14];
    x /= 14;
    w += kVowels[x % 5];
    x /= 5;
  } while (x > 0);
  return w;
}

}  // namespace

std::vector<std::string> synthetic_corpus(const SyntheticCorpusConfig& config) {
  if (config.phrases == 0 || config.min_phrase_length == 0 || config.max_phrase_length < config.min_phrase_length ||
      config.max_document_phrases < config.min_document_phrases) {
    throw ConfigError("invalid synthetic corpus configuration");
  }
  Rng rng(config.seed, "synthetic-corpus");

  std::vector<std::vector<std::string>> phrases(config.phrases);
  std::size_t next_word = 0;
  for (auto& phrase : phrases) {
    const std::size_t len = rng.range(config.min_phrase_length, config.max_phrase_length + 1);
    for (std::size_t i = 0; i < len; ++i) phrase.push_back(make_word(next_word++));
  }
  const std::size_t word_count = next_word;

  std::vector<double> cdf(config.phrases);
  double total = 0.0;
  for (std::size_t i = 0; i < config.phrases; ++i) {
    total += 1.0 / std::pow(static_cast<double>(i + 1), config.zipf_exponent);
    cdf[i] = total;
  }

  std::vector<std::string> docs;
  docs.reserve(config.documents);
  for (std::size_t d = 0; d < config.documents; ++d) {
    const std::size_t n = rng.range(config.min_document_phrases, config.max_document_phrases + 1);
    std::string line;
    for (std::size_t k = 0; k < n; ++k) {
      const double u = rng.uniform() * total;
      const auto pick = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
      for (const std::string& word : phrases[std::min(pick, config.phrases - 1)]) {
        if (!line.empty()) line += ' ';
        line += rng.uniform() < config.noise ? make_word(rng.below(word_count)) : word;
      }
    }
    docs.push_back(std::move(line));
  }
  return docs;
}

}  // namespace pmlm
