#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pmlm/vocab.hpp"

namespace pmlm {

// UTF-8 text, one document per line. Blank lines are kept as empty documents.
std::vector<std::string> read_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, std::span<const std::string> lines);

// Concatenates the encoded documents into a single token stream.
std::vector<std::int32_t> encode_corpus(std::span<const std::string> lines, const Vocab& vocab);

// A toy language made of fixed multi-word phrases. Every word belongs to
// exactly one phrase, phrases are drawn with Zipfian frequency and a small
// fraction of words is replaced by noise. Neighbouring words are therefore
// strongly predictive of each other, which gives both the token and the
// position objective something learnable at desk scale.
struct SyntheticCorpusConfig {
  std::size_t documents = 4000;
  std::size_t phrases = 400;
  std::size_t min_phrase_length = 3;
  std::size_t max_phrase_length = 6;
  std::size_t min_document_phrases = 8;
  std::size_t max_document_phrases = 20;
  double zipf_exponent = 1.0;
  double noise = 0.05;
  std::uint64_t seed = 0;
};

std::vector<std::string> synthetic_corpus(const SyntheticCorpusConfig& config);

}  // namespace pmlm
