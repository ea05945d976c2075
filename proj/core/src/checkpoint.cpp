#include "pmlm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pmlm/config_json.hpp"

namespace pmlm {

namespace {

constexpr char kMagic[4] = {'P', 'M', 'L', 'M'};
constexpr std::size_t kPreambleSize = 4 + 4 + 8;
const std::string kMomentumPrefix = "optimizer.momentum.";

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(std::string_view in, std::size_t at) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_floats(std::string& out, const Tensor<float>& t) {
  if constexpr (std::endian::native == std::endian::little) {
    out.append(reinterpret_cast<const char*>(t.raw()), t.size() * sizeof(float));
  } else {
    for (float f : t.data()) put_le(out, std::bit_cast<std::uint32_t>(f));
  }
}

void get_floats(std::string_view in, std::size_t at, Tensor<float>& t) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(t.raw(), in.data() + at, t.size() * sizeof(float));
  } else {
    float* d = t.raw();
    for (std::size_t i = 0; i < t.size(); ++i) d[i] = std::bit_cast<float>(get_le<std::uint32_t>(in, at + 4 * i));
  }
}

struct Entry {
  std::string name;
  const Tensor<float>* tensor;
};

std::vector<Entry> entries(const Checkpoint& c) {
  std::vector<Entry> out;
  const auto params = c.weights.parameters();
  for (const Parameter<float>* p : params) out.push_back({p->name, &p->value});
  for (std::size_t i = 0; i < c.momentum.size(); ++i) out.push_back({kMomentumPrefix + params[i]->name, &c.momentum[i]});
  return out;
}

[[noreturn]] void fail(CheckpointError::Kind kind, const std::string& what) {
  throw CheckpointError(kind, "checkpoint: " + what);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  const auto params = c.weights.parameters();
  if (!c.momentum.empty() && c.momentum.size() != params.size()) {
    throw UsageError("checkpoint: momentum buffers do not match parameters");
  }
  Json manifest = Json::array();
  std::uint64_t offset = 0;
  for (const Entry& e : entries(c)) {
    const std::uint64_t len = e.tensor->size() * sizeof(float);
    manifest.push_back({{"name", e.name}, {"shape", e.tensor->shape()}, {"offset", offset}, {"length", len}});
    offset += len;
  }
  Json header = {{"format_version", Checkpoint::kFormatVersion},
                 {"model", to_json(c.model_config)},
                 {"train", to_json(c.train_config)},
                 {"masking", to_json(c.train_config.masking)},
                 {"mode", std::string(to_string(c.mode))},
                 {"counters",
                  {{"phase1_steps_done", c.phase1_steps_done},
                   {"phase2_steps_done", c.phase2_steps_done},
                   {"tokens_seen", c.tokens_seen}}},
                 {"rng", {{"seed", c.rng_seed}}},
                 {"tensors", manifest}};
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, Checkpoint::kFormatVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const Entry& e : entries(c)) put_floats(out, *e.tensor);
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  using K = CheckpointError::Kind;
  if (bytes.size() < sizeof(kMagic)) fail(K::kTruncated, "file shorter than the magic bytes");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) fail(K::kBadMagic, "bad magic (not a PMLM checkpoint)");
  if (bytes.size() < kPreambleSize) fail(K::kTruncated, "file ends inside the preamble");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != Checkpoint::kFormatVersion) {
    fail(K::kVersionMismatch, "format version " + std::to_string(version) + ", expected " +
                                  std::to_string(Checkpoint::kFormatVersion));
  }
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - kPreambleSize) fail(K::kTruncated, "file ends inside the JSON header");
  const std::string_view payload = bytes.substr(kPreambleSize + header_len);

  Checkpoint c;
  Json manifest;
  try {
    const Json h = Json::parse(bytes.substr(kPreambleSize, header_len));
    if (h.at("format_version").get<std::uint32_t>() != version) fail(K::kMalformedHeader, "header version disagrees");
    c.model_config = model_config_from_json(h.at("model"), "model");
    c.train_config = train_config_from_json(h.at("train"), "train");
    c.train_config.masking = masking_config_from_json(h.at("masking"), "masking");
    c.mode = parse_pretrain_mode(h.at("mode").get<std::string>());
    const Json& counters = h.at("counters");
    c.phase1_steps_done = counters.at("phase1_steps_done").get<std::size_t>();
    c.phase2_steps_done = counters.at("phase2_steps_done").get<std::size_t>();
    c.tokens_seen = counters.at("tokens_seen").get<std::uint64_t>();
    c.rng_seed = h.at("rng").at("seed").get<std::uint64_t>();
    manifest = h.at("tensors");
    if (!manifest.is_array()) fail(K::kMalformedHeader, "tensor manifest is not an array");
    c.model_config.validate();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    fail(K::kMalformedHeader, std::string("malformed header: ") + e.what());
  }

  c.weights = init_weights<float>(c.model_config, 0);
  auto params = c.weights.parameters();
  const std::size_t n = params.size();
  if (manifest.size() != n && manifest.size() != 2 * n) {
    fail(K::kManifestMismatch, "manifest lists " + std::to_string(manifest.size()) + " tensors, expected " +
                                   std::to_string(n) + " or " + std::to_string(2 * n));
  }
  if (manifest.size() == 2 * n) {
    for (const Parameter<float>* p : params) c.momentum.emplace_back(p->value.shape());
  }

  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    Tensor<float>& target = i < n ? params[i]->value : c.momentum[i - n];
    const std::string want = i < n ? params[i]->name : kMomentumPrefix + params[i - n]->name;
    std::string name;
    Shape shape;
    std::uint64_t offset = 0, length = 0;
    try {
      const Json& m = manifest[i];
      name = m.at("name").get<std::string>();
      shape = m.at("shape").get<Shape>();
      offset = m.at("offset").get<std::uint64_t>();
      length = m.at("length").get<std::uint64_t>();
    } catch (const std::exception& e) {
      fail(K::kMalformedHeader, "manifest entry " + std::to_string(i) + ": " + e.what());
    }
    if (name != want) fail(K::kManifestMismatch, "tensor " + std::to_string(i) + " is '" + name + "', expected '" + want + "'");
    if (shape != target.shape()) {
      fail(K::kManifestMismatch, "tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                                     shape_string(target.shape()));
    }
    if (length != target.size() * sizeof(float) || offset != expected_offset) {
      fail(K::kManifestMismatch, "tensor '" + name + "' offset/length disagree with its shape");
    }
    if (offset + length > payload.size()) fail(K::kTruncated, "payload ends inside tensor '" + name + "'");
    get_floats(payload, offset, target);
    expected_offset += length;
  }
  if (expected_offset != payload.size()) {
    fail(K::kManifestMismatch, "payload has " + std::to_string(payload.size() - expected_offset) +
                                   " bytes beyond the manifest");
  }
  c.weights.config = c.model_config;
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "checkpoint: cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kIo, "checkpoint: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace pmlm
