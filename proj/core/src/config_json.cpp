#include "pmlm/config_json.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "pmlm/errors.hpp"

namespace pmlm {

namespace {

// Field-by-field reader that remembers which keys were consumed.
class Reader {
 public:
  Reader(const Json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError("'" + prefix_ + "' must be a JSON object");
  }

  std::string key(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }

  template <typename V>
  void get(const std::string& name, V& out) {
    seen_.insert(name);
    auto it = j_.find(name);
    if (it == j_.end()) return;
    const Json& v = *it;
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) throw ConfigError("'" + key(name) + "' must be a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!v.is_string()) throw ConfigError("'" + key(name) + "' must be a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!v.is_number()) throw ConfigError("'" + key(name) + "' must be a number");
      out = v.get<V>();
    } else if constexpr (std::is_unsigned_v<V>) {
      if (!v.is_number_unsigned()) throw ConfigError("'" + key(name) + "' must be a non-negative integer");
      out = static_cast<V>(v.get<std::uint64_t>());
    } else {
      if (!v.is_number_integer()) throw ConfigError("'" + key(name) + "' must be an integer");
      out = static_cast<V>(v.get<std::int64_t>());
    }
  }

  const Json* sub(const std::string& name) {
    seen_.insert(name);
    auto it = j_.find(name);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + key(it.key()) + "'");
    }
  }

 private:
  const Json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

Json split_json(const BranchSplit& s) { return {{"mask", s.mask}, {"random", s.random}, {"keep", s.keep}}; }

BranchSplit split_from_json(const Json& j, const std::string& prefix) {
  BranchSplit s;
  Reader r(j, prefix);
  r.get("mask", s.mask);
  r.get("random", s.random);
  r.get("keep", s.keep);
  r.finish();
  return s;
}

Json phase_json(const PhaseConfig& p) { return {{"seq_len", p.seq_len}, {"batch_size", p.batch_size}}; }

PhaseConfig phase_from_json(const Json& j, const std::string& prefix) {
  PhaseConfig p;
  Reader r(j, prefix);
  r.get("seq_len", p.seq_len);
  r.get("batch_size", p.batch_size);
  r.finish();
  return p;
}

}  // namespace

Json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"max_positions", c.max_positions},
          {"hidden", c.hidden},
          {"layers", c.layers},
          {"heads", c.heads},
          {"ffn_size", c.ffn_size},
          {"attention_dropout", c.attention_dropout},
          {"hidden_dropout", c.hidden_dropout},
          {"mask_token_id", c.mask_token_id},
          {"position_loss_weight", c.position_loss_weight}};
}

ModelConfig model_config_from_json(const Json& j, const std::string& prefix) {
  ModelConfig c;
  Reader r(j, prefix);
  r.get("vocab_size", c.vocab_size);
  r.get("max_positions", c.max_positions);
  r.get("hidden", c.hidden);
  r.get("layers", c.layers);
  r.get("heads", c.heads);
  r.get("ffn_size", c.ffn_size);
  r.get("attention_dropout", c.attention_dropout);
  r.get("hidden_dropout", c.hidden_dropout);
  r.get("mask_token_id", c.mask_token_id);
  r.get("position_loss_weight", c.position_loss_weight);
  r.finish();
  return c;
}

Json to_json(const MaskingConfig& c) {
  return {{"token_mask_pct", c.token_mask_pct},
          {"token_split", split_json(c.token_split)},
          {"position_mask_pct", c.position_mask_pct},
          {"position_split", split_json(c.position_split)},
          {"alignment", std::string(to_string(c.alignment))}};
}

MaskingConfig masking_config_from_json(const Json& j, const std::string& prefix) {
  MaskingConfig c;
  Reader r(j, prefix);
  r.get("token_mask_pct", c.token_mask_pct);
  if (const Json* s = r.sub("token_split")) c.token_split = split_from_json(*s, r.key("token_split"));
  r.get("position_mask_pct", c.position_mask_pct);
  if (const Json* s = r.sub("position_split")) c.position_split = split_from_json(*s, r.key("position_split"));
  std::string alignment(to_string(c.alignment));
  r.get("alignment", alignment);
  try {
    c.alignment = parse_slot_alignment(alignment);
  } catch (const ConfigError& e) {
    throw ConfigError("'" + r.key("alignment") + "': " + e.what());
  }
  r.finish();
  return c;
}

Json to_json(const TrainConfig& c) {
  return {{"seed", c.seed},
          {"total_steps", c.total_steps},
          {"phase1_fraction", c.phase1_fraction},
          {"phase1", phase_json(c.phase1)},
          {"phase2", phase_json(c.phase2)},
          {"lr_peak", c.lr_peak},
          {"warmup_steps", c.warmup_steps},
          {"momentum", c.momentum},
          {"eval_every", c.eval_every},
          {"eval_batches", c.eval_batches},
          {"checkpoint_every", c.checkpoint_every},
          {"record_wall_time", c.record_wall_time}};
}

TrainConfig train_config_from_json(const Json& j, const std::string& prefix) {
  TrainConfig c;
  Reader r(j, prefix);
  r.get("seed", c.seed);
  r.get("total_steps", c.total_steps);
  r.get("phase1_fraction", c.phase1_fraction);
  if (const Json* p = r.sub("phase1")) c.phase1 = phase_from_json(*p, r.key("phase1"));
  if (const Json* p = r.sub("phase2")) c.phase2 = phase_from_json(*p, r.key("phase2"));
  r.get("lr_peak", c.lr_peak);
  r.get("warmup_steps", c.warmup_steps);
  r.get("momentum", c.momentum);
  r.get("eval_every", c.eval_every);
  r.get("eval_batches", c.eval_batches);
  r.get("checkpoint_every", c.checkpoint_every);
  r.get("record_wall_time", c.record_wall_time);
  r.finish();
  return c;
}

Json to_json(const FinetuneConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"warmup_fraction", c.warmup_fraction},
          {"dropout_gradient_mode", std::string(to_string(c.dropout_gradient_mode))},
          {"attention_dropout", c.attention_dropout},
          {"hidden_dropout", c.hidden_dropout},
          {"seed", c.seed},
          {"train_size", c.train_size},
          {"dev_size", c.dev_size},
          {"seq_len", c.seq_len}};
}

FinetuneConfig finetune_config_from_json(const Json& j, const std::string& prefix) {
  FinetuneConfig c;
  Reader r(j, prefix);
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("lr", c.lr);
  r.get("momentum", c.momentum);
  r.get("warmup_fraction", c.warmup_fraction);
  std::string mode(to_string(c.dropout_gradient_mode));
  r.get("dropout_gradient_mode", mode);
  try {
    c.dropout_gradient_mode = parse_dropout_mode(mode);
  } catch (const ConfigError& e) {
    throw ConfigError("'" + r.key("dropout_gradient_mode") + "': " + e.what());
  }
  r.get("attention_dropout", c.attention_dropout);
  r.get("hidden_dropout", c.hidden_dropout);
  r.get("seed", c.seed);
  r.get("train_size", c.train_size);
  r.get("dev_size", c.dev_size);
  r.get("seq_len", c.seq_len);
  r.finish();
  return c;
}

Json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"masking", to_json(c.train.masking)},
          {"finetune", to_json(c.finetune)},
          {"paths", {{"corpus", c.paths.corpus}, {"vocab", c.paths.vocab}, {"out_dir", c.paths.out_dir}}}};
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  Reader r(j, "");
  if (const Json* s = r.sub("model")) c.model = model_config_from_json(*s, "model");
  if (const Json* s = r.sub("train")) c.train = train_config_from_json(*s, "train");
  if (const Json* s = r.sub("masking")) c.train.masking = masking_config_from_json(*s, "masking");
  if (const Json* s = r.sub("finetune")) c.finetune = finetune_config_from_json(*s, "finetune");
  if (const Json* s = r.sub("paths")) {
    Reader p(*s, "paths");
    p.get("corpus", c.paths.corpus);
    p.get("vocab", c.paths.vocab);
    p.get("out_dir", c.paths.out_dir);
    p.finish();
  }
  r.finish();
  return c;
}

Json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(source + ": invalid JSON: " + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(parse_json_text(ss.str(), path.string()));
}

}  // namespace pmlm
