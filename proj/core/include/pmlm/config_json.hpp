#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "pmlm/finetune.hpp"
#include "pmlm/masking.hpp"
#include "pmlm/model.hpp"
#include "pmlm/training.hpp"

namespace pmlm {

using Json = nlohmann::json;

// Every serializer writes all keys; every parser accepts a partial object
// (missing keys keep their defaults) and rejects unknown keys or wrong
// types with a ConfigError naming the dotted key.
Json to_json(const ModelConfig& c);
Json to_json(const MaskingConfig& c);
Json to_json(const TrainConfig& c);  // without the masking group
Json to_json(const FinetuneConfig& c);

ModelConfig model_config_from_json(const Json& j, const std::string& prefix = "model");
MaskingConfig masking_config_from_json(const Json& j, const std::string& prefix = "masking");
TrainConfig train_config_from_json(const Json& j, const std::string& prefix = "train");
FinetuneConfig finetune_config_from_json(const Json& j, const std::string& prefix = "finetune");

struct PathsConfig {
  std::string corpus;
  std::string vocab;
  std::string out_dir = "runs";
};

// The declarative run file: groups model, train, masking, finetune, paths.
// train.masking is carried by the top-level masking group.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  FinetuneConfig finetune;
  PathsConfig paths;
};

Json to_json(const RunConfig& c);
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Parses text as JSON, reporting syntax errors as ConfigError.
Json parse_json_text(const std::string& text, const std::string& source);

}  // namespace pmlm
