#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "phaed/types.hpp"

namespace phaed {

enum class Precision { kFloat32, kFloat64 };

Precision precision_from_string(const std::string& name);
std::string to_string(Precision p);

struct AblationFlags {
  bool no_speaker_tokens = false;
  bool no_aligned_turn_embedding = false;
  bool no_turn_level_relative_attention = false;
  bool no_turn_level_recurrence = false;
};

struct ModelConfig {
  Index d_s = 8;            // model width
  Index heads = 2;          // attention heads, must divide d_s
  Index layers = 2;         // encoder and decoder stack depth
  Index d_ff = 0;           // feed-forward width; 0 means 4 * d_s
  Index r_max = 8;          // turn-distance clip for the inter-query bias tables
  Index c_max = -1;         // cached previous responses; -1 picks 2 when layers >= 6, else 3
  Index vocab_size = 10000; // total ids including reserved
  Index t_max = 64;         // turn-embedding rows
  Index i_max = 64;         // position-embedding rows
  bool tie_output_embeddings = false;
  Precision precision = Precision::kFloat32;
  AblationFlags ablations;

  Index ff_width() const { return d_ff > 0 ? d_ff : 4 * d_s; }
  Index memory_len() const { return ablations.no_turn_level_recurrence ? 0 : c_max; }
};

struct TrainingConfig {
  double learning_rate = 0.005;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Index batch_size = 32;
  Index max_steps = 1000;
  Index patience = 0;  // stop after this many validation checks without improvement; 0 disables
  std::uint64_t seed = 1;
};

struct GenerationSettings {
  Index max_response_len = 50;  // content tokens before forced [EOU]
};

struct DataConfig {
  std::string corpus;
  std::string validation;       // optional
  std::string format = "jsonl"; // jsonl | eou_separated
  std::string embedding_store;  // optional, word vectors for embedding metrics
  Index max_utterance_len = 50;
};

struct OutputConfig {
  std::string dir = "out";
};

struct RunConfig {
  ModelConfig model;
  TrainingConfig training;
  GenerationSettings generation;
  DataConfig data;
  OutputConfig output;
};

/// Parses and validates a config object. Unknown keys are rejected with their
/// full dotted path; violations raise ConfigError naming the field.
RunConfig parse_run_config(const nlohmann::json& j);

/// Loads a config file and applies `--set path.to.key=value` overrides on the
/// raw JSON before validation. Override values parse as JSON when possible,
/// else as strings.
RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides = {});

void apply_override(nlohmann::json& j, const std::string& assignment);

/// Canonical serialized form; key order is fixed for reproducible artifacts.
nlohmann::ordered_json to_json(const RunConfig& config);
nlohmann::ordered_json to_json(const ModelConfig& config);
ModelConfig parse_model_config(const nlohmann::json& j);

}  // namespace phaed
