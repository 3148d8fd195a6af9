#include "phaed/config.hpp"

#include <fstream>
#include <set>

#include "phaed/errors.hpp"
#include "phaed/vocab.hpp"

namespace phaed {
namespace {

using nlohmann::json;

/// Typed field access over one JSON object that records which keys were read
/// so leftovers can be rejected by their dotted path.
class Fields {
 public:
  Fields(const json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj.is_object()) throw ConfigError(prefix_ + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    auto it = obj_.find(key);
    seen_.insert(key);
    if (it == obj_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path(key) + ": wrong type");
    }
  }

  void read_index(const char* key, Index& out) {
    auto it = obj_.find(key);
    seen_.insert(key);
    if (it == obj_.end()) return;
    if (!it->is_number_integer())
      throw ConfigError(path(key) + ": expected an integer");
    out = it->get<Index>();
  }

  const json* subobject(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void reject_unknown() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ConfigError(path(it.key().c_str()) + ": unknown key");
  }

  std::string path(const char* key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }

 private:
  const json& obj_;
  std::string prefix_;
  std::set<std::string> seen_;
};

void require_positive(Index v, const std::string& field) {
  if (v <= 0) throw ConfigError(field + ": must be positive");
}

AblationFlags parse_ablations(const json& j, const std::string& prefix) {
  Fields f(j, prefix);
  AblationFlags a;
  f.read("no_speaker_tokens", a.no_speaker_tokens);
  f.read("no_aligned_turn_embedding", a.no_aligned_turn_embedding);
  f.read("no_turn_level_relative_attention", a.no_turn_level_relative_attention);
  f.read("no_turn_level_recurrence", a.no_turn_level_recurrence);
  f.reject_unknown();
  return a;
}

ModelConfig parse_model(const json& j, const std::string& prefix) {
  Fields f(j, prefix);
  ModelConfig m;
  f.read_index("d_s", m.d_s);
  f.read_index("heads", m.heads);
  f.read_index("layers", m.layers);
  f.read_index("d_ff", m.d_ff);
  f.read_index("r_max", m.r_max);
  f.read_index("c_max", m.c_max);
  f.read_index("vocab_size", m.vocab_size);
  f.read_index("t_max", m.t_max);
  f.read_index("i_max", m.i_max);
  f.read("tie_output_embeddings", m.tie_output_embeddings);
  std::string precision = to_string(m.precision);
  f.read("precision", precision);
  m.precision = precision_from_string(precision);
  if (const json* a = f.subobject("ablations"))
    m.ablations = parse_ablations(*a, f.path("ablations"));
  f.reject_unknown();

  if (m.c_max < 0) m.c_max = m.layers >= 6 ? 2 : 3;

  require_positive(m.d_s, f.path("d_s"));
  require_positive(m.heads, f.path("heads"));
  require_positive(m.layers, f.path("layers"));
  require_positive(m.vocab_size, f.path("vocab_size"));
  require_positive(m.t_max, f.path("t_max"));
  require_positive(m.i_max, f.path("i_max"));
  if (m.d_ff < 0) throw ConfigError(f.path("d_ff") + ": must be non-negative");
  if (m.r_max < 0) throw ConfigError(f.path("r_max") + ": must be non-negative");
  if (m.c_max < 0) throw ConfigError(f.path("c_max") + ": must be non-negative");
  if (m.d_s % m.heads != 0)
    throw ConfigError(f.path("heads") + ": must divide d_s (" + std::to_string(m.d_s) + ")");
  if (m.vocab_size <= Vocabulary::kReservedCount)
    throw ConfigError(f.path("vocab_size") + ": must exceed the " +
                      std::to_string(Vocabulary::kReservedCount) + " reserved ids");
  return m;
}

TrainingConfig parse_training(const json& j, const std::string& prefix) {
  Fields f(j, prefix);
  TrainingConfig t;
  f.read("learning_rate", t.learning_rate);
  f.read("adam_beta1", t.adam_beta1);
  f.read("adam_beta2", t.adam_beta2);
  f.read("adam_eps", t.adam_eps);
  f.read_index("batch_size", t.batch_size);
  f.read_index("max_steps", t.max_steps);
  f.read_index("patience", t.patience);
  f.read("seed", t.seed);
  f.reject_unknown();
  require_positive(t.batch_size, f.path("batch_size"));
  require_positive(t.max_steps, f.path("max_steps"));
  if (t.patience < 0) throw ConfigError(f.path("patience") + ": must be non-negative");
  if (t.learning_rate < 0) throw ConfigError(f.path("learning_rate") + ": must be non-negative");
  return t;
}

GenerationSettings parse_generation(const json& j, const std::string& prefix) {
  Fields f(j, prefix);
  GenerationSettings g;
  f.read_index("max_response_len", g.max_response_len);
  f.reject_unknown();
  require_positive(g.max_response_len, f.path("max_response_len"));
  return g;
}

DataConfig parse_data(const json& j, const std::string& prefix) {
  Fields f(j, prefix);
  DataConfig d;
  f.read("corpus", d.corpus);
  f.read("validation", d.validation);
  f.read("format", d.format);
  f.read("embedding_store", d.embedding_store);
  f.read_index("max_utterance_len", d.max_utterance_len);
  f.reject_unknown();
  require_positive(d.max_utterance_len, f.path("max_utterance_len"));
  if (d.format != "jsonl" && d.format != "eou_separated")
    throw ConfigError(f.path("format") + ": must be \"jsonl\" or \"eou_separated\"");
  return d;
}

OutputConfig parse_output(const json& j, const std::string& prefix) {
  Fields f(j, prefix);
  OutputConfig o;
  f.read("dir", o.dir);
  f.reject_unknown();
  if (o.dir.empty()) throw ConfigError(f.path("dir") + ": must not be empty");
  return o;
}

}  // namespace

Precision precision_from_string(const std::string& name) {
  if (name == "float32") return Precision::kFloat32;
  if (name == "float64") return Precision::kFloat64;
  throw ConfigError("precision: must be \"float32\" or \"float64\", got \"" + name + "\"");
}

std::string to_string(Precision p) {
  return p == Precision::kFloat32 ? "float32" : "float64";
}

ModelConfig parse_model_config(const nlohmann::json& j) { return parse_model(j, "model"); }

RunConfig parse_run_config(const nlohmann::json& j) {
  Fields f(j, "");
  RunConfig c;
  if (const json* s = f.subobject("model")) c.model = parse_model(*s, "model");
  else c.model = parse_model(json::object(), "model");
  if (const json* s = f.subobject("training")) c.training = parse_training(*s, "training");
  if (const json* s = f.subobject("generation"))
    c.generation = parse_generation(*s, "generation");
  if (const json* s = f.subobject("data")) c.data = parse_data(*s, "data");
  if (const json* s = f.subobject("output")) c.output = parse_output(*s, "output");
  f.reject_unknown();

  if (c.model.i_max < c.data.max_utterance_len + 3)
    throw ConfigError("model.i_max: must cover max_utterance_len plus the 3 frame tokens (need " +
                      std::to_string(c.data.max_utterance_len + 3) + ")");
  return c;
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like path.to.key=value: " + assignment);
  std::string path = assignment.substr(0, eq);
  std::string raw = assignment.substr(eq + 1);

  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // bare words are strings
  }

  json* cur = &j;
  std::size_t pos = 0;
  while (true) {
    std::size_t dot = path.find('.', pos);
    std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (key.empty()) throw ConfigError("override has an empty path segment: " + assignment);
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    if (!cur->contains(key)) (*cur)[key] = json::object();
    cur = &(*cur)[key];
    if (!cur->is_object())
      throw ConfigError("override path crosses a non-object at \"" + key + "\": " + assignment);
    pos = dot + 1;
  }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  return parse_run_config(j);
}

nlohmann::ordered_json to_json(const ModelConfig& m) {
  nlohmann::ordered_json j;
  j["d_s"] = m.d_s;
  j["heads"] = m.heads;
  j["layers"] = m.layers;
  j["d_ff"] = m.d_ff;
  j["r_max"] = m.r_max;
  j["c_max"] = m.c_max;
  j["vocab_size"] = m.vocab_size;
  j["t_max"] = m.t_max;
  j["i_max"] = m.i_max;
  j["tie_output_embeddings"] = m.tie_output_embeddings;
  j["precision"] = to_string(m.precision);
  j["ablations"] = {
      {"no_speaker_tokens", m.ablations.no_speaker_tokens},
      {"no_aligned_turn_embedding", m.ablations.no_aligned_turn_embedding},
      {"no_turn_level_relative_attention", m.ablations.no_turn_level_relative_attention},
      {"no_turn_level_recurrence", m.ablations.no_turn_level_recurrence},
  };
  return j;
}

nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = to_json(c.model);
  j["training"] = {
      {"learning_rate", c.training.learning_rate},
      {"adam_beta1", c.training.adam_beta1},
      {"adam_beta2", c.training.adam_beta2},
      {"adam_eps", c.training.adam_eps},
      {"batch_size", c.training.batch_size},
      {"max_steps", c.training.max_steps},
      {"patience", c.training.patience},
      {"seed", c.training.seed},
  };
  j["generation"] = {{"max_response_len", c.generation.max_response_len}};
  j["data"] = {
      {"corpus", c.data.corpus},
      {"validation", c.data.validation},
      {"format", c.data.format},
      {"embedding_store", c.data.embedding_store},
      {"max_utterance_len", c.data.max_utterance_len},
  };
  j["output"] = {{"dir", c.output.dir}};
  return j;
}

}  // namespace phaed
