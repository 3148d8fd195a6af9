// Operator entry point: train, evaluate, generate, chat, inspect attention,
// or summarize a corpus, all driven by one JSON config file.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "phaed/checkpoint.hpp"
#include "phaed/config.hpp"
#include "phaed/corpus.hpp"
#include "phaed/encoder.hpp"
#include "phaed/errors.hpp"
#include "phaed/generation.hpp"
#include "phaed/metrics.hpp"
#include "phaed/model.hpp"
#include "phaed/training.hpp"
#include "phaed/vocab.hpp"

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw phaed::ParseError("cannot open for hashing: " + path);
  std::uint64_t h = 1469598103934665603ull;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

/// Provenance record written next to every command's outputs.
void write_manifest(const std::string& out_dir, const std::string& command,
                    const phaed::RunConfig& rc, const std::string& checkpoint_path) {
  ordered_json m;
  m["command"] = command;
  m["seed"] = rc.training.seed;
  if (checkpoint_path.empty())
    m["checkpoint_hash"] = nullptr;
  else
    m["checkpoint_hash"] = hex64(fnv1a_file(checkpoint_path));
  m["config"] = phaed::to_json(rc);
  std::ofstream out(out_dir + "/manifest.json");
  if (!out) throw phaed::Error("cannot write " + out_dir + "/manifest.json");
  out << m.dump(2) << "\n";
}

phaed::CorpusFormat format_of(const phaed::RunConfig& rc) {
  return phaed::corpus_format_from_string(rc.data.format);
}

std::vector<phaed::RawConversation> load_corpus(const phaed::RunConfig& rc,
                                                const phaed::Tokenizer& tokenizer,
                                                const std::string& path) {
  if (path.empty()) throw phaed::ConfigError("data.corpus: no corpus path configured");
  return phaed::ingest_text(path, format_of(rc), tokenizer, rc.data.max_utterance_len);
}

std::vector<phaed::Conversation> encode_all(const std::vector<phaed::RawConversation>& raw,
                                            const phaed::Vocabulary& vocab, bool speakers) {
  std::vector<phaed::Conversation> out;
  out.reserve(raw.size());
  for (const auto& r : raw) out.push_back(phaed::encode_conversation(r, vocab, speakers));
  return out;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string text;
  for (const auto& w : words) {
    if (!text.empty()) text += ' ';
    text += w;
  }
  return text;
}

/// Mean per-token NLL over a held-out set, no gradients.
template <typename S>
double corpus_mean_nll(const phaed::PhaedModel<S>& model,
                       const std::vector<phaed::Conversation>& convs) {
  double sum = 0;
  phaed::Index tokens = 0;
  for (const auto& conv : convs) {
    phaed::ConversationTensors t = phaed::tensors_from_conversation(conv);
    phaed::ad::Tape<S> tape;
    phaed::ModelP<phaed::ad::VarId> m = model.lift(tape, false);
    phaed::ConversationLoss<S> loss =
        phaed::conversation_loss(tape, m, model.config(), t);
    sum += static_cast<double>(loss.total);
    tokens += loss.predicted_tokens;
  }
  if (tokens == 0) throw phaed::EmptyCorpusError("validation corpus predicts no tokens");
  return sum / static_cast<double>(tokens);
}

template <typename S>
void run_train(const phaed::RunConfig& rc, const std::string& out_dir) {
  auto tokenizer = phaed::make_default_tokenizer();
  auto raw = load_corpus(rc, *tokenizer, rc.data.corpus);
  phaed::Vocabulary vocab = phaed::build_vocab(raw, rc.model.vocab_size);

  phaed::ModelConfig mc = rc.model;
  mc.vocab_size = vocab.size();  // effective size: reserved + kept tokens
  phaed::PhaedModel<S> model(mc);
  model.init_params(rc.training.seed);

  const bool speakers = !mc.ablations.no_speaker_tokens;
  auto convs = encode_all(raw, vocab, speakers);
  auto batches =
      phaed::batch_conversations(convs, static_cast<std::size_t>(rc.training.batch_size));

  std::vector<phaed::Conversation> val_convs;
  if (!rc.data.validation.empty() && rc.training.patience > 0) {
    auto val_raw = load_corpus(rc, *tokenizer, rc.data.validation);
    val_convs = encode_all(val_raw, vocab, speakers);
  }

  std::ofstream log(out_dir + "/loss_log.jsonl");
  if (!log) throw phaed::Error("cannot write " + out_dir + "/loss_log.jsonl");

  phaed::AdamOptimizer<S> opt(rc.training);
  phaed::Index step = 0;
  double best_val = std::numeric_limits<double>::infinity();
  phaed::Index stale_checks = 0;
  bool stop = false;
  while (!stop && step < rc.training.max_steps) {
    for (std::size_t b = 0; b < batches.size() && step < rc.training.max_steps; ++b) {
      ++step;
      phaed::StepResult<S> res =
          phaed::train_step(model, opt, batches[b], step, static_cast<phaed::Index>(b));
      ordered_json line;
      line["step"] = step;
      line["loss_per_token"] = res.loss_per_token;
      line["loss_sum"] = res.loss_sum;
      line["tokens"] = res.tokens;
      log << line.dump() << "\n";
    }
    if (!val_convs.empty()) {
      double val = corpus_mean_nll(model, val_convs);
      ordered_json line;
      line["validation_after_step"] = step;
      line["loss_per_token"] = val;
      log << line.dump() << "\n";
      if (val < best_val) {
        best_val = val;
        stale_checks = 0;
      } else if (++stale_checks >= rc.training.patience) {
        stop = true;
      }
    }
  }
  phaed::save_checkpoint(out_dir + "/model.ckpt", model, vocab, step, &opt);
  std::cout << "trained " << step << " steps; checkpoint at " << out_dir << "/model.ckpt\n";
}

template <typename S>
void run_eval(const phaed::RunConfig& rc, const std::string& out_dir,
              const std::string& ckpt) {
  phaed::LoadedCheckpoint<S> loaded = phaed::load_checkpoint<S>(ckpt);
  const phaed::ModelConfig& mc = loaded.model.config();
  const bool speakers = !mc.ablations.no_speaker_tokens;

  auto tokenizer = phaed::make_default_tokenizer();
  auto raw = load_corpus(rc, *tokenizer, rc.data.corpus);
  auto convs = encode_all(raw, loaded.vocab, speakers);

  std::vector<phaed::TokenScore> scores;
  std::vector<phaed::Sentence> candidates, references;
  for (const auto& conv : convs) {
    phaed::ConversationTensors t = phaed::tensors_from_conversation(conv);
    for (const phaed::TokenScore& s : phaed::score_conversation(loaded.model, t))
      scores.push_back(s);

    std::vector<phaed::TokenIds> generated =
        phaed::generate_conversation(loaded.model, t.queries, rc.generation);
    for (std::size_t i = 0; i < generated.size(); ++i) {
      candidates.push_back(phaed::decode_content(generated[i], loaded.vocab));
      references.push_back(phaed::decode_content(t.responses[i], loaded.vocab));
    }
  }

  phaed::MetricReport report;
  if (rc.data.embedding_store.empty()) {
    report = phaed::evaluate_responses(scores, candidates, references);
  } else {
    phaed::WordEmbeddingStore store = phaed::WordEmbeddingStore::load(rc.data.embedding_store);
    report = phaed::evaluate_responses(scores, candidates, references, &store);
  }

  std::ofstream out(out_dir + "/metrics.json");
  if (!out) throw phaed::Error("cannot write " + out_dir + "/metrics.json");
  out << phaed::to_json(report).dump(2) << "\n";
  std::cout << phaed::to_json(report).dump(2) << "\n";
}

/// Tokenized utterances of each input line; a blank line gives an empty list.
std::vector<std::vector<std::vector<std::string>>> read_dialogue_lines(
    const std::string& path, phaed::CorpusFormat format, const phaed::Tokenizer& tokenizer,
    phaed::Index max_len) {
  std::ifstream in(path);
  if (!in) throw phaed::ParseError("cannot open corpus: " + path);

  std::vector<std::vector<std::vector<std::string>>> lines;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::vector<std::vector<std::string>> utterances;
    if (format == phaed::CorpusFormat::kJsonl) {
      if (!line.empty()) {
        json j;
        try {
          j = json::parse(line);
        } catch (const json::exception& e) {
          throw phaed::ParseError(path + " line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("dialogue") || !j["dialogue"].is_array())
          throw phaed::ParseError(path + " line " + std::to_string(line_no) +
                                  ": expected {\"dialogue\": [...]}");
        for (const auto& u : j["dialogue"]) {
          if (!u.is_string())
            throw phaed::ParseError(path + " line " + std::to_string(line_no) +
                                    ": dialogue entries must be strings");
          utterances.push_back(tokenizer.tokenize(u.get<std::string>()));
        }
      }
    } else {
      std::size_t pos = 0;
      while (pos <= line.size()) {
        std::size_t next = line.find("__eou__", pos);
        std::string piece = line.substr(pos, next == std::string::npos ? next : next - pos);
        auto words = tokenizer.tokenize(piece);
        if (!words.empty()) utterances.push_back(std::move(words));
        if (next == std::string::npos) break;
        pos = next + 7;
      }
    }
    for (auto& u : utterances)
      if (static_cast<phaed::Index>(u.size()) > max_len)
        u.resize(static_cast<std::size_t>(max_len));
    lines.push_back(std::move(utterances));
  }
  return lines;
}

template <typename S>
void run_generate(const phaed::RunConfig& rc, const std::string& out_dir,
                  const std::string& ckpt, bool queries_only) {
  phaed::LoadedCheckpoint<S> loaded = phaed::load_checkpoint<S>(ckpt);
  const phaed::ModelConfig& mc = loaded.model.config();
  const bool speakers = !mc.ablations.no_speaker_tokens;
  const phaed::Index max_utt = std::min(rc.data.max_utterance_len, mc.i_max - 3);

  auto tokenizer = phaed::make_default_tokenizer();
  auto lines = read_dialogue_lines(rc.data.corpus, format_of(rc), *tokenizer, max_utt);

  std::ofstream out(out_dir + "/responses.jsonl");
  if (!out) throw phaed::Error("cannot write " + out_dir + "/responses.jsonl");
  for (const auto& utterances : lines) {
    std::vector<phaed::TokenIds> queries;
    for (std::size_t i = 0; i < utterances.size(); i += queries_only ? 1 : 2)
      queries.push_back(
          phaed::frame_utterance(utterances[i], phaed::Role::kQuery, loaded.vocab, speakers));

    ordered_json line;
    line["responses"] = json::array();
    if (!queries.empty()) {
      std::vector<phaed::TokenIds> responses =
          phaed::generate_conversation(loaded.model, queries, rc.generation);
      for (const auto& frame : responses)
        line["responses"].push_back(join_words(phaed::decode_content(frame, loaded.vocab)));
    }
    out << line.dump() << "\n";
  }
  std::cout << "responses written to " << out_dir << "/responses.jsonl\n";
}

template <typename S>
void run_chat(const phaed::RunConfig& rc, const std::string& ckpt) {
  phaed::LoadedCheckpoint<S> loaded = phaed::load_checkpoint<S>(ckpt);
  const phaed::Index max_utt =
      std::min(rc.data.max_utterance_len, loaded.model.config().i_max - 3);
  auto tokenizer = phaed::make_default_tokenizer();
  phaed::chat_loop(loaded.model, loaded.vocab, *tokenizer, rc.generation, max_utt, std::cin,
                   std::cout);
}

/// Per-conversation turn-level attention weights: for each turn t a row
/// [a_1 .. a_t] of the mass placed on every earlier query, summing to one.
template <typename S>
void run_attn(const phaed::RunConfig& rc, const std::string& out_dir,
              const std::string& ckpt) {
  phaed::LoadedCheckpoint<S> loaded = phaed::load_checkpoint<S>(ckpt);
  const phaed::ModelConfig& mc = loaded.model.config();
  if (mc.ablations.no_turn_level_relative_attention)
    throw phaed::Error("this checkpoint was trained without turn-level relative attention");
  const bool speakers = !mc.ablations.no_speaker_tokens;

  auto tokenizer = phaed::make_default_tokenizer();
  auto raw = load_corpus(rc, *tokenizer, rc.data.corpus);
  auto convs = encode_all(raw, loaded.vocab, speakers);

  std::ofstream out(out_dir + "/attention.jsonl");
  if (!out) throw phaed::Error("cannot write " + out_dir + "/attention.jsonl");
  for (std::size_t c = 0; c < convs.size(); ++c) {
    phaed::ConversationTensors t = phaed::tensors_from_conversation(convs[c]);
    phaed::ad::Tape<S> tape;
    phaed::ModelP<phaed::ad::VarId> m = loaded.model.lift(tape, false);
    phaed::EncodedConversation<S> enc =
        phaed::encode_queries<S>(tape, m, mc, t.queries, {}, true);

    ordered_json line;
    line["conversation"] = c;
    line["alpha"] = json::array();
    for (const auto& slices : enc.attention) {
      std::vector<double> alpha;
      for (S a : phaed::query_attention_weights(slices)) alpha.push_back(static_cast<double>(a));
      line["alpha"].push_back(alpha);
    }
    out << line.dump() << "\n";
  }
  std::cout << "attention written to " << out_dir << "/attention.jsonl\n";
}

void run_stats(const phaed::RunConfig& rc, const std::string& out_dir) {
  auto tokenizer = phaed::make_default_tokenizer();
  auto raw = load_corpus(rc, *tokenizer, rc.data.corpus);
  phaed::CorpusStats stats = phaed::corpus_stats(raw);

  ordered_json j;
  j["dialogue_count"] = stats.dialogue_count;
  j["avg_utterances_per_dialogue"] = stats.avg_utterances_per_dialogue;
  j["avg_tokens_per_utterance"] = stats.avg_tokens_per_utterance;

  std::ofstream out(out_dir + "/stats.json");
  if (!out) throw phaed::Error("cannot write " + out_dir + "/stats.json");
  out << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
}

template <typename S>
void run_command(const std::string& cmd, const phaed::RunConfig& rc,
                 const std::string& out_dir, const std::string& ckpt, bool queries_only) {
  if (cmd == "train")
    run_train<S>(rc, out_dir);
  else if (cmd == "eval")
    run_eval<S>(rc, out_dir, ckpt);
  else if (cmd == "generate")
    run_generate<S>(rc, out_dir, ckpt, queries_only);
  else if (cmd == "chat")
    run_chat<S>(rc, ckpt);
  else if (cmd == "attn")
    run_attn<S>(rc, out_dir, ckpt);
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("PHAED_NUM_THREADS"))
    Eigen::setNbThreads(std::max(1, std::atoi(threads)));

  CLI::App app{"speaker-aware hierarchical dialogue model"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_override;
  std::vector<std::string> overrides;
  bool queries_only = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--set", overrides, "override a config value, e.g. model.d_s=16");
    sub->add_option("--checkpoint", checkpoint, "model checkpoint path");
    sub->add_option("--out", out_override, "output directory (default from config)");
  };
  add_common(app.add_subcommand("train", "train a model and save a checkpoint"));
  add_common(app.add_subcommand("eval", "generate and score against gold responses"));
  CLI::App* gen = app.add_subcommand("generate", "write responses for a query corpus");
  add_common(gen);
  gen->add_flag("--queries-only", queries_only,
                "treat every utterance as a query instead of every other one");
  add_common(app.add_subcommand("chat", "interactive session on stdin/stdout"));
  add_common(app.add_subcommand("attn", "export turn-level attention weights"));
  add_common(app.add_subcommand("stats", "summarize a corpus"));

  CLI11_PARSE(app, argc, argv);
  const std::string cmd = app.get_subcommands().front()->get_name();

  phaed::RunConfig rc;
  try {
    rc = phaed::load_run_config(config_path, overrides);
  } catch (const phaed::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  const bool needs_ckpt =
      cmd == "eval" || cmd == "generate" || cmd == "chat" || cmd == "attn";
  if (needs_ckpt) {
    if (checkpoint.empty()) {
      std::cerr << "missing checkpoint: " << cmd << " requires --checkpoint\n";
      return 3;
    }
    if (!std::filesystem::exists(checkpoint)) {
      std::cerr << "missing checkpoint: " << checkpoint << "\n";
      return 3;
    }
  }

  try {
    const std::string out_dir = out_override.empty() ? rc.output.dir : out_override;
    std::filesystem::create_directories(out_dir);

    if (cmd == "stats") {
      run_stats(rc, out_dir);
    } else {
      phaed::Precision prec =
          needs_ckpt ? phaed::peek_checkpoint(checkpoint).model.precision : rc.model.precision;
      if (prec == phaed::Precision::kFloat64)
        run_command<double>(cmd, rc, out_dir, checkpoint, queries_only);
      else
        run_command<float>(cmd, rc, out_dir, checkpoint, queries_only);
    }

    std::string manifest_ckpt = checkpoint;
    if (cmd == "train") manifest_ckpt = out_dir + "/model.ckpt";
    write_manifest(out_dir, cmd, rc, manifest_ckpt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
