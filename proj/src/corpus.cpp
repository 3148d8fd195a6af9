#include "phaed/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "phaed/errors.hpp"

namespace phaed {
namespace {

std::vector<std::string> split_on_eou(const std::string& line) {
  static const std::string kSep = "__eou__";
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (true) {
    std::size_t hit = line.find(kSep, pos);
    if (hit == std::string::npos) {
      parts.push_back(line.substr(pos));
      break;
    }
    parts.push_back(line.substr(pos, hit - pos));
    pos = hit + kSep.size();
  }
  // A trailing separator leaves an empty final segment; that is an artifact
  // of the format, not an utterance.
  if (!parts.empty()) {
    const std::string& last = parts.back();
    if (last.find_first_not_of(" \t\r") == std::string::npos) parts.pop_back();
  }
  return parts;
}

bool is_blank(const std::string& line) {
  return line.find_first_not_of(" \t\r") == std::string::npos;
}

/// Tokenizes, truncates, and pairs one record's utterance strings.
RawConversation finish_record(const std::vector<std::string>& utterances,
                              const Tokenizer& tokenizer, Index max_utterance_len,
                              const std::string& where) {
  if (utterances.size() < 2)
    throw ParseError(where + ": record has " + std::to_string(utterances.size()) +
                     " utterance(s); need at least 2");
  RawConversation conv;
  std::size_t keep = utterances.size() - (utterances.size() % 2);  // drop trailing query
  conv.utterances.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    auto toks = tokenizer.tokenize(utterances[i]);
    if (static_cast<Index>(toks.size()) > max_utterance_len)
      toks.resize(static_cast<std::size_t>(max_utterance_len));
    conv.utterances.push_back(std::move(toks));
  }
  return conv;
}

}  // namespace

CorpusFormat corpus_format_from_string(const std::string& name) {
  if (name == "jsonl") return CorpusFormat::kJsonl;
  if (name == "eou_separated") return CorpusFormat::kEouSeparated;
  throw ConfigError("unknown corpus format: " + name);
}

std::vector<RawConversation> parse_corpus(std::istream& in, CorpusFormat format,
                                          const Tokenizer& tokenizer, Index max_utterance_len,
                                          const std::string& source_name) {
  std::vector<RawConversation> corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (is_blank(line)) continue;
    const std::string where = source_name + ":" + std::to_string(line_no);
    std::vector<std::string> utterances;
    if (format == CorpusFormat::kJsonl) {
      nlohmann::json rec;
      try {
        rec = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(where + ": invalid JSON: " + e.what());
      }
      if (!rec.is_object() || !rec.contains("dialogue") || !rec["dialogue"].is_array())
        throw ParseError(where + ": expected an object with a \"dialogue\" array");
      for (const auto& u : rec["dialogue"]) {
        if (!u.is_string())
          throw ParseError(where + ": \"dialogue\" entries must be strings");
        utterances.push_back(u.get<std::string>());
      }
    } else {
      utterances = split_on_eou(line);
    }
    corpus.push_back(finish_record(utterances, tokenizer, max_utterance_len, where));
  }
  if (corpus.empty())
    throw EmptyCorpusError(source_name + ": no conversations found");
  return corpus;
}

std::vector<RawConversation> ingest_text(const std::string& path, CorpusFormat format,
                                         const Tokenizer& tokenizer, Index max_utterance_len) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open corpus file: " + path);
  return parse_corpus(in, format, tokenizer, max_utterance_len, path);
}

Vocabulary build_vocab(const std::vector<RawConversation>& corpus, Index max_size) {
  if (corpus.empty()) throw EmptyCorpusError("cannot build a vocabulary from an empty corpus");
  if (max_size <= Vocabulary::kReservedCount)
    throw ConfigError("vocab max_size must exceed the " +
                      std::to_string(Vocabulary::kReservedCount) + " reserved tokens");

  struct Entry {
    std::size_t count = 0;
    std::size_t first_seen = 0;
  };
  std::unordered_map<std::string, Entry> freq;
  std::size_t order = 0;
  for (const auto& conv : corpus) {
    for (const auto& utt : conv.utterances) {
      for (const auto& tok : utt) {
        auto [it, inserted] = freq.try_emplace(tok);
        if (inserted) it->second.first_seen = order;
        ++it->second.count;
        ++order;
      }
    }
  }

  std::vector<std::pair<std::string, Entry>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first_seen < b.second.first_seen;
  });

  Vocabulary vocab;
  const std::size_t headroom = static_cast<std::size_t>(max_size - Vocabulary::kReservedCount);
  for (std::size_t i = 0; i < ranked.size() && i < headroom; ++i)
    vocab.add_token(ranked[i].first);
  return vocab;
}

TokenIds frame_utterance(const std::vector<std::string>& content, Role role,
                         const Vocabulary& vocab, bool include_speaker_tokens) {
  TokenIds ids;
  ids.reserve(content.size() + 3);
  ids.push_back(Vocabulary::kSou);
  if (include_speaker_tokens)
    ids.push_back(role == Role::kQuery ? Vocabulary::kSpeakerQ : Vocabulary::kSpeakerR);
  for (const auto& tok : content) ids.push_back(vocab.id_of(tok));
  ids.push_back(Vocabulary::kEou);
  return ids;
}

Conversation encode_conversation(const RawConversation& raw, const Vocabulary& vocab,
                                 bool include_speaker_tokens) {
  if (raw.utterances.size() % 2 != 0)
    throw ContractViolation("raw conversation has an odd utterance count");
  Conversation conv;
  conv.turns.reserve(raw.utterances.size() / 2);
  for (std::size_t i = 0; i + 1 < raw.utterances.size(); i += 2) {
    int turn = static_cast<int>(i / 2) + 1;
    TurnPair pair;
    pair.query = {Role::kQuery,
                  frame_utterance(raw.utterances[i], Role::kQuery, vocab,
                                  include_speaker_tokens),
                  turn};
    pair.response = {Role::kResponse,
                     frame_utterance(raw.utterances[i + 1], Role::kResponse, vocab,
                                     include_speaker_tokens),
                     turn};
    conv.turns.push_back(std::move(pair));
  }
  return conv;
}

std::vector<std::string> decode_content(const TokenIds& frame, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (TokenId id : frame) {
    if (id == Vocabulary::kSou || id == Vocabulary::kEou || id == Vocabulary::kPad ||
        Vocabulary::is_speaker_token(id))
      continue;
    out.push_back(vocab.token_of(id));
  }
  return out;
}

CorpusStats corpus_stats(const std::vector<RawConversation>& corpus) {
  CorpusStats stats;
  stats.dialogue_count = corpus.size();
  std::size_t total_utterances = 0, total_tokens = 0;
  for (const auto& conv : corpus) {
    total_utterances += conv.utterances.size();
    for (const auto& utt : conv.utterances) total_tokens += utt.size();
  }
  if (!corpus.empty())
    stats.avg_utterances_per_dialogue =
        static_cast<double>(total_utterances) / static_cast<double>(corpus.size());
  if (total_utterances > 0)
    stats.avg_tokens_per_utterance =
        static_cast<double>(total_tokens) / static_cast<double>(total_utterances);
  return stats;
}

Mask PaddedUtterances::token_mask() const {
  Mask m = Mask::Zero(ids.rows(), ids.cols());
  for (Index r = 0; r < ids.rows(); ++r)
    for (Index c = 0; c < lengths[static_cast<std::size_t>(r)]; ++c) m(r, c) = 1;
  return m;
}

namespace {

PaddedUtterances pad_turn(const std::vector<const Utterance*>& utts) {
  PaddedUtterances padded;
  Index max_len = 1;  // keep matrices non-degenerate even if every row is absent
  for (const auto* u : utts)
    if (u) max_len = std::max(max_len, static_cast<Index>(u->ids.size()));
  padded.ids.setConstant(static_cast<Index>(utts.size()), max_len, Vocabulary::kPad);
  padded.lengths.assign(utts.size(), 0);
  for (std::size_t r = 0; r < utts.size(); ++r) {
    if (!utts[r]) continue;
    const TokenIds& ids = utts[r]->ids;
    padded.lengths[r] = static_cast<Index>(ids.size());
    for (std::size_t c = 0; c < ids.size(); ++c)
      padded.ids(static_cast<Index>(r), static_cast<Index>(c)) = ids[c];
  }
  return padded;
}

}  // namespace

std::vector<Batch> batch_conversations(const std::vector<Conversation>& convs,
                                       std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < convs.size(); start += batch_size) {
    std::size_t end = std::min(start + batch_size, convs.size());
    Batch batch;
    std::size_t max_t = 0;
    for (std::size_t i = start; i < end; ++i) {
      batch.conv_index.push_back(i);
      max_t = std::max(max_t, convs[i].turns.size());
    }
    for (std::size_t t = 0; t < max_t; ++t) {
      TurnBatch tb;
      std::vector<const Utterance*> queries, responses;
      for (std::size_t i = start; i < end; ++i) {
        bool has = t < convs[i].turns.size();
        tb.valid.push_back(has ? 1 : 0);
        queries.push_back(has ? &convs[i].turns[t].query : nullptr);
        responses.push_back(has ? &convs[i].turns[t].response : nullptr);
      }
      tb.queries = pad_turn(queries);
      tb.responses = pad_turn(responses);
      batch.turns.push_back(std::move(tb));
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace phaed
