#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "phaed/tokenize.hpp"
#include "phaed/types.hpp"
#include "phaed/vocab.hpp"

namespace phaed {

enum class Role { kQuery, kResponse };

/// One framed utterance: [SOU] [Speaker-Q|Speaker-R] content... [EOU].
/// The role token is omitted when speaker tokens are disabled.
struct Utterance {
  Role role = Role::kQuery;
  TokenIds ids;
  int turn = 0;  // 1-based, shared between a query and its response
};

struct TurnPair {
  Utterance query;
  Utterance response;
};

struct Conversation {
  std::vector<TurnPair> turns;
};

/// Tokenized text before vocabulary lookup. Utterances alternate speakers,
/// index 0 is speaker-Q, and the count is even.
struct RawConversation {
  std::vector<std::vector<std::string>> utterances;
};

struct CorpusStats {
  std::size_t dialogue_count = 0;
  double avg_utterances_per_dialogue = 0.0;
  double avg_tokens_per_utterance = 0.0;
};

enum class CorpusFormat { kJsonl, kEouSeparated };

CorpusFormat corpus_format_from_string(const std::string& name);

inline constexpr Index kDefaultMaxUtteranceLen = 50;

/// Parses a corpus stream. JSONL: one {"dialogue": [...]} object per line.
/// Plain text: one conversation per line, utterances separated by "__eou__".
/// Utterances are tokenized, truncated to max_utterance_len content tokens,
/// and a trailing unanswered query is dropped.
std::vector<RawConversation> parse_corpus(std::istream& in, CorpusFormat format,
                                          const Tokenizer& tokenizer,
                                          Index max_utterance_len = kDefaultMaxUtteranceLen,
                                          const std::string& source_name = "<stream>");

std::vector<RawConversation> ingest_text(const std::string& path, CorpusFormat format,
                                         const Tokenizer& tokenizer,
                                         Index max_utterance_len = kDefaultMaxUtteranceLen);

/// Most frequent content tokens, ties broken by first occurrence. max_size
/// bounds the total vocabulary including reserved ids.
Vocabulary build_vocab(const std::vector<RawConversation>& corpus, Index max_size);

Conversation encode_conversation(const RawConversation& raw, const Vocabulary& vocab,
                                 bool include_speaker_tokens = true);

/// Builds the id frame for one utterance.
TokenIds frame_utterance(const std::vector<std::string>& content, Role role,
                         const Vocabulary& vocab, bool include_speaker_tokens = true);

/// Content tokens of a framed utterance, skipping [SOU]/[EOU]/speaker/[PAD] ids.
std::vector<std::string> decode_content(const TokenIds& frame, const Vocabulary& vocab);

CorpusStats corpus_stats(const std::vector<RawConversation>& corpus);

/// Utterances padded to a common length with [PAD]; lengths give each row's
/// valid frame length (0 when the conversation has no such turn).
struct PaddedUtterances {
  Eigen::Matrix<TokenId, Eigen::Dynamic, Eigen::Dynamic> ids;
  std::vector<Index> lengths;

  /// 1 where the token is real, 0 over padding.
  Mask token_mask() const;
};

struct TurnBatch {
  PaddedUtterances queries;
  PaddedUtterances responses;
  std::vector<std::uint8_t> valid;  // conversation still has this turn
};

/// Conversations aligned by turn index. turns.size() is the largest T in the
/// batch; shorter conversations are masked out after their last turn.
struct Batch {
  std::vector<std::size_t> conv_index;
  std::vector<TurnBatch> turns;
};

std::vector<Batch> batch_conversations(const std::vector<Conversation>& convs,
                                       std::size_t batch_size);

}  // namespace phaed
