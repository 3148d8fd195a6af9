#pragma once

#include <array>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "phaed/errors.hpp"
#include "phaed/training.hpp"
#include "phaed/types.hpp"

namespace phaed {

using Sentence = std::vector<std::string>;

/// exp of the negative mean gold log-probability. Speaker-token and [PAD]
/// entries never count; an input with nothing left to score is undefined.
double perplexity(const std::vector<TokenScore>& scores);

/// Corpus-level BLEU up to n-gram order max_order: clipped n-gram precision
/// pooled over the whole corpus, geometric mean across orders, brevity
/// penalty from total lengths. No smoothing; a zero precision at any order
/// gives zero.
double bleu_n(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references,
              int max_order);

/// Unique n-grams across all candidates divided by total n-grams.
double distinct_n(const std::vector<Sentence>& candidates, int n);

/// Word vectors from a word2vec-style text file: one `word v1 .. vd` line per
/// word, optionally preceded by a `count dim` header line.
class WordEmbeddingStore {
 public:
  static WordEmbeddingStore load(const std::string& path);

  void add(const std::string& word, Eigen::VectorXd vec);
  bool contains(const std::string& word) const { return vectors_.count(word) > 0; }
  const Eigen::VectorXd& vector_of(const std::string& word) const;
  Index dim() const { return dim_; }
  std::size_t size() const { return vectors_.size(); }

 private:
  std::unordered_map<std::string, Eigen::VectorXd> vectors_;
  Index dim_ = 0;
};

struct EmbeddingMetrics {
  double average = 0;  // cosine of mean word vectors
  double extrema = 0;  // cosine of per-dimension largest-magnitude values
  double greedy = 0;   // symmetric greedy best-cosine word matching
  std::size_t pairs_scored = 0;
  std::size_t pairs_skipped = 0;  // either side had no in-store words
};

EmbeddingMetrics embedding_metrics(const std::vector<Sentence>& candidates,
                                   const std::vector<Sentence>& references,
                                   const WordEmbeddingStore& store);

struct MetricReport {
  double perplexity = 0;
  std::array<double, 4> bleu{};  // orders 1..4
  double distinct1 = 0;
  double distinct2 = 0;
  std::optional<EmbeddingMetrics> embedding;
  std::size_t response_count = 0;
  std::size_t scored_tokens = 0;  // tokens behind the perplexity figure
};

/// Full automatic-metric battery. Candidates and references must already have
/// speaker tokens stripped; the scores stream carries its own speaker flags.
MetricReport evaluate_responses(const std::vector<TokenScore>& scores,
                                const std::vector<Sentence>& candidates,
                                const std::vector<Sentence>& references,
                                const WordEmbeddingStore* store = nullptr);

nlohmann::ordered_json to_json(const MetricReport& report);

}  // namespace phaed
