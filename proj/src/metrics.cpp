#include "phaed/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "phaed/vocab.hpp"

namespace phaed {

double perplexity(const std::vector<TokenScore>& scores) {
  double sum = 0;
  std::size_t n = 0;
  for (const TokenScore& s : scores) {
    if (s.is_speaker || s.token == Vocabulary::kPad) continue;
    sum += s.logp;
    ++n;
  }
  if (n == 0) throw MetricError("perplexity is undefined with no scored tokens");
  return std::exp(-sum / static_cast<double>(n));
}

namespace {

using Ngram = std::vector<std::string>;

std::map<Ngram, std::size_t> ngram_counts(const Sentence& s, std::size_t n) {
  std::map<Ngram, std::size_t> counts;
  if (s.size() >= n)
    for (std::size_t i = 0; i + n <= s.size(); ++i)
      ++counts[Ngram(s.begin() + static_cast<std::ptrdiff_t>(i),
                     s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

}  // namespace

double bleu_n(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references,
              int max_order) {
  if (max_order < 1) throw ContractViolation("BLEU order must be >= 1");
  if (candidates.size() != references.size())
    throw ContractViolation("BLEU needs one reference per candidate");

  std::size_t cand_len = 0, ref_len = 0;
  for (const Sentence& c : candidates) cand_len += c.size();
  for (const Sentence& r : references) ref_len += r.size();
  if (cand_len == 0) return 0;

  double log_precision_sum = 0;
  for (std::size_t n = 1; n <= static_cast<std::size_t>(max_order); ++n) {
    std::size_t matched = 0, total = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      std::map<Ngram, std::size_t> cand = ngram_counts(candidates[i], n);
      std::map<Ngram, std::size_t> ref = ngram_counts(references[i], n);
      for (const auto& [gram, count] : cand) {
        total += count;
        auto it = ref.find(gram);
        if (it != ref.end()) matched += std::min(count, it->second);
      }
    }
    if (matched == 0) return 0;
    log_precision_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
  }

  const double bp = cand_len > ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(ref_len) /
                                             static_cast<double>(cand_len));
  return bp * std::exp(log_precision_sum / max_order);
}

double distinct_n(const std::vector<Sentence>& candidates, int n) {
  if (n < 1) throw ContractViolation("distinct order must be >= 1");
  std::set<Ngram> unique;
  std::size_t total = 0;
  for (const Sentence& c : candidates) {
    std::map<Ngram, std::size_t> counts = ngram_counts(c, static_cast<std::size_t>(n));
    for (const auto& [gram, count] : counts) {
      unique.insert(gram);
      total += count;
    }
  }
  if (total == 0)
    throw MetricError("distinct-" + std::to_string(n) + " is undefined with no n-grams");
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

WordEmbeddingStore WordEmbeddingStore::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open embedding store: " + path);

  WordEmbeddingStore store;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::vector<std::string> parts;
    std::string part;
    while (fields >> part) parts.push_back(part);
    if (parts.empty()) continue;

    if (first) {
      first = false;
      // word2vec text files may start with a "count dim" header
      if (parts.size() == 2) {
        char* end = nullptr;
        std::strtol(parts[0].c_str(), &end, 10);
        bool ints = end && *end == '\0';
        std::strtol(parts[1].c_str(), &end, 10);
        ints = ints && end && *end == '\0';
        if (ints) continue;
      }
    }

    if (parts.size() < 2)
      throw ParseError("embedding store line " + std::to_string(line_no) +
                       ": expected a word and at least one value");
    Eigen::VectorXd vec(static_cast<Index>(parts.size()) - 1);
    for (std::size_t i = 1; i < parts.size(); ++i) {
      try {
        vec(static_cast<Index>(i) - 1) = std::stod(parts[i]);
      } catch (const std::exception&) {
        throw ParseError("embedding store line " + std::to_string(line_no) +
                         ": bad value '" + parts[i] + "'");
      }
    }
    try {
      store.add(parts[0], std::move(vec));
    } catch (const ContractViolation& e) {
      throw ParseError("embedding store line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (store.size() == 0) throw ParseError("embedding store is empty: " + path);
  return store;
}

void WordEmbeddingStore::add(const std::string& word, Eigen::VectorXd vec) {
  if (vec.size() == 0) throw ContractViolation("embedding vectors must be non-empty");
  if (dim_ == 0)
    dim_ = vec.size();
  else if (vec.size() != dim_)
    throw ContractViolation("vector width " + std::to_string(vec.size()) +
                            " does not match store width " + std::to_string(dim_));
  vectors_[word] = std::move(vec);
}

const Eigen::VectorXd& WordEmbeddingStore::vector_of(const std::string& word) const {
  auto it = vectors_.find(word);
  if (it == vectors_.end()) throw ContractViolation("word not in embedding store: " + word);
  return it->second;
}

namespace {

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0 || nb == 0) return 0;
  return a.dot(b) / (na * nb);
}

std::vector<Eigen::VectorXd> in_store(const Sentence& s, const WordEmbeddingStore& store) {
  std::vector<Eigen::VectorXd> vecs;
  for (const std::string& w : s)
    if (store.contains(w)) vecs.push_back(store.vector_of(w));
  return vecs;
}

Eigen::VectorXd mean_vector(const std::vector<Eigen::VectorXd>& vecs) {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(vecs.front().size());
  for (const auto& v : vecs) m += v;
  return m / static_cast<double>(vecs.size());
}

/// Per dimension, the value of largest magnitude across the sentence's
/// vectors; on a magnitude tie the positive value wins.
Eigen::VectorXd extrema_vector(const std::vector<Eigen::VectorXd>& vecs) {
  Eigen::VectorXd e = vecs.front();
  for (const auto& v : vecs)
    for (Index d = 0; d < e.size(); ++d)
      if (std::abs(v(d)) > std::abs(e(d)) || (std::abs(v(d)) == std::abs(e(d)) && v(d) > e(d)))
        e(d) = v(d);
  return e;
}

double greedy_direction(const std::vector<Eigen::VectorXd>& from,
                        const std::vector<Eigen::VectorXd>& to) {
  double sum = 0;
  for (const auto& a : from) {
    double best = -1;
    for (const auto& b : to) best = std::max(best, cosine(a, b));
    sum += best;
  }
  return sum / static_cast<double>(from.size());
}

}  // namespace

EmbeddingMetrics embedding_metrics(const std::vector<Sentence>& candidates,
                                   const std::vector<Sentence>& references,
                                   const WordEmbeddingStore& store) {
  if (candidates.size() != references.size())
    throw ContractViolation("embedding metrics need one reference per candidate");

  EmbeddingMetrics out;
  double avg = 0, ext = 0, gre = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    std::vector<Eigen::VectorXd> cand = in_store(candidates[i], store);
    std::vector<Eigen::VectorXd> ref = in_store(references[i], store);
    if (cand.empty() || ref.empty()) {
      ++out.pairs_skipped;
      continue;
    }
    avg += cosine(mean_vector(cand), mean_vector(ref));
    ext += cosine(extrema_vector(cand), extrema_vector(ref));
    gre += (greedy_direction(cand, ref) + greedy_direction(ref, cand)) / 2;
    ++out.pairs_scored;
  }
  if (out.pairs_scored == 0)
    throw MetricError("embedding metrics are undefined: no pair had in-store words");
  out.average = avg / static_cast<double>(out.pairs_scored);
  out.extrema = ext / static_cast<double>(out.pairs_scored);
  out.greedy = gre / static_cast<double>(out.pairs_scored);
  return out;
}

MetricReport evaluate_responses(const std::vector<TokenScore>& scores,
                                const std::vector<Sentence>& candidates,
                                const std::vector<Sentence>& references,
                                const WordEmbeddingStore* store) {
  MetricReport report;
  report.perplexity = perplexity(scores);
  for (const TokenScore& s : scores)
    if (!s.is_speaker && s.token != Vocabulary::kPad) ++report.scored_tokens;
  for (int n = 1; n <= 4; ++n)
    report.bleu[static_cast<std::size_t>(n) - 1] = bleu_n(candidates, references, n);
  report.distinct1 = distinct_n(candidates, 1);
  report.distinct2 = distinct_n(candidates, 2);
  report.response_count = candidates.size();
  if (store) report.embedding = embedding_metrics(candidates, references, *store);
  return report;
}

nlohmann::ordered_json to_json(const MetricReport& report) {
  nlohmann::ordered_json j;
  j["perplexity"] = report.perplexity;
  j["bleu_1"] = report.bleu[0];
  j["bleu_2"] = report.bleu[1];
  j["bleu_3"] = report.bleu[2];
  j["bleu_4"] = report.bleu[3];
  j["distinct_1"] = report.distinct1;
  j["distinct_2"] = report.distinct2;
  if (report.embedding) {
    j["embedding_average"] = report.embedding->average;
    j["embedding_extrema"] = report.embedding->extrema;
    j["embedding_greedy"] = report.embedding->greedy;
    j["embedding_pairs_skipped"] = report.embedding->pairs_skipped;
  }
  j["response_count"] = report.response_count;
  j["scored_tokens"] = report.scored_tokens;
  return j;
}

}  // namespace phaed
