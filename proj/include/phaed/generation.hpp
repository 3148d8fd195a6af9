#pragma once

#include <cmath>
#include <iosfwd>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "phaed/corpus.hpp"
#include "phaed/decoder.hpp"
#include "phaed/encoder.hpp"
#include "phaed/model.hpp"
#include "phaed/tokenize.hpp"
#include "phaed/vocab.hpp"

namespace phaed {

namespace detail {

// Plain-value building blocks for the incremental decoder. Generation never
// needs gradients, so these run on bare matrices instead of the tape.

template <typename S>
Mat<S> gen_layer_norm(const Mat<S>& x, const LayerNormP<Mat<S>>& p, S eps = S(1e-5)) {
  Mat<S> out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const S mean = x.row(i).mean();
    const S var = (x.row(i).array() - mean).square().mean();
    const S inv = S(1) / std::sqrt(var + eps);
    out.row(i) =
        ((x.row(i).array() - mean) * inv * p.gamma.row(0).array() + p.beta.row(0).array())
            .matrix();
  }
  return out;
}

template <typename S>
Mat<S> gen_linear(const Mat<S>& x, const LinearP<Mat<S>>& p) {
  Mat<S> y = x * p.w;
  y.rowwise() += p.b.row(0);
  return y;
}

template <typename S>
Mat<S> gen_softmax_rows(const Mat<S>& logits) {
  Mat<S> p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const S mx = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - mx).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

/// One attention read of a single query row over cached keys/values; all
/// cached rows are visible (the causal frontier is the newest row itself).
template <typename S>
Mat<S> gen_attend_row(const MhaP<Mat<S>>& p, const Mat<S>& q_row, const Mat<S>& k,
                      const Mat<S>& v, Index heads) {
  const Index d = p.wq.w.cols();
  const Index dh = d / heads;
  const S inv_scale = S(1) / std::sqrt(static_cast<S>(dh));
  Mat<S> q = gen_linear(q_row, p.wq);
  Mat<S> merged(1, d);
  for (Index h = 0; h < heads; ++h) {
    Mat<S> logits = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
    Mat<S> probs = gen_softmax_rows<S>(logits * inv_scale);
    merged.middleCols(h * dh, dh) = probs * v.middleCols(h * dh, dh);
  }
  return gen_linear(merged, p.wo);
}

template <typename S>
Mat<S> gen_ffn(const Mat<S>& x, const FfnP<Mat<S>>& p) {
  Mat<S> h = gen_linear(x, p.in).cwiseMax(S(0));
  return gen_linear(h, p.out);
}

template <typename S>
void append_row(Mat<S>& m, const Mat<S>& row) {
  m.conservativeResize(m.rows() + 1, row.cols());
  m.row(m.rows() - 1) = row.row(0);
}

}  // namespace detail

/// Token-by-token decoder for one response turn. Keys and values of the
/// frozen memory and of every fed token are cached per layer, so each step
/// costs one row through the stack; the resulting token sequence matches a
/// full re-run of the teacher-forcing decoder over the same prefix.
template <typename S>
class DecoderInference {
 public:
  explicit DecoderInference(const PhaedModel<S>& model) : model_(model) {}

  void begin_turn(int turn, Mat<S> s_hat, const ResponseMemory<S>& memory) {
    const ModelConfig& cfg = model_.config();
    if (turn < 1) throw ContractViolation("turn index must be 1-based");
    if (turn > cfg.t_max)
      throw CapacityError("turn index " + std::to_string(turn) + " exceeds t_max (" +
                          std::to_string(cfg.t_max) + ")");
    if (memory.layer_count() != model_.params().dec_layers.size())
      throw ContractViolation("memory layer count does not match the decoder depth");
    turn_ = turn;
    pos_ = 0;
    s_hat_ = std::move(s_hat);

    const std::size_t layers = model_.params().dec_layers.size();
    k_self_.assign(layers, Mat<S>(0, cfg.d_s));
    v_self_.assign(layers, Mat<S>(0, cfg.d_s));
    k_cross_.resize(layers);
    v_cross_.resize(layers);
    states_.assign(layers, Mat<S>(0, cfg.d_s));
    for (std::size_t n = 0; n < layers; ++n) {
      const auto& layer = model_.params().dec_layers[n];
      Index mem_rows = 0;
      for (const auto& e : memory.layer(n)) mem_rows += e.rows();
      if (mem_rows > 0) {
        Mat<S> mem(mem_rows, cfg.d_s);
        Index r = 0;
        for (const auto& e : memory.layer(n)) {
          mem.middleRows(r, e.rows()) = e;
          r += e.rows();
        }
        Mat<S> mem_norm = detail::gen_layer_norm(mem, layer.ln_self);
        k_self_[n] = detail::gen_linear(mem_norm, layer.self_attn.wk);
        v_self_[n] = detail::gen_linear(mem_norm, layer.self_attn.wv);
      }
      Mat<S> ctx = s_hat_;  // cross keys come straight from the global query state
      k_cross_[n] = detail::gen_linear(ctx, layer.cross_attn.wk);
      v_cross_[n] = detail::gen_linear(ctx, layer.cross_attn.wv);
    }
  }

  /// Feeds the next frame token and returns the logits row predicting the
  /// token after it.
  Mat<S> feed(TokenId token) {
    const ModelConfig& cfg = model_.config();
    if (turn_ < 1) throw ContractViolation("begin_turn must run before feed");
    if (token < 0 || token >= cfg.vocab_size)
      throw CapacityError("token id " + std::to_string(token) + " outside vocabulary (" +
                          std::to_string(cfg.vocab_size) + ")");
    if (pos_ >= cfg.i_max)
      throw CapacityError("response length " + std::to_string(pos_ + 1) + " exceeds i_max (" +
                          std::to_string(cfg.i_max) + ")");

    const auto& emb = model_.params().emb;
    Mat<S> x = emb.token.row(token);
    if (emb.turn) x += emb.turn->row(turn_ - 1);
    x += emb.pos.row(pos_);
    ++pos_;

    for (std::size_t n = 0; n < model_.params().dec_layers.size(); ++n) {
      const auto& layer = model_.params().dec_layers[n];
      detail::append_row(states_[n], x);

      Mat<S> norm = detail::gen_layer_norm(x, layer.ln_self);
      detail::append_row(k_self_[n], detail::gen_linear(norm, layer.self_attn.wk));
      detail::append_row(v_self_[n], detail::gen_linear(norm, layer.self_attn.wv));
      Mat<S> a =
          x + detail::gen_attend_row(layer.self_attn, norm, k_self_[n], v_self_[n], cfg.heads);

      Mat<S> a_norm = detail::gen_layer_norm(a, layer.ln_cross);
      Mat<S> b = a + cross_attend(layer.cross_attn, a_norm, n, cfg.heads);

      Mat<S> b_norm = detail::gen_layer_norm(b, layer.ln_ffn);
      x = b + detail::gen_ffn(b_norm, layer.ffn);
    }
    if (!model_.params().dec_layers.empty())
      x = detail::gen_layer_norm(x, model_.params().dec_final);

    if (model_.params().w_out) return x * *model_.params().w_out;
    return x * model_.params().emb.token.transpose();
  }

  /// Per-layer inputs of every fed token, ready for the response memory.
  std::vector<Mat<S>> take_states() {
    std::vector<Mat<S>> out = std::move(states_);
    states_.clear();
    turn_ = 0;
    return out;
  }

 private:
  Mat<S> cross_attend(const MhaP<Mat<S>>& p, const Mat<S>& q_row, std::size_t n, Index heads) {
    const Index d = p.wq.w.cols();
    const Index dh = d / heads;
    const S inv_scale = S(1) / std::sqrt(static_cast<S>(dh));
    Mat<S> q = detail::gen_linear(q_row, p.wq);
    Mat<S> merged(1, d);
    for (Index h = 0; h < heads; ++h) {
      Mat<S> logits = q.middleCols(h * dh, dh) * k_cross_[n].middleCols(h * dh, dh).transpose();
      Mat<S> probs = detail::gen_softmax_rows<S>(logits * inv_scale);
      merged.middleCols(h * dh, dh) = probs * v_cross_[n].middleCols(h * dh, dh);
    }
    return detail::gen_linear(merged, p.wo);
  }

  const PhaedModel<S>& model_;
  Mat<S> s_hat_;
  std::vector<Mat<S>> k_self_, v_self_;
  std::vector<Mat<S>> k_cross_, v_cross_;
  std::vector<Mat<S>> states_;
  int turn_ = 0;
  Index pos_ = 0;
};

/// Plain values of the global query states for a conversation prefix.
template <typename S>
struct EncodedQueryValues {
  std::vector<Mat<S>> s_hat;
  std::vector<Index> query_lens;
};

template <typename S>
EncodedQueryValues<S> encode_query_values(const PhaedModel<S>& model,
                                          const std::vector<TokenIds>& query_frames) {
  ad::Tape<S> tape;
  ModelP<ad::VarId> m = model.lift(tape, false);
  EncodedConversation<S> enc =
      encode_queries<S>(tape, m, model.config(), query_frames);
  EncodedQueryValues<S> out;
  out.query_lens = enc.query_lens;
  for (ad::VarId id : enc.s_hat) out.s_hat.push_back(tape.value(id));
  return out;
}

namespace detail {

template <typename S>
TokenId argmax_token(const Mat<S>& logits_row) {
  Index best = 0;
  logits_row.row(0).maxCoeff(&best);
  return static_cast<TokenId>(best);
}

/// Content-token budget for one generated response frame.
inline Index response_budget(const ModelConfig& cfg, const GenerationSettings& gen) {
  if (gen.max_response_len < 1)
    throw ConfigError("generation.max_response_len must be >= 1");
  const Index overhead = cfg.ablations.no_speaker_tokens ? 2 : 3;  // seeds + [EOU]
  if (gen.max_response_len + overhead > cfg.i_max)
    throw ConfigError("generation.max_response_len " + std::to_string(gen.max_response_len) +
                      " does not fit i_max " + std::to_string(cfg.i_max) +
                      " with the frame tokens");
  return gen.max_response_len;
}

}  // namespace detail

/// Greedy response for the newest query, given every query frame so far and
/// the memory of earlier responses. Seeds [SOU] (and [Speaker-R] unless
/// speaker tokens are ablated), then appends argmax tokens until [EOU]
/// appears or the length budget forces one. The generated frame's hidden
/// states are appended to the memory.
template <typename S>
TokenIds generate_response_with(DecoderInference<S>& dec, const PhaedModel<S>& model,
                                int turn, Mat<S> s_hat, ResponseMemory<S>& memory,
                                const GenerationSettings& gen) {
  const ModelConfig& cfg = model.config();
  const Index budget = detail::response_budget(cfg, gen);

  dec.begin_turn(turn, std::move(s_hat), memory);
  TokenIds frame = {Vocabulary::kSou};
  Mat<S> logits = dec.feed(Vocabulary::kSou);
  if (!cfg.ablations.no_speaker_tokens) {
    frame.push_back(Vocabulary::kSpeakerR);
    logits = dec.feed(Vocabulary::kSpeakerR);
  }

  Index content = 0;
  while (true) {
    TokenId next = detail::argmax_token(logits);
    if (next == Vocabulary::kEou) {
      frame.push_back(Vocabulary::kEou);
      dec.feed(Vocabulary::kEou);
      break;
    }
    frame.push_back(next);
    logits = dec.feed(next);
    if (++content == budget) {  // truncated: close the frame ourselves
      frame.push_back(Vocabulary::kEou);
      dec.feed(Vocabulary::kEou);
      break;
    }
  }
  memory.append(dec.take_states());
  return frame;
}

template <typename S>
TokenIds generate_response(const PhaedModel<S>& model, const std::vector<TokenIds>& query_frames,
                           ResponseMemory<S>& memory, const GenerationSettings& gen) {
  if (query_frames.empty()) throw ContractViolation("generate_response needs a query");
  EncodedQueryValues<S> enc = encode_query_values(model, query_frames);
  DecoderInference<S> dec(model);
  return generate_response_with(dec, model, static_cast<int>(query_frames.size()),
                                std::move(enc.s_hat.back()), memory, gen);
}

/// Greedy responses for every turn of a conversation, threading the response
/// memory across turns.
template <typename S>
std::vector<TokenIds> generate_conversation(const PhaedModel<S>& model,
                                            const std::vector<TokenIds>& query_frames,
                                            const GenerationSettings& gen) {
  if (query_frames.empty()) throw ContractViolation("generate_conversation needs queries");
  EncodedQueryValues<S> enc = encode_query_values(model, query_frames);
  ResponseMemory<S> memory(model.config().layers, model.config().memory_len());
  DecoderInference<S> dec(model);
  std::vector<TokenIds> responses;
  for (std::size_t t = 0; t < query_frames.size(); ++t)
    responses.push_back(generate_response_with(dec, model, static_cast<int>(t) + 1,
                                               std::move(enc.s_hat[t]), memory, gen));
  return responses;
}

struct ChatTurn {
  TokenIds query_frame;
  TokenIds response_frame;
  std::string response_text;
};

struct ChatTranscript {
  std::vector<ChatTurn> turns;
};

/// Line-oriented chat: every input line is a new query turn, `/reset` clears
/// the conversation, `/quit` (or end of input) leaves. Returns the transcript
/// so a session can be replayed through generate_conversation.
template <typename S>
ChatTranscript chat_loop(const PhaedModel<S>& model, const Vocabulary& vocab,
                         const Tokenizer& tokenizer, const GenerationSettings& gen,
                         Index max_utterance_len, std::istream& in, std::ostream& out) {
  const ModelConfig& cfg = model.config();
  if (cfg.vocab_size != vocab.size())
    throw ContractViolation("model vocabulary size " + std::to_string(cfg.vocab_size) +
                            " does not match the vocabulary (" + std::to_string(vocab.size()) +
                            ")");
  const bool speakers = !cfg.ablations.no_speaker_tokens;
  ChatTranscript transcript;
  std::vector<TokenIds> query_frames;
  ResponseMemory<S> memory(cfg.layers, cfg.memory_len());

  std::string line;
  out << "chat ready; /reset starts over, /quit leaves\n";
  while (out << "> " << std::flush, std::getline(in, line)) {
    if (line == "/quit") break;
    if (line == "/reset") {
      query_frames.clear();
      memory.clear();
      out << "(conversation cleared)\n";
      continue;
    }
    std::vector<std::string> words = tokenizer.tokenize(line);
    if (words.empty()) continue;
    if (static_cast<Index>(words.size()) > max_utterance_len) {
      words.resize(static_cast<std::size_t>(max_utterance_len));
      out << "(query truncated to " << max_utterance_len << " tokens)\n";
    }
    if (static_cast<int>(query_frames.size()) + 1 > cfg.t_max) {
      out << "(turn limit " << cfg.t_max << " reached; /reset to continue)\n";
      continue;
    }
    query_frames.push_back(frame_utterance(words, Role::kQuery, vocab, speakers));
    TokenIds response = generate_response(model, query_frames, memory, gen);

    std::string text;
    for (const std::string& w : decode_content(response, vocab)) {
      if (!text.empty()) text += ' ';
      text += w;
    }
    out << text << "\n";
    transcript.turns.push_back({query_frames.back(), response, text});
  }
  return transcript;
}

}  // namespace phaed
