#pragma once

#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "phaed/config.hpp"
#include "phaed/errors.hpp"
#include "phaed/tape.hpp"
#include "phaed/types.hpp"

namespace phaed {

// Parameter containers are templated on the leaf type so the same structure
// holds dense matrices (the model) and tape variable ids (a lifted forward
// pass). zip_params is the one traversal; everything that needs "all
// parameters in a stable order" goes through it.

template <typename T>
struct LinearP {
  T w;
  T b;  // 1 x out
};

template <typename T>
struct LayerNormP {
  T gamma;  // 1 x d
  T beta;   // 1 x d
};

template <typename T>
struct FfnP {
  LinearP<T> in;
  LinearP<T> out;
};

template <typename T>
struct MhaP {
  LinearP<T> wq, wk, wv, wo;
};

template <typename T>
struct EncoderLayerP {
  LayerNormP<T> ln_attn;
  MhaP<T> attn;
  LayerNormP<T> ln_ffn;
  FfnP<T> ffn;
};

/// Turn-level relative attention block: biasless projections, clipped-distance
/// key/value bias tables (d_s rows, one column per clipped distance), then a
/// pre-normalized feed-forward with a closing normalization.
template <typename T>
struct InterQueryP {
  T wq, wk, wv;  // d_s x d_s, no bias terms
  T bk, bv;      // d_s x (r_max + 1)
  LayerNormP<T> ln_ffn;
  FfnP<T> ffn;
  LayerNormP<T> ln_out;
};

template <typename T>
struct DecoderLayerP {
  LayerNormP<T> ln_self;
  MhaP<T> self_attn;
  LayerNormP<T> ln_cross;
  MhaP<T> cross_attn;
  LayerNormP<T> ln_ffn;
  FfnP<T> ffn;
};

template <typename T>
struct EmbeddingP {
  T token;                // |V| x d_s
  std::optional<T> turn;  // T_max x d_s; absent without the aligned turn table
  T pos;                  // I_max x d_s
};

template <typename T>
struct ModelP {
  EmbeddingP<T> emb;
  std::vector<EncoderLayerP<T>> enc_layers;
  LayerNormP<T> enc_final;
  std::optional<InterQueryP<T>> inter;  // absent under the no-relative-attention ablation
  std::vector<DecoderLayerP<T>> dec_layers;
  LayerNormP<T> dec_final;
  std::optional<T> w_out;  // d_s x |V|; absent when tied to emb.token
};

namespace detail {

template <typename A, typename B, typename Fn>
void zip_ln(const std::string& name, A& a, B& b, Fn& fn) {
  fn(name + ".gamma", a.gamma, b.gamma);
  fn(name + ".beta", a.beta, b.beta);
}

template <typename A, typename B, typename Fn>
void zip_linear(const std::string& name, A& a, B& b, Fn& fn) {
  fn(name + ".w", a.w, b.w);
  fn(name + ".b", a.b, b.b);
}

template <typename A, typename B, typename Fn>
void zip_mha(const std::string& name, A& a, B& b, Fn& fn) {
  zip_linear(name + ".wq", a.wq, b.wq, fn);
  zip_linear(name + ".wk", a.wk, b.wk, fn);
  zip_linear(name + ".wv", a.wv, b.wv, fn);
  zip_linear(name + ".wo", a.wo, b.wo, fn);
}

template <typename A, typename B, typename Fn>
void zip_ffn(const std::string& name, A& a, B& b, Fn& fn) {
  zip_linear(name + ".in", a.in, b.in, fn);
  zip_linear(name + ".out", a.out, b.out, fn);
}

}  // namespace detail

/// Walks two structurally identical parameter sets in one fixed order,
/// calling fn(name, a_leaf, b_leaf). The order defines parameter identity
/// for initialization, optimizer state, and checkpoints.
template <typename MA, typename MB, typename Fn>
void zip_params(MA& a, MB& b, Fn&& fn) {
  using detail::zip_ffn;
  using detail::zip_linear;
  using detail::zip_ln;
  using detail::zip_mha;

  fn("emb.token", a.emb.token, b.emb.token);
  if (a.emb.turn) fn("emb.turn", *a.emb.turn, *b.emb.turn);
  fn("emb.pos", a.emb.pos, b.emb.pos);

  for (std::size_t l = 0; l < a.enc_layers.size(); ++l) {
    const std::string base = "enc.l" + std::to_string(l);
    auto& ea = a.enc_layers[l];
    auto& eb = b.enc_layers[l];
    zip_ln(base + ".ln_attn", ea.ln_attn, eb.ln_attn, fn);
    zip_mha(base + ".attn", ea.attn, eb.attn, fn);
    zip_ln(base + ".ln_ffn", ea.ln_ffn, eb.ln_ffn, fn);
    zip_ffn(base + ".ffn", ea.ffn, eb.ffn, fn);
  }
  zip_ln("enc.final", a.enc_final, b.enc_final, fn);

  if (a.inter) {
    auto& ia = *a.inter;
    auto& ib = *b.inter;
    fn("inter.wq", ia.wq, ib.wq);
    fn("inter.wk", ia.wk, ib.wk);
    fn("inter.wv", ia.wv, ib.wv);
    fn("inter.bk", ia.bk, ib.bk);
    fn("inter.bv", ia.bv, ib.bv);
    zip_ln("inter.ln_ffn", ia.ln_ffn, ib.ln_ffn, fn);
    zip_ffn("inter.ffn", ia.ffn, ib.ffn, fn);
    zip_ln("inter.ln_out", ia.ln_out, ib.ln_out, fn);
  }

  for (std::size_t l = 0; l < a.dec_layers.size(); ++l) {
    const std::string base = "dec.l" + std::to_string(l);
    auto& da = a.dec_layers[l];
    auto& db = b.dec_layers[l];
    zip_ln(base + ".ln_self", da.ln_self, db.ln_self, fn);
    zip_mha(base + ".self", da.self_attn, db.self_attn, fn);
    zip_ln(base + ".ln_cross", da.ln_cross, db.ln_cross, fn);
    zip_mha(base + ".cross", da.cross_attn, db.cross_attn, fn);
    zip_ln(base + ".ln_ffn", da.ln_ffn, db.ln_ffn, fn);
    zip_ffn(base + ".ffn", da.ffn, db.ffn, fn);
  }
  zip_ln("dec.final", a.dec_final, b.dec_final, fn);

  if (a.w_out) fn("out.w", *a.w_out, *b.w_out);
}

/// Empty parameter set with the same layer counts and optional-field presence.
template <typename TB, typename TA>
ModelP<TB> shape_like(const ModelP<TA>& a) {
  ModelP<TB> b;
  if (a.emb.turn) b.emb.turn.emplace();
  b.enc_layers.resize(a.enc_layers.size());
  if (a.inter) b.inter.emplace();
  b.dec_layers.resize(a.dec_layers.size());
  if (a.w_out) b.w_out.emplace();
  return b;
}

template <typename Scalar>
class PhaedModel {
 public:
  using M = Mat<Scalar>;

  /// cfg.vocab_size must be the effective vocabulary size (reserved + kept
  /// content tokens), not the configured cap.
  explicit PhaedModel(ModelConfig cfg) : config_(std::move(cfg)) { allocate(); }

  const ModelConfig& config() const { return config_; }
  ModelP<M>& params() { return params_; }
  const ModelP<M>& params() const { return params_; }

  template <typename Fn>
  void for_each(Fn&& fn) {
    zip_params(params_, params_, [&](const std::string& name, M& m, M&) { fn(name, m); });
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    zip_params(params_, params_,
               [&](const std::string& name, const M& m, const M&) { fn(name, m); });
  }

  /// Weights and tables draw uniform values in [-0.1, 0.1]; normalization
  /// gains start at 1, offsets and linear biases at 0. Draws happen in
  /// traversal order, so a seed fixes every parameter.
  void init_params(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<Scalar> dist(Scalar(-0.1), Scalar(0.1));
    for_each([&](const std::string& name, M& m) {
      if (name.ends_with(".gamma")) {
        m.setOnes();
      } else if (name.ends_with(".beta") || name.ends_with(".b")) {
        m.setZero();
      } else {
        for (Index i = 0; i < m.rows(); ++i)
          for (Index j = 0; j < m.cols(); ++j) m(i, j) = dist(rng);
      }
    });
  }

  Index parameter_count() const {
    Index n = 0;
    for_each([&](const std::string&, const M& m) { n += m.size(); });
    return n;
  }

  /// Registers every parameter as a tape leaf; mirrors the structure with
  /// variable ids. `names` (if given) receives (name, id) in traversal order.
  ModelP<ad::VarId> lift(ad::Tape<Scalar>& tape, bool requires_grad,
                         std::vector<std::pair<std::string, ad::VarId>>* names = nullptr) const {
    ModelP<ad::VarId> ids = shape_like<ad::VarId>(params_);
    zip_params(params_, ids, [&](const std::string& name, const M& m, ad::VarId& id) {
      id = tape.leaf(m, requires_grad);
      if (names) names->emplace_back(name, id);
    });
    return ids;
  }

 private:
  void allocate() {
    const Index d = config_.d_s;
    const Index dff = config_.ff_width();
    const Index v = config_.vocab_size;

    auto mat = [](Index r, Index c) { return M::Zero(r, c); };
    auto linear = [&](LinearP<M>& p, Index in, Index out) {
      p.w = mat(in, out);
      p.b = mat(1, out);
    };
    auto ln = [&](LayerNormP<M>& p) {
      p.gamma = mat(1, d);
      p.beta = mat(1, d);
    };
    auto mha = [&](MhaP<M>& p) {
      linear(p.wq, d, d);
      linear(p.wk, d, d);
      linear(p.wv, d, d);
      linear(p.wo, d, d);
    };
    auto ffn = [&](FfnP<M>& p) {
      linear(p.in, d, dff);
      linear(p.out, dff, d);
    };

    params_.emb.token = mat(v, d);
    if (!config_.ablations.no_aligned_turn_embedding)
      params_.emb.turn = mat(config_.t_max, d);
    params_.emb.pos = mat(config_.i_max, d);

    params_.enc_layers.resize(static_cast<std::size_t>(config_.layers));
    for (auto& l : params_.enc_layers) {
      ln(l.ln_attn);
      mha(l.attn);
      ln(l.ln_ffn);
      ffn(l.ffn);
    }
    ln(params_.enc_final);

    if (!config_.ablations.no_turn_level_relative_attention) {
      params_.inter.emplace();
      auto& iq = *params_.inter;
      iq.wq = mat(d, d);
      iq.wk = mat(d, d);
      iq.wv = mat(d, d);
      iq.bk = mat(d, config_.r_max + 1);
      iq.bv = mat(d, config_.r_max + 1);
      ln(iq.ln_ffn);
      ffn(iq.ffn);
      ln(iq.ln_out);
    }

    params_.dec_layers.resize(static_cast<std::size_t>(config_.layers));
    for (auto& l : params_.dec_layers) {
      ln(l.ln_self);
      mha(l.self_attn);
      ln(l.ln_cross);
      mha(l.cross_attn);
      ln(l.ln_ffn);
      ffn(l.ffn);
    }
    ln(params_.dec_final);

    if (!config_.tie_output_embeddings) params_.w_out = mat(d, v);
  }

  ModelConfig config_;
  ModelP<M> params_;
};

}  // namespace phaed
