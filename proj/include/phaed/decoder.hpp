#pragma once

#include <deque>
#include <string>
#include <utility>
#include <vector>

#include "phaed/attention.hpp"
#include "phaed/model.hpp"
#include "phaed/tape.hpp"
#include "phaed/types.hpp"

namespace phaed {

/// Turns whose responses stay cached when generating turn t: [max(t-c_max,1),
/// t-1]. Empty (first > last) at t=1 or with no memory budget.
inline std::pair<int, int> memory_window(int t, Index c_max) {
  if (t < 1) throw ContractViolation("memory_window requires t >= 1");
  if (c_max < 0) throw ContractViolation("memory_window requires c_max >= 0");
  int first = std::max<int>(t - static_cast<int>(c_max), 1);
  return {first, t - 1};
}

/// Per-layer FIFO cache of previous responses' hidden states. Entry n of a
/// turn is the input to decoder layer n (the embedded frame for n = 0). The
/// states are plain values: they re-enter later turns as constants, so no
/// gradient ever flows into them.
template <typename S>
class ResponseMemory {
 public:
  ResponseMemory(Index layer_count, Index capacity)
      : layers_(static_cast<std::size_t>(layer_count)), capacity_(capacity) {
    if (capacity < 0) throw ContractViolation("memory capacity must be >= 0");
  }

  /// One state matrix per layer, already trimmed to the response's real
  /// length. The oldest turn falls out when capacity is exceeded.
  void append(std::vector<Mat<S>> states) {
    if (states.size() != layers_.size())
      throw ContractViolation("memory append expects one state per layer");
    if (capacity_ == 0) return;
    for (std::size_t n = 0; n < layers_.size(); ++n) {
      layers_[n].push_back(std::move(states[n]));
      if (static_cast<Index>(layers_[n].size()) > capacity_) layers_[n].pop_front();
    }
  }

  Index entry_count() const { return layers_.empty() ? 0 : static_cast<Index>(layers_[0].size()); }

  Index total_rows() const {
    Index n = 0;
    if (!layers_.empty())
      for (const auto& m : layers_[0]) n += m.rows();
    return n;
  }

  Index capacity() const { return capacity_; }
  const std::deque<Mat<S>>& layer(std::size_t n) const { return layers_[n]; }
  std::size_t layer_count() const { return layers_.size(); }

  void clear() {
    for (auto& l : layers_) l.clear();
  }

 private:
  std::vector<std::deque<Mat<S>>> layers_;
  Index capacity_;
};

template <typename S>
struct DecoderForward {
  ad::VarId h_top = ad::kNoVar;  // |R_t| x d_s, after the final normalization
  /// Hidden states to cache for later turns: the input of every layer,
  /// trimmed to valid_len rows.
  std::vector<Mat<S>> memory_states;
};

/// One teacher-forced (or re-scored) pass over a response frame. Per layer:
/// self-attention over [frozen memory | current states] with a causal mask on
/// the current block, cross-attention to the turn's global query state, then
/// the feed-forward, all pre-normalized with residuals.
template <typename S>
DecoderForward<S> decoder_forward(ad::Tape<S>& tape, const ModelP<ad::VarId>& m,
                                  const ModelConfig& cfg, ad::VarId resp_inputs,
                                  Index valid_len, const ResponseMemory<S>& memory,
                                  ad::VarId s_hat, Index s_hat_len) {
  if (memory.layer_count() != m.dec_layers.size())
    throw ContractViolation("memory layer count does not match the decoder depth");

  const Index len = tape.value(resp_inputs).rows();
  const Index ctx_len = tape.value(s_hat).rows();
  Mask cross = key_padding_mask(len, ctx_len, s_hat_len);
  const Mask* cross_mask = s_hat_len < ctx_len ? &cross : nullptr;

  DecoderForward<S> out;
  ad::VarId h = resp_inputs;
  for (std::size_t n = 0; n < m.dec_layers.size(); ++n) {
    const auto& layer = m.dec_layers[n];
    out.memory_states.push_back(tape.value(h).topRows(valid_len));

    Index mem_rows = 0;
    for (const auto& e : memory.layer(n)) mem_rows += e.rows();
    ad::VarId kv = h;
    if (mem_rows > 0) {
      Mat<S> mem_cat(mem_rows, tape.value(h).cols());
      Index r = 0;
      for (const auto& e : memory.layer(n)) {
        mem_cat.middleRows(r, e.rows()) = e;
        r += e.rows();
      }
      kv = ad::concat_rows(tape, {tape.constant(std::move(mem_cat)), h});
    }
    ad::VarId kv_norm =
        ad::layer_norm(tape, kv, layer.ln_self.gamma, layer.ln_self.beta, S(1e-5));
    ad::VarId q_norm = mem_rows > 0 ? ad::slice_rows(tape, kv_norm, mem_rows, len) : kv_norm;
    Mask self_mask = causal_with_memory_mask(len, mem_rows, valid_len);
    ad::VarId a =
        ad::add(tape, h, mha_core(tape, layer.self_attn, q_norm, kv_norm, cfg.heads, &self_mask));

    ad::VarId a_norm =
        ad::layer_norm(tape, a, layer.ln_cross.gamma, layer.ln_cross.beta, S(1e-5));
    ad::VarId b =
        ad::add(tape, a, mha_core(tape, layer.cross_attn, a_norm, s_hat, cfg.heads, cross_mask));

    ad::VarId b_norm = ad::layer_norm(tape, b, layer.ln_ffn.gamma, layer.ln_ffn.beta, S(1e-5));
    h = ad::add(tape, b, ffn_core(tape, layer.ffn, b_norm));
  }
  out.h_top = m.dec_layers.empty()
                  ? h
                  : ad::layer_norm(tape, h, m.dec_final.gamma, m.dec_final.beta, S(1e-5));
  return out;
}

/// Unnormalized output scores: H W^O, or H E^T with tied embeddings.
template <typename S>
ad::VarId output_logits(ad::Tape<S>& tape, const ModelP<ad::VarId>& m, ad::VarId h) {
  if (m.w_out) return ad::matmul(tape, h, *m.w_out);
  return ad::matmul(tape, h, m.emb.token, false, true);
}

/// Per-position probability rows over the vocabulary.
template <typename S>
ad::VarId output_distribution(ad::Tape<S>& tape, const ModelP<ad::VarId>& m, ad::VarId h) {
  return ad::softmax_rows_full(tape, output_logits(tape, m, h));
}

}  // namespace phaed
