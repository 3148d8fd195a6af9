#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "phaed/attention.hpp"
#include "phaed/embedding.hpp"
#include "phaed/model.hpp"
#include "phaed/tape.hpp"
#include "phaed/types.hpp"

namespace phaed {

/// Clipped turn distance between the current turn t and an earlier turn p.
inline Index relative_distance(int t, int p, Index r_max) {
  if (p < 1 || p > t)
    throw ContractViolation("relative_distance requires 1 <= p <= t, got p=" +
                            std::to_string(p) + " t=" + std::to_string(t));
  return std::min<Index>(t - p, r_max);
}

/// Per-query bidirectional encoder stack: pre-normalized self-attention and
/// feed-forward layers with residuals, closed by one final normalization.
/// A zero-layer stack is the identity. Keys past valid_len are masked.
template <typename S>
ad::VarId inner_query_encode(ad::Tape<S>& tape, const ModelP<ad::VarId>& m,
                             const ModelConfig& cfg, ad::VarId b_t, Index valid_len) {
  const Index len = tape.value(b_t).rows();
  Mask pad = key_padding_mask(len, len, valid_len);
  const Mask* mask = valid_len < len ? &pad : nullptr;

  ad::VarId x = b_t;
  for (const auto& layer : m.enc_layers) {
    ad::VarId norm = ad::layer_norm(tape, x, layer.ln_attn.gamma, layer.ln_attn.beta, S(1e-5));
    x = ad::add(tape, x, mha_core(tape, layer.attn, norm, norm, cfg.heads, mask));
    ad::VarId norm2 = ad::layer_norm(tape, x, layer.ln_ffn.gamma, layer.ln_ffn.beta, S(1e-5));
    x = ad::add(tape, x, ffn_core(tape, layer.ffn, norm2));
  }
  if (!m.enc_layers.empty())
    x = ad::layer_norm(tape, x, m.enc_final.gamma, m.enc_final.beta, S(1e-5));
  return x;
}

template <typename S>
struct TurnRelAttention {
  ad::VarId context = ad::kNoVar;  // S_t plus the attention readout, before the FFN
  /// A_{t->p} for p = 1..t: head-averaged attention slices trimmed to valid
  /// rows/columns. Empty unless retention was requested.
  std::vector<Mat<S>> slices;
};

/// Attention of the current query over every query so far (itself included).
/// Keys and values of turn p carry the bias column for the clipped distance
/// t - p, broadcast over positions; one softmax per query row normalizes
/// jointly across the concatenated keys of all turns. Logits scale by
/// 1/sqrt(d_s) over the full width.
template <typename S>
TurnRelAttention<S> turn_relative_attention(ad::Tape<S>& tape, const InterQueryP<ad::VarId>& p,
                                            const std::vector<ad::VarId>& history,
                                            const std::vector<Index>& valid_lens,
                                            const ModelConfig& cfg, bool retain_attention) {
  if (history.empty()) throw ContractViolation("turn_relative_attention needs history");
  if (valid_lens.size() != history.size())
    throw ContractViolation("history/valid_lens size mismatch");
  const int t = static_cast<int>(history.size());
  const ad::VarId s_t = history.back();
  const Index rows = tape.value(s_t).rows();
  const Index d = cfg.d_s;
  const Index dh = d / cfg.heads;
  const S inv_scale = S(1) / std::sqrt(static_cast<S>(d));

  ad::VarId q = ad::matmul(tape, s_t, p.wq);

  std::vector<ad::VarId> keys, values;
  std::vector<Index> offsets(history.size() + 1, 0);
  bool any_padding = false;
  for (int turn = 1; turn <= t; ++turn) {
    ad::VarId s_p = history[static_cast<std::size_t>(turn - 1)];
    Index r = relative_distance(t, turn, cfg.r_max);
    ad::VarId k_p = ad::add_col_as_row_bias(tape, ad::matmul(tape, s_p, p.wk),
                                            ad::slice_cols(tape, p.bk, r, 1));
    ad::VarId v_p = ad::add_col_as_row_bias(tape, ad::matmul(tape, s_p, p.wv),
                                            ad::slice_cols(tape, p.bv, r, 1));
    keys.push_back(k_p);
    values.push_back(v_p);
    Index lp = tape.value(s_p).rows();
    offsets[static_cast<std::size_t>(turn)] = offsets[static_cast<std::size_t>(turn - 1)] + lp;
    any_padding = any_padding || valid_lens[static_cast<std::size_t>(turn - 1)] < lp;
  }
  const Index total = offsets.back();
  ad::VarId k_all = keys.size() == 1 ? keys.front() : ad::concat_rows(tape, keys);
  ad::VarId v_all = values.size() == 1 ? values.front() : ad::concat_rows(tape, values);

  Mask mask;
  if (any_padding) {
    mask = Mask::Zero(rows, total);
    for (int turn = 1; turn <= t; ++turn) {
      Index base = offsets[static_cast<std::size_t>(turn - 1)];
      Index valid = valid_lens[static_cast<std::size_t>(turn - 1)];
      for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < valid; ++j) mask(i, base + j) = 1;
    }
  }

  std::vector<ad::VarId> ctx, probs;
  for (Index h = 0; h < cfg.heads; ++h) {
    ad::VarId qh = ad::slice_cols(tape, q, h * dh, dh);
    ad::VarId kh = ad::slice_cols(tape, k_all, h * dh, dh);
    ad::VarId vh = ad::slice_cols(tape, v_all, h * dh, dh);
    ad::VarId logits = ad::scale(tape, ad::matmul(tape, qh, kh, false, true), inv_scale);
    ad::VarId ph = any_padding ? ad::softmax_rows_masked(tape, logits, mask)
                               : ad::softmax_rows_full(tape, logits);
    probs.push_back(ph);
    ctx.push_back(ad::matmul(tape, ph, vh));
  }
  ad::VarId merged = cfg.heads == 1 ? ctx.front() : ad::concat_cols(tape, ctx);

  TurnRelAttention<S> result;
  result.context = ad::add(tape, s_t, merged);
  if (retain_attention) {
    Mat<S> mean = tape.value(probs.front());
    for (std::size_t h = 1; h < probs.size(); ++h) mean += tape.value(probs[h]);
    mean /= static_cast<S>(cfg.heads);
    const Index q_valid = valid_lens.back();
    for (int turn = 1; turn <= t; ++turn) {
      Index base = offsets[static_cast<std::size_t>(turn - 1)];
      Index valid = valid_lens[static_cast<std::size_t>(turn - 1)];
      result.slices.push_back(mean.block(0, base, q_valid, valid));
    }
  }
  return result;
}

template <typename S>
struct EncodedTurn {
  ad::VarId s_hat = ad::kNoVar;
  std::vector<Mat<S>> attention;  // A_{t->p} slices when retained
};

/// Global representation of the newest query: turn-relative attention over the
/// history, then a pre-normalized feed-forward, then the closing
/// normalization. Under the no-relative-attention ablation this is exactly
/// the inner-query representation.
template <typename S>
EncodedTurn<S> inter_query_encode(ad::Tape<S>& tape, const ModelP<ad::VarId>& m,
                                  const std::vector<ad::VarId>& history,
                                  const std::vector<Index>& valid_lens, const ModelConfig& cfg,
                                  bool retain_attention = false) {
  EncodedTurn<S> out;
  if (!m.inter) {
    out.s_hat = history.back();
    return out;
  }
  TurnRelAttention<S> attn =
      turn_relative_attention(tape, *m.inter, history, valid_lens, cfg, retain_attention);
  const auto& p = *m.inter;
  ad::VarId norm =
      ad::layer_norm(tape, attn.context, p.ln_ffn.gamma, p.ln_ffn.beta, S(1e-5));
  ad::VarId y = ad::add(tape, attn.context, ffn_core(tape, p.ffn, norm));
  out.s_hat = ad::layer_norm(tape, y, p.ln_out.gamma, p.ln_out.beta, S(1e-5));
  out.attention = std::move(attn.slices);
  return out;
}

/// Total attention mass the current query places on each turn p: the sum of
/// the A_{t->p} slice divided by the current query's length. The joint
/// normalization makes these sum to 1 over p.
template <typename S>
std::vector<S> query_attention_weights(const std::vector<Mat<S>>& slices) {
  if (slices.empty())
    throw IntrospectionError("attention slices were not retained for this turn");
  const Index q_len = slices.front().rows();
  if (q_len == 0) throw IntrospectionError("attention slices have no query rows");
  std::vector<S> alpha;
  alpha.reserve(slices.size());
  for (const auto& a : slices) alpha.push_back(a.sum() / static_cast<S>(q_len));
  return alpha;
}

template <typename S>
struct EncodedConversation {
  std::vector<ad::VarId> s;      // inner-query states per turn
  std::vector<ad::VarId> s_hat;  // global states per turn
  std::vector<Index> query_lens;
  std::vector<std::vector<Mat<S>>> attention;  // per turn, when retained
};

/// Runs both encoder stages for every query of a conversation. queries[t] may
/// be padded; valid_lens gives real frame lengths (empty means none padded).
template <typename S>
EncodedConversation<S> encode_queries(ad::Tape<S>& tape, const ModelP<ad::VarId>& m,
                                      const ModelConfig& cfg,
                                      const std::vector<TokenIds>& queries,
                                      std::vector<Index> valid_lens = {},
                                      bool retain_attention = false) {
  if (valid_lens.empty())
    for (const auto& q : queries) valid_lens.push_back(static_cast<Index>(q.size()));
  EncodedConversation<S> enc;
  enc.query_lens = valid_lens;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    int turn = static_cast<int>(i) + 1;
    ad::VarId b =
        input_representation(tape, m.emb, cfg, queries[i], turn);
    enc.s.push_back(inner_query_encode(tape, m, cfg, b, valid_lens[i]));
    std::vector<Index> lens(valid_lens.begin(), valid_lens.begin() + turn);
    EncodedTurn<S> turn_enc =
        inter_query_encode(tape, m, enc.s, lens, cfg, retain_attention);
    enc.s_hat.push_back(turn_enc.s_hat);
    enc.attention.push_back(std::move(turn_enc.attention));
  }
  return enc;
}

}  // namespace phaed
