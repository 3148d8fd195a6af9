#pragma once

#include <cmath>
#include <vector>

#include "phaed/model.hpp"
#include "phaed/tape.hpp"
#include "phaed/types.hpp"

namespace phaed {

/// relu(x W1 + b1) W2 + b2.
template <typename S>
ad::VarId ffn_core(ad::Tape<S>& tape, const FfnP<ad::VarId>& p, ad::VarId x) {
  ad::VarId h = ad::relu(tape, ad::add_row_bias(tape, ad::matmul(tape, x, p.in.w), p.in.b));
  return ad::add_row_bias(tape, ad::matmul(tape, h, p.out.w), p.out.b);
}

/// Multi-head scaled dot-product attention with per-head width d_s/heads and
/// 1/sqrt(d_head) logit scaling. The mask (rows of q x rows of kv) marks
/// attendable pairs; masked keys get exactly zero weight.
template <typename S>
ad::VarId mha_core(ad::Tape<S>& tape, const MhaP<ad::VarId>& p, ad::VarId q_in, ad::VarId kv_in,
                   Index heads, const Mask* mask) {
  const Index d = tape.value(p.wq.w).cols();
  const Index dh = d / heads;
  const S inv_scale = S(1) / std::sqrt(static_cast<S>(dh));

  ad::VarId q = ad::add_row_bias(tape, ad::matmul(tape, q_in, p.wq.w), p.wq.b);
  ad::VarId k = ad::add_row_bias(tape, ad::matmul(tape, kv_in, p.wk.w), p.wk.b);
  ad::VarId v = ad::add_row_bias(tape, ad::matmul(tape, kv_in, p.wv.w), p.wv.b);

  std::vector<ad::VarId> ctx;
  ctx.reserve(static_cast<std::size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    ad::VarId qh = ad::slice_cols(tape, q, h * dh, dh);
    ad::VarId kh = ad::slice_cols(tape, k, h * dh, dh);
    ad::VarId vh = ad::slice_cols(tape, v, h * dh, dh);
    ad::VarId logits = ad::scale(tape, ad::matmul(tape, qh, kh, false, true), inv_scale);
    ad::VarId probs = mask ? ad::softmax_rows_masked(tape, logits, *mask)
                           : ad::softmax_rows_full(tape, logits);
    ctx.push_back(ad::matmul(tape, probs, vh));
  }
  ad::VarId merged = heads == 1 ? ctx.front() : ad::concat_cols(tape, ctx);
  return ad::add_row_bias(tape, ad::matmul(tape, merged, p.wo.w), p.wo.b);
}

/// Every query row may attend the first valid_cols keys.
inline Mask key_padding_mask(Index rows, Index cols, Index valid_cols) {
  Mask m = Mask::Zero(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < valid_cols; ++j) m(i, j) = 1;
  return m;
}

/// Keys are [memory | current]: memory is fully visible, the current block is
/// causal, and current keys past valid_len stay hidden.
inline Mask causal_with_memory_mask(Index cur_len, Index mem_len, Index valid_len) {
  Mask m = Mask::Zero(cur_len, mem_len + cur_len);
  for (Index i = 0; i < cur_len; ++i) {
    for (Index j = 0; j < mem_len; ++j) m(i, j) = 1;
    for (Index j = 0; j <= i && j < valid_len; ++j) m(i, mem_len + j) = 1;
  }
  return m;
}

}  // namespace phaed
