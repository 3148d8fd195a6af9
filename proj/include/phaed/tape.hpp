#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "phaed/errors.hpp"
#include "phaed/types.hpp"

namespace phaed {
namespace ad {

using VarId = std::int32_t;
inline constexpr VarId kNoVar = -1;

/// Reverse-mode tape over dense Eigen matrices.
///
/// Every operation appends a node holding its forward value and a closure that
/// scatters the node's gradient into its inputs. backward() walks the nodes in
/// reverse creation order, so the graph must be built in topological order
/// (which eager evaluation guarantees).
template <typename Scalar>
class Tape {
 public:
  using M = Mat<Scalar>;

  struct Node {
    M value;
    M grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
    std::function<void(Tape&, const M&)> backward;  // null for leaves
  };

  VarId leaf(M value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size()) - 1;
  }

  VarId constant(M value) { return leaf(std::move(value), false); }

  VarId emplace(M value, bool requires_grad, std::function<void(Tape&, const M&)> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size()) - 1;
  }

  const M& value(VarId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(VarId id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient of the last backward() root with respect to node `id`.
  /// Zero-sized if no gradient reached the node.
  const M& grad(VarId id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  /// Gradient shaped like the node's value, materializing zeros if untouched.
  M grad_or_zero(VarId id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) return M::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(VarId id, const M& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Backpropagate from a 1x1 root node, seeding with 1.
  void backward(VarId root) {
    Node& r = nodes_[static_cast<std::size_t>(root)];
    if (r.value.rows() != 1 || r.value.cols() != 1)
      throw ContractViolation("backward root must be a scalar node");
    if (!r.requires_grad) return;
    r.grad = M::Ones(1, 1);
    for (VarId id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Operations. Each returns the id of a freshly appended node.
// ---------------------------------------------------------------------------

template <typename S>
VarId matmul(Tape<S>& t, VarId a, VarId b, bool trans_a = false, bool trans_b = false) {
  using M = Mat<S>;
  const M& A = t.value(a);
  const M& B = t.value(b);
  M C;
  if (!trans_a && !trans_b)
    C = A * B;
  else if (!trans_a && trans_b)
    C = A * B.transpose();
  else if (trans_a && !trans_b)
    C = A.transpose() * B;
  else
    C = A.transpose() * B.transpose();
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.emplace(std::move(C), rg, [a, b, trans_a, trans_b](Tape<S>& tp, const M& g) {
    const M& A = tp.value(a);
    const M& B = tp.value(b);
    if (!trans_a && !trans_b) {
      if (tp.requires_grad(a)) tp.accumulate(a, g * B.transpose());
      if (tp.requires_grad(b)) tp.accumulate(b, A.transpose() * g);
    } else if (!trans_a && trans_b) {
      if (tp.requires_grad(a)) tp.accumulate(a, g * B);
      if (tp.requires_grad(b)) tp.accumulate(b, g.transpose() * A);
    } else if (trans_a && !trans_b) {
      if (tp.requires_grad(a)) tp.accumulate(a, B * g.transpose());
      if (tp.requires_grad(b)) tp.accumulate(b, A * g);
    } else {
      if (tp.requires_grad(a)) tp.accumulate(a, (g * B).transpose());
      if (tp.requires_grad(b)) tp.accumulate(b, (A * g).transpose());
    }
  });
}

template <typename S>
VarId add(Tape<S>& t, VarId a, VarId b) {
  using M = Mat<S>;
  M v = t.value(a) + t.value(b);
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.emplace(std::move(v), rg, [a, b](Tape<S>& tp, const M& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

template <typename S>
VarId scale(Tape<S>& t, VarId a, S c) {
  using M = Mat<S>;
  M v = t.value(a) * c;
  return t.emplace(std::move(v), t.requires_grad(a), [a, c](Tape<S>& tp, const M& g) {
    tp.accumulate(a, (g * c).eval());
  });
}

/// y.row(i) = x.row(i) + bias, with bias a 1 x d row vector.
template <typename S>
VarId add_row_bias(Tape<S>& t, VarId x, VarId bias) {
  using M = Mat<S>;
  M v = t.value(x);
  v.rowwise() += t.value(bias).row(0);
  bool rg = t.requires_grad(x) || t.requires_grad(bias);
  return t.emplace(std::move(v), rg, [x, bias](Tape<S>& tp, const M& g) {
    tp.accumulate(x, g);
    if (tp.requires_grad(bias)) tp.accumulate(bias, g.colwise().sum());
  });
}

/// y.row(i) = x.row(i) + col.transpose(), with col a d x 1 column vector.
template <typename S>
VarId add_col_as_row_bias(Tape<S>& t, VarId x, VarId col) {
  using M = Mat<S>;
  M v = t.value(x);
  v.rowwise() += t.value(col).col(0).transpose();
  bool rg = t.requires_grad(x) || t.requires_grad(col);
  return t.emplace(std::move(v), rg, [x, col](Tape<S>& tp, const M& g) {
    tp.accumulate(x, g);
    if (tp.requires_grad(col)) tp.accumulate(col, g.colwise().sum().transpose());
  });
}

template <typename S>
VarId relu(Tape<S>& t, VarId x) {
  using M = Mat<S>;
  M v = t.value(x).cwiseMax(S(0));
  return t.emplace(std::move(v), t.requires_grad(x), [x](Tape<S>& tp, const M& g) {
    const M& in = tp.value(x);
    M gx = (in.array() > S(0)).template cast<S>() * g.array();
    tp.accumulate(x, gx);
  });
}

/// Row-wise layer normalization with learnable gain/offset (1 x d each).
template <typename S>
VarId layer_norm(Tape<S>& t, VarId x, VarId gamma, VarId beta, S eps) {
  using M = Mat<S>;
  const M& in = t.value(x);
  const Index rows = in.rows(), cols = in.cols();
  M xhat(rows, cols);
  Vec<S> inv_std(rows);
  for (Index i = 0; i < rows; ++i) {
    S mean = in.row(i).mean();
    S var = (in.row(i).array() - mean).square().mean();
    S is = S(1) / std::sqrt(var + eps);
    inv_std(i) = is;
    xhat.row(i) = (in.row(i).array() - mean) * is;
  }
  M v = xhat;
  v.array().rowwise() *= t.value(gamma).row(0).array();
  v.rowwise() += t.value(beta).row(0);
  bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  return t.emplace(std::move(v), rg,
                   [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                       Tape<S>& tp, const M& g) {
                     const Index rows = g.rows(), cols = g.cols();
                     if (tp.requires_grad(beta)) tp.accumulate(beta, g.colwise().sum());
                     if (tp.requires_grad(gamma))
                       tp.accumulate(gamma, (g.array() * xhat.array()).colwise().sum().matrix());
                     if (!tp.requires_grad(x)) return;
                     const auto& gam = tp.value(gamma).row(0);
                     M gx(rows, cols);
                     for (Index i = 0; i < rows; ++i) {
                       Eigen::Array<S, 1, Eigen::Dynamic> dxhat = g.row(i).array() * gam.array();
                       S m1 = dxhat.mean();
                       S m2 = (dxhat * xhat.row(i).array()).mean();
                       gx.row(i) =
                           ((dxhat - m1 - xhat.row(i).array() * m2) * inv_std(i)).matrix();
                     }
                     tp.accumulate(x, gx);
                   });
}

namespace detail {

/// Row-wise softmax. Masked-out entries (mask == 0) get probability exactly
/// zero and receive no gradient; a fully masked row yields an all-zero row.
template <typename S>
VarId softmax_rows_impl(Tape<S>& t, VarId x, Mask mask_copy, bool has_mask) {
  using M = Mat<S>;
  const M& in = t.value(x);
  const Index rows = in.rows(), cols = in.cols();
  M p = M::Zero(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    S mx = S(0);
    bool any = false;
    for (Index j = 0; j < cols; ++j) {
      if (has_mask && !mask_copy(i, j)) continue;
      if (!any || in(i, j) > mx) mx = in(i, j);
      any = true;
    }
    if (!any) continue;
    S sum = S(0);
    for (Index j = 0; j < cols; ++j) {
      if (has_mask && !mask_copy(i, j)) continue;
      S e = std::exp(in(i, j) - mx);
      p(i, j) = e;
      sum += e;
    }
    for (Index j = 0; j < cols; ++j) {
      if (has_mask && !mask_copy(i, j)) continue;
      p(i, j) /= sum;
    }
  }
  M p_copy = p;
  return t.emplace(std::move(p), t.requires_grad(x),
                   [x, p_copy = std::move(p_copy), mask_copy = std::move(mask_copy),
                    has_mask](Tape<S>& tp, const M& g) {
                     const Index rows = g.rows(), cols = g.cols();
                     Mat<S> gx = Mat<S>::Zero(rows, cols);
                     for (Index i = 0; i < rows; ++i) {
                       S s = S(0);
                       for (Index j = 0; j < cols; ++j) {
                         if (has_mask && !mask_copy(i, j)) continue;
                         s += g(i, j) * p_copy(i, j);
                       }
                       for (Index j = 0; j < cols; ++j) {
                         if (has_mask && !mask_copy(i, j)) continue;
                         gx(i, j) = p_copy(i, j) * (g(i, j) - s);
                       }
                     }
                     tp.accumulate(x, gx);
                   });
}
}  // namespace detail

template <typename S>
VarId softmax_rows_masked(Tape<S>& t, VarId x, const Mask& mask) {
  return detail::softmax_rows_impl(t, x, mask, true);
}

template <typename S>
VarId softmax_rows_full(Tape<S>& t, VarId x) {
  return detail::softmax_rows_impl(t, x, Mask(), false);
}

/// Numerically stable row-wise log-softmax over the full row.
template <typename S>
VarId log_softmax_rows(Tape<S>& t, VarId x) {
  using M = Mat<S>;
  const M& in = t.value(x);
  const Index rows = in.rows(), cols = in.cols();
  M lp(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    S mx = in.row(i).maxCoeff();
    S lse = std::log((in.row(i).array() - mx).exp().sum()) + mx;
    lp.row(i) = in.row(i).array() - lse;
  }
  M lp_copy = lp;
  return t.emplace(std::move(lp), t.requires_grad(x),
                   [x, lp_copy = std::move(lp_copy)](Tape<S>& tp, const M& g) {
                     Mat<S> gx = g;
                     for (Index i = 0; i < g.rows(); ++i) {
                       S gsum = g.row(i).sum();
                       gx.row(i) -= (lp_copy.row(i).array().exp() * gsum).matrix();
                     }
                     tp.accumulate(x, gx);
                   });
}

template <typename S>
VarId concat_rows(Tape<S>& t, const std::vector<VarId>& parts) {
  using M = Mat<S>;
  if (parts.empty()) throw ContractViolation("concat_rows needs at least one part");
  Index rows = 0;
  const Index cols = t.value(parts.front()).cols();
  for (VarId p : parts) rows += t.value(p).rows();
  M v(rows, cols);
  Index r = 0;
  bool rg = false;
  for (VarId p : parts) {
    const M& pv = t.value(p);
    v.middleRows(r, pv.rows()) = pv;
    r += pv.rows();
    rg = rg || t.requires_grad(p);
  }
  return t.emplace(std::move(v), rg, [parts](Tape<S>& tp, const M& g) {
    Index r = 0;
    for (VarId p : parts) {
      Index n = tp.value(p).rows();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleRows(r, n));
      r += n;
    }
  });
}

template <typename S>
VarId concat_cols(Tape<S>& t, const std::vector<VarId>& parts) {
  using M = Mat<S>;
  if (parts.empty()) throw ContractViolation("concat_cols needs at least one part");
  Index cols = 0;
  const Index rows = t.value(parts.front()).rows();
  for (VarId p : parts) cols += t.value(p).cols();
  M v(rows, cols);
  Index c = 0;
  bool rg = false;
  for (VarId p : parts) {
    const M& pv = t.value(p);
    v.middleCols(c, pv.cols()) = pv;
    c += pv.cols();
    rg = rg || t.requires_grad(p);
  }
  return t.emplace(std::move(v), rg, [parts](Tape<S>& tp, const M& g) {
    Index c = 0;
    for (VarId p : parts) {
      Index n = tp.value(p).cols();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleCols(c, n));
      c += n;
    }
  });
}

template <typename S>
VarId slice_rows(Tape<S>& t, VarId x, Index r0, Index n) {
  using M = Mat<S>;
  M v = t.value(x).middleRows(r0, n);
  return t.emplace(std::move(v), t.requires_grad(x), [x, r0, n](Tape<S>& tp, const M& g) {
    const M& xv = tp.value(x);
    Mat<S> gx = Mat<S>::Zero(xv.rows(), xv.cols());
    gx.middleRows(r0, n) = g;
    tp.accumulate(x, gx);
  });
}

template <typename S>
VarId slice_cols(Tape<S>& t, VarId x, Index c0, Index n) {
  using M = Mat<S>;
  M v = t.value(x).middleCols(c0, n);
  return t.emplace(std::move(v), t.requires_grad(x), [x, c0, n](Tape<S>& tp, const M& g) {
    const M& xv = tp.value(x);
    Mat<S> gx = Mat<S>::Zero(xv.rows(), xv.cols());
    gx.middleCols(c0, n) = g;
    tp.accumulate(x, gx);
  });
}

/// out.row(i) = table.row(rows[i]); gradient scatter-adds by row index.
template <typename S>
VarId gather_rows(Tape<S>& t, VarId table, std::vector<Index> rows) {
  using M = Mat<S>;
  const M& tab = t.value(table);
  M v(static_cast<Index>(rows.size()), tab.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= tab.rows())
      throw CapacityError("gather_rows: row index out of range");
    v.row(static_cast<Index>(i)) = tab.row(rows[i]);
  }
  return t.emplace(std::move(v), t.requires_grad(table),
                   [table, rows = std::move(rows)](Tape<S>& tp, const M& g) {
                     const M& tab = tp.value(table);
                     Mat<S> gt = Mat<S>::Zero(tab.rows(), tab.cols());
                     for (std::size_t i = 0; i < rows.size(); ++i)
                       gt.row(rows[i]) += g.row(static_cast<Index>(i));
                     tp.accumulate(table, gt);
                   });
}

/// Weighted negative log-likelihood: -sum_i w_i * logp(i, target_i), a 1x1 node.
template <typename S>
VarId nll_of_rows(Tape<S>& t, VarId logp, std::vector<Index> targets, std::vector<S> weights) {
  using M = Mat<S>;
  const M& lp = t.value(logp);
  if (static_cast<Index>(targets.size()) != lp.rows() || targets.size() != weights.size())
    throw ContractViolation("nll_of_rows: targets/weights must match row count");
  S total = S(0);
  for (std::size_t i = 0; i < targets.size(); ++i)
    total -= weights[i] * lp(static_cast<Index>(i), targets[i]);
  M v(1, 1);
  v(0, 0) = total;
  return t.emplace(std::move(v), t.requires_grad(logp),
                   [logp, targets = std::move(targets), weights = std::move(weights)](
                       Tape<S>& tp, const M& g) {
                     const M& lp = tp.value(logp);
                     Mat<S> gx = Mat<S>::Zero(lp.rows(), lp.cols());
                     for (std::size_t i = 0; i < targets.size(); ++i)
                       gx(static_cast<Index>(i), targets[i]) = -weights[i] * g(0, 0);
                     tp.accumulate(logp, gx);
                   });
}

}  // namespace ad
}  // namespace phaed
