// Copyright 2026 The MoSARe Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mosare/common.hpp"
#include "mosare/rng.hpp"

namespace mosare::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; invalidated by Tape::reset().
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Mat& val() const;
  const Mat& grad() const;
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
  double scalar() const { return val()(0, 0); }
};

/// Reverse-mode tape over Eigen matrices. Nodes are appended in topological
/// order; backward() walks them in reverse. Matrices stay small at desk
/// scale, so per-node std::function dispatch is acceptable.
class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;  // allocated on first accumulation
    std::function<void(Tape&, const Mat&)> backprop;
    bool needs_grad = false;
  };

  Var constant(Mat value) { return push(std::move(value), false); }

  /// Differentiable leaf (parameter binding or probed input).
  Var leaf(Mat value) { return push(std::move(value), true); }

  Var push(Mat value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  void set_backprop(int id, std::function<void(Tape&, const Mat&)> fn) {
    nodes_[static_cast<std::size_t>(id)].backprop = std::move(fn);
  }

  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  const Mat& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  void accumulate(int id, const Mat& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf.
  void backward(Var loss) {
    if (loss.tape != this) throw StateError("backward: Var belongs to another tape");
    if (value(loss.id).size() != 1) throw ValueError("backward: loss must be a 1x1 scalar");
    accumulate(loss.id, Mat::Ones(1, 1));
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.size() != 0 && n.backprop) n.backprop(*this, n.grad);
    }
  }

  void reset() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

inline const Mat& Var::val() const { return tape->value(id); }
inline const Mat& Var::grad() const { return tape->grad(id); }

namespace detail {
inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(cat(op, ": shape mismatch (", a.rows(), "x", a.cols(), " vs ",
                             b.rows(), "x", b.cols(), ")"));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Arithmetic

inline Var add(Var a, Var b) {
  detail::require_same_shape(a, b, "add");
  Tape& t = *a.tape;
  Var out = t.push(a.val() + b.val(), t.needs_grad(a.id) || t.needs_grad(b.id));
  t.set_backprop(out.id, [ai = a.id, bi = b.id](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g);
    tp.accumulate(bi, g);
  });
  return out;
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a, b, "sub");
  Tape& t = *a.tape;
  Var out = t.push(a.val() - b.val(), t.needs_grad(a.id) || t.needs_grad(b.id));
  t.set_backprop(out.id, [ai = a.id, bi = b.id](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g);
    tp.accumulate(bi, -g);
  });
  return out;
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape(a, b, "mul");
  Tape& t = *a.tape;
  Var out = t.push(a.val().cwiseProduct(b.val()), t.needs_grad(a.id) || t.needs_grad(b.id));
  t.set_backprop(out.id, [ai = a.id, bi = b.id](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g.cwiseProduct(tp.value(bi)));
    tp.accumulate(bi, g.cwiseProduct(tp.value(ai)));
  });
  return out;
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Var out = t.push(a.val() * s, t.needs_grad(a.id));
  t.set_backprop(out.id,
                 [ai = a.id, s](Tape& tp, const Mat& g) { tp.accumulate(ai, g * s); });
  return out;
}

inline Var add_scalar(Var a, double c) {
  Tape& t = *a.tape;
  Var out = t.push((a.val().array() + c).matrix(), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id](Tape& tp, const Mat& g) { tp.accumulate(ai, g); });
  return out;
}

/// Elementwise product with a constant matrix (presence masks, dropout masks).
inline Var mul_const(Var a, const Mat& m) {
  if (a.rows() != m.rows() || a.cols() != m.cols())
    throw DimensionError("mul_const: shape mismatch");
  Tape& t = *a.tape;
  Var out = t.push(a.val().cwiseProduct(m), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id, mc = m](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g.cwiseProduct(mc));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  Tape& t = *a.tape;
  Var out = t.push(a.val() * b.val(), t.needs_grad(a.id) || t.needs_grad(b.id));
  t.set_backprop(out.id, [ai = a.id, bi = b.id](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g * tp.value(bi).transpose());
    tp.accumulate(bi, tp.value(ai).transpose() * g);
  });
  return out;
}

/// a * b^T without materialising a transpose node.
inline Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_nt: inner dimensions differ");
  Tape& t = *a.tape;
  Var out = t.push(a.val() * b.val().transpose(), t.needs_grad(a.id) || t.needs_grad(b.id));
  t.set_backprop(out.id, [ai = a.id, bi = b.id](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g * tp.value(bi));
    tp.accumulate(bi, g.transpose() * tp.value(ai));
  });
  return out;
}

/// s * a with constant s. Used for pooling and row-selection matrices.
inline Var matmul_const_left(const Mat& s, Var a) {
  if (s.cols() != a.rows()) throw DimensionError("matmul_const_left: inner dimensions differ");
  Tape& t = *a.tape;
  Var out = t.push(s * a.val(), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id, sc = s](Tape& tp, const Mat& g) {
    tp.accumulate(ai, sc.transpose() * g);
  });
  return out;
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().transpose(), t.needs_grad(a.id));
  t.set_backprop(out.id,
                 [ai = a.id](Tape& tp, const Mat& g) { tp.accumulate(ai, g.transpose()); });
  return out;
}

/// Broadcast-add a (1, D) row vector to every row of (R, D).
inline Var add_rowvec(Var a, Var r) {
  if (r.rows() != 1 || r.cols() != a.cols()) throw DimensionError("add_rowvec: bad row vector");
  Tape& t = *a.tape;
  Mat out_v = a.val();
  out_v.rowwise() += r.val().row(0);
  Var out = t.push(std::move(out_v), t.needs_grad(a.id) || t.needs_grad(r.id));
  t.set_backprop(out.id, [ai = a.id, ri = r.id](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g);
    tp.accumulate(ri, g.colwise().sum());
  });
  return out;
}

/// Scale each row of (R, D) by the matching entry of a (R, 1) column.
inline Var mul_colvec(Var a, Var v) {
  if (v.cols() != 1 || v.rows() != a.rows()) throw DimensionError("mul_colvec: bad column vector");
  Tape& t = *a.tape;
  Mat out_v = a.val().array().colwise() * v.val().col(0).array();
  Var out = t.push(std::move(out_v), t.needs_grad(a.id) || t.needs_grad(v.id));
  t.set_backprop(out.id, [ai = a.id, vi = v.id](Tape& tp, const Mat& g) {
    tp.accumulate(ai, (g.array().colwise() * tp.value(vi).col(0).array()).matrix());
    tp.accumulate(vi, g.cwiseProduct(tp.value(ai)).rowwise().sum());
  });
  return out;
}

/// Scale each column of (R, D) by the matching entry of a (1, D) row.
inline Var mul_rowvec(Var a, Var r) {
  if (r.rows() != 1 || r.cols() != a.cols()) throw DimensionError("mul_rowvec: bad row vector");
  Tape& t = *a.tape;
  Mat out_v = a.val().array().rowwise() * r.val().row(0).array();
  Var out = t.push(std::move(out_v), t.needs_grad(a.id) || t.needs_grad(r.id));
  t.set_backprop(out.id, [ai = a.id, ri = r.id](Tape& tp, const Mat& g) {
    tp.accumulate(ai, (g.array().rowwise() * tp.value(ri).row(0).array()).matrix());
    tp.accumulate(ri, g.cwiseProduct(tp.value(ai)).colwise().sum());
  });
  return out;
}

/// x * W + b with b a (1, out) row vector.
inline Var affine(Var x, Var w, Var b) { return add_rowvec(matmul(x, w), b); }

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var relu(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().cwiseMax(0.0), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id](Tape& tp, const Mat& g) {
    Mat mask = (tp.value(ai).array() > 0.0).cast<double>();
    tp.accumulate(ai, g.cwiseProduct(mask));
  });
  return out;
}

inline Var tanh_op(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().array().tanh().matrix(), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id, oi = out.id](Tape& tp, const Mat& g) {
    const Mat& y = tp.value(oi);
    tp.accumulate(ai, (g.array() * (1.0 - y.array().square())).matrix());
  });
  return out;
}

inline Var sigmoid(Var a) {
  Tape& t = *a.tape;
  Mat y = a.val().unaryExpr([](double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
  Var out = t.push(std::move(y), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id, oi = out.id](Tape& tp, const Mat& g) {
    const Mat& y = tp.value(oi);
    tp.accumulate(ai, (g.array() * y.array() * (1.0 - y.array())).matrix());
  });
  return out;
}

inline Var exp_op(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().array().exp().matrix(), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id, oi = out.id](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g.cwiseProduct(tp.value(oi)));
  });
  return out;
}

inline Var log_op(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().array().log().matrix(), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g.cwiseQuotient(tp.value(ai)));
  });
  return out;
}

/// Elementwise 1 / x; caller guarantees nonzero entries.
inline Var reciprocal(Var a) {
  Tape& t = *a.tape;
  Var out = t.push(a.val().cwiseInverse(), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id, oi = out.id](Tape& tp, const Mat& g) {
    const Mat& y = tp.value(oi);
    tp.accumulate(ai, (-g.array() * y.array().square()).matrix());
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

inline Var total_sum(Var a) {
  Tape& t = *a.tape;
  Mat out_v(1, 1);
  out_v(0, 0) = a.val().sum();
  Var out = t.push(std::move(out_v), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id](Tape& tp, const Mat& g) {
    const Mat& v = tp.value(ai);
    tp.accumulate(ai, Mat::Constant(v.rows(), v.cols(), g(0, 0)));
  });
  return out;
}

inline Var mean_all(Var a) {
  return scale(total_sum(a), 1.0 / static_cast<double>(a.val().size()));
}

inline Var sum_rows(Var a) {  // (R, C) -> (R, 1)
  Tape& t = *a.tape;
  Var out = t.push(a.val().rowwise().sum(), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g.col(0).replicate(1, tp.value(ai).cols()));
  });
  return out;
}

inline Var sum_cols(Var a) {  // (R, C) -> (1, C)
  Tape& t = *a.tape;
  Var out = t.push(a.val().colwise().sum(), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g.row(0).replicate(tp.value(ai).rows(), 1));
  });
  return out;
}

/// Rowwise dot product of two (R, D) matrices -> (R, 1).
inline Var dot_rows(Var a, Var b) {
  detail::require_same_shape(a, b, "dot_rows");
  Tape& t = *a.tape;
  Var out = t.push(a.val().cwiseProduct(b.val()).rowwise().sum(),
                   t.needs_grad(a.id) || t.needs_grad(b.id));
  t.set_backprop(out.id, [ai = a.id, bi = b.id](Tape& tp, const Mat& g) {
    Mat gb = g.col(0).replicate(1, tp.value(ai).cols());
    tp.accumulate(ai, gb.cwiseProduct(tp.value(bi)));
    tp.accumulate(bi, gb.cwiseProduct(tp.value(ai)));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Row-structured ops

inline Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  Mat y = a.val();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    double m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  Var out = t.push(std::move(y), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id, oi = out.id](Tape& tp, const Mat& g) {
    const Mat& y = tp.value(oi);
    Mat gy = g.cwiseProduct(y);
    Vec rowsum = gy.rowwise().sum();
    tp.accumulate(ai, gy - (y.array().colwise() * rowsum.array()).matrix());
  });
  return out;
}

inline Var logsumexp_rows(Var a) {  // (R, C) -> (R, 1)
  Tape& t = *a.tape;
  const Mat& v = a.val();
  Mat out_v(v.rows(), 1);
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    double m = v.row(r).maxCoeff();
    out_v(r, 0) = m + std::log((v.row(r).array() - m).exp().sum());
  }
  Var out = t.push(std::move(out_v), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id, oi = out.id](Tape& tp, const Mat& g) {
    Mat soft = ((tp.value(ai).colwise() - tp.value(oi).col(0)).array().exp()).matrix();
    tp.accumulate(ai, (soft.array().colwise() * g.col(0).array()).matrix());
  });
  return out;
}

/// Rowwise standardisation: (x - mean) / sqrt(var + eps), biased variance.
inline Var layer_norm_rows(Var a, double eps = 1e-5) {
  Tape& t = *a.tape;
  const Mat& x = a.val();
  const double n = static_cast<double>(x.cols());
  Mat xhat(x.rows(), x.cols());
  Vec inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mu = x.row(r).mean();
    double var = (x.row(r).array() - mu).square().sum() / n;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std(r) = is;
    xhat.row(r) = ((x.row(r).array() - mu) * is).matrix();
  }
  Var out = t.push(std::move(xhat), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id, oi = out.id, inv_std](Tape& tp, const Mat& g) {
    const Mat& y = tp.value(oi);
    Mat dx(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      double gm = g.row(r).mean();
      double gym = g.row(r).cwiseProduct(y.row(r)).mean();
      dx.row(r) = (inv_std(r) * (g.row(r).array() - gm - y.row(r).array() * gym)).matrix();
    }
    tp.accumulate(ai, dx);
  });
  return out;
}

/// Rowwise L2 normalisation. Rows with norm below eps pass through as zero
/// with zero gradient.
inline Var l2_normalize_rows(Var a, double eps = 1e-12) {
  Tape& t = *a.tape;
  const Mat& x = a.val();
  Mat y(x.rows(), x.cols());
  Vec norms(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double nr = x.row(r).norm();
    norms(r) = nr;
    if (nr < eps)
      y.row(r).setZero();
    else
      y.row(r) = x.row(r) / nr;
  }
  Var out = t.push(std::move(y), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id, oi = out.id, norms, eps](Tape& tp, const Mat& g) {
    const Mat& y = tp.value(oi);
    Mat dx = Mat::Zero(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (norms(r) < eps) continue;
      double gy = g.row(r).dot(y.row(r));
      dx.row(r) = (g.row(r) - gy * y.row(r)) / norms(r);
    }
    tp.accumulate(ai, dx);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Indexing and shape ops

/// Diagonal of a square matrix as (B, 1).
inline Var diag_part(Var a) {
  if (a.rows() != a.cols()) throw DimensionError("diag_part: matrix must be square");
  Tape& t = *a.tape;
  Mat out_v = a.val().diagonal();
  Var out = t.push(std::move(out_v), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id](Tape& tp, const Mat& g) {
    const Mat& v = tp.value(ai);
    Mat dx = Mat::Zero(v.rows(), v.cols());
    dx.diagonal() = g.col(0);
    tp.accumulate(ai, dx);
  });
  return out;
}

/// Picks one entry per row: out(r, 0) = a(r, cols[r]).
inline Var gather_cols(Var a, const std::vector<int>& cols) {
  const Mat& v = a.val();
  if (static_cast<Eigen::Index>(cols.size()) != v.rows())
    throw DimensionError("gather_cols: one index per row required");
  for (int c : cols)
    if (c < 0 || c >= v.cols()) throw ValueError("gather_cols: column index out of range");
  Tape& t = *a.tape;
  Mat out_v(v.rows(), 1);
  for (Eigen::Index r = 0; r < v.rows(); ++r)
    out_v(r, 0) = v(r, cols[static_cast<std::size_t>(r)]);
  Var out = t.push(std::move(out_v), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id, cols](Tape& tp, const Mat& g) {
    const Mat& v = tp.value(ai);
    Mat dx = Mat::Zero(v.rows(), v.cols());
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      dx(r, cols[static_cast<std::size_t>(r)]) = g(r, 0);
    tp.accumulate(ai, dx);
  });
  return out;
}

inline Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows())
    throw DimensionError("slice_rows: range out of bounds");
  Tape& t = *a.tape;
  Var out = t.push(a.val().middleRows(start, count), t.needs_grad(a.id));
  t.set_backprop(out.id, [ai = a.id, start, count](Tape& tp, const Mat& g) {
    const Mat& v = tp.value(ai);
    Mat dx = Mat::Zero(v.rows(), v.cols());
    dx.middleRows(start, count) = g;
    tp.accumulate(ai, dx);
  });
  return out;
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValueError("concat_rows: no inputs");
  Tape& t = *parts.front().tape;
  Eigen::Index cols = parts.front().cols(), rows = 0;
  bool ng = false;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
    ng = ng || t.needs_grad(p.id);
  }
  Mat out_v(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> offsets;  // (node id, row offset)
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out_v.middleRows(at, p.rows()) = p.val();
    offsets.emplace_back(p.id, at);
    at += p.rows();
  }
  Var out = t.push(std::move(out_v), ng);
  t.set_backprop(out.id, [offsets](Tape& tp, const Mat& g) {
    for (auto [id, off] : offsets) tp.accumulate(id, g.middleRows(off, tp.value(id).rows()));
  });
  return out;
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValueError("concat_cols: no inputs");
  Tape& t = *parts.front().tape;
  Eigen::Index rows = parts.front().rows(), cols = 0;
  bool ng = false;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
    ng = ng || t.needs_grad(p.id);
  }
  Mat out_v(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> offsets;  // (node id, col offset)
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out_v.middleCols(at, p.cols()) = p.val();
    offsets.emplace_back(p.id, at);
    at += p.cols();
  }
  Var out = t.push(std::move(out_v), ng);
  t.set_backprop(out.id, [offsets](Tape& tp, const Mat& g) {
    for (auto [id, off] : offsets) tp.accumulate(id, g.middleCols(off, tp.value(id).cols()));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

/// Named trainable tensor plus Adam moment buffers. The buffers start at zero
/// and stay in memory; checkpoints persist only the values.
struct Param {
  std::string name;
  Mat value;
  Mat adam_m;
  Mat adam_v;
};

class ParamStore {
 public:
  int add(const std::string& name, Mat init) {
    if (index_.count(name)) throw StateError(cat("duplicate parameter: ", name));
    Param p;
    p.name = name;
    p.adam_m = Mat::Zero(init.rows(), init.cols());
    p.adam_v = Mat::Zero(init.rows(), init.cols());
    p.value = std::move(init);
    params_.push_back(std::move(p));
    int id = static_cast<int>(params_.size()) - 1;
    index_[name] = id;
    return id;
  }

  Param& at(int id) { return params_[static_cast<std::size_t>(id)]; }
  const Param& at(int id) const { return params_[static_cast<std::size_t>(id)]; }
  Param& at(const std::string& name) { return params_[static_cast<std::size_t>(id_of(name))]; }

  int id_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError(cat("unknown parameter: ", name));
    return it->second;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  std::vector<Param>& all() { return params_; }
  const std::vector<Param>& all() const { return params_; }

 private:
  std::vector<Param> params_;
  std::map<std::string, int> index_;
};

/// Records discrete routing decisions (expert sets, row selections, prototype
/// picks) on a first pass so perturbed re-evaluations can replay them. Keeps
/// piecewise-linear regions fixed during finite-difference probes.
class RoutingTrace {
 public:
  enum class Mode { Record, Replay };

  explicit RoutingTrace(Mode mode = Mode::Record) : mode_(mode) {}

  std::vector<int> choose(std::vector<int> computed) {
    if (mode_ == Mode::Record) {
      picks_.push_back(computed);
      return computed;
    }
    if (cursor_ >= picks_.size()) throw StateError("RoutingTrace: replay exhausted");
    return picks_[cursor_++];
  }

  void rewind() { cursor_ = 0; }
  void set_mode(Mode m) { mode_ = m; }
  Mode mode() const { return mode_; }
  std::size_t size() const { return picks_.size(); }

 private:
  Mode mode_;
  std::vector<std::vector<int>> picks_;
  std::size_t cursor_ = 0;
};

/// Per-forward-pass binding of parameters onto a tape. Each parameter becomes
/// a single leaf, so repeated use() calls share one node and gradients
/// accumulate there.
class ModelContext {
 public:
  ModelContext(Tape& tape, ParamStore& store, bool training)
      : tape_(&tape), store_(&store), training_(training), bound_(store.size(), Var{}) {}

  Var use(int param_id) {
    Var& slot = bound_[static_cast<std::size_t>(param_id)];
    if (!slot.valid()) slot = tape_->leaf(store_->at(param_id).value);
    return slot;
  }

  Var use(const std::string& name) { return use(store_->id_of(name)); }

  bool training() const { return training_; }
  Tape& tape() { return *tape_; }
  ParamStore& store() { return *store_; }

  RoutingTrace* trace = nullptr;
  RngStream* dropout_rng = nullptr;

  /// Gradient per bound parameter after backward(); params never bound this
  /// pass are skipped (their gradient is zero).
  std::vector<std::pair<int, Mat>> collect_grads() {
    std::vector<std::pair<int, Mat>> out;
    for (std::size_t i = 0; i < bound_.size(); ++i) {
      if (!bound_[i].valid()) continue;
      out.emplace_back(static_cast<int>(i), tape_->grad(bound_[i].id));
    }
    return out;
  }

 private:
  Tape* tape_;
  ParamStore* store_;
  bool training_;
  std::vector<Var> bound_;
};

/// Inverted dropout: identity in eval mode, mask / keep-rate in train mode.
inline Var dropout(ModelContext& ctx, Var x, double rate) {
  if (!ctx.training() || rate <= 0.0) return x;
  if (ctx.dropout_rng == nullptr) throw StateError("dropout: no rng bound in training mode");
  const double keep = 1.0 - rate;
  Mat mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      mask(i, j) = ctx.dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
  return mul_const(x, mask);
}

}  // namespace mosare::ad
