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

// Test-side reference implementations, written independently of the library
// code paths they check: straight-line loss transcriptions, brute-force
// metrics, and a central finite-difference probe.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "mosare/common.hpp"
#include "mosare/rng.hpp"

namespace oracle {

using mosare::Mat;
using mosare::Vec;

inline Mat rand_mat(mosare::RngStream& rng, int r, int c, double s = 1.0) {
  return rng.normal_matrix(r, c, s);
}

/// Max relative error between an analytic gradient and central finite
/// differences of `f` over every entry of `x` (modified in place, restored).
/// Denominator floored so near-zero gradients are compared absolutely.
inline double fd_max_rel_err(const std::function<double()>& f, Mat& x, const Mat& analytic,
                             double h = 1e-3, double denom_floor = 1e-2) {
  double worst = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double keep = x(r, c);
      x(r, c) = keep + h;
      const double up = f();
      x(r, c) = keep - h;
      const double down = f();
      x(r, c) = keep;
      const double fd = (up - down) / (2.0 * h);
      const double g = analytic(r, c);
      const double denom = std::max({std::abs(fd), std::abs(g), denom_floor});
      worst = std::max(worst, std::abs(fd - g) / denom);
    }
  return worst;
}

// ---------------------------------------------------------------------------
// Straight-line transcriptions of the fused-representation math. These mirror
// the definitions one term at a time with no shared code with the library.

inline Vec cma_pair_ref(const Vec& a, const Vec& b) { return a + a.dot(b) * b; }

/// Per-modality fused globals and their sum, from the three input vectors.
inline void cma_all_ref(const Vec& w, const Vec& r, const Vec& p, Vec out[3], Vec& agg) {
  out[0] = 0.5 * (cma_pair_ref(w, r) + cma_pair_ref(w, p));
  out[1] = 0.5 * (cma_pair_ref(r, w) + cma_pair_ref(r, p));
  out[2] = 0.5 * (cma_pair_ref(p, w) + cma_pair_ref(p, r));
  agg = out[0] + out[1] + out[2];
}

/// Squared-L2 reconstruction objective over present slots at both levels.
inline double reconstruction_loss_ref(const Vec target_g[3], const Vec rec_g[3],
                                      const Vec target_l[3], const Vec rec_l[3],
                                      const bool present[3]) {
  double loss = 0.0;
  for (int m = 0; m < 3; ++m) {
    if (!present[m]) continue;
    loss += (target_g[m] - rec_g[m]).squaredNorm();
    loss += (target_l[m] - rec_l[m]).squaredNorm();
  }
  return loss;
}

/// Symmetric InfoNCE with the temperature multiplying the similarity.
/// Rows of a and b are assumed unit-normalized by the caller.
inline double symcl_ref(const Mat& a, const Mat& b, double tau) {
  const Eigen::Index m = a.rows();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    double denom = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) denom += std::exp(tau * a.row(i).dot(b.row(j)));
    loss -= std::log(std::exp(tau * a.row(i).dot(b.row(i))) / denom);
  }
  for (Eigen::Index j = 0; j < m; ++j) {
    double denom = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) denom += std::exp(tau * b.row(j).dot(a.row(i)));
    loss -= std::log(std::exp(tau * b.row(j).dot(a.row(j))) / denom);
  }
  return loss / (2.0 * static_cast<double>(m));
}

/// Prototype contrastive term with the temperature dividing the similarity.
inline double mcl_ref(const Vec& x, const Vec& q_pos, const std::vector<Vec>& q_negs, double tau) {
  double denom = std::exp(x.dot(q_pos) / tau);
  for (const Vec& q : q_negs) denom += std::exp(x.dot(q) / tau);
  return -std::log(std::exp(x.dot(q_pos) / tau) / denom);
}

/// Log-density of a diagonal Gaussian.
inline double diag_gaussian_logpdf_ref(const Vec& x, const Vec& mean, const Vec& var) {
  double lp = -0.5 * static_cast<double>(x.size()) * std::log(2.0 * M_PI);
  for (Eigen::Index d = 0; d < x.size(); ++d) {
    const double diff = x(d) - mean(d);
    lp += -0.5 * std::log(var(d)) - 0.5 * diff * diff / var(d);
  }
  return lp;
}

// ---------------------------------------------------------------------------
// Brute-force metrics

/// Pairwise positive-vs-negative comparison count; ties worth half.
inline double auc_binary_ref(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[i] != 1 || labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  return wins / static_cast<double>(pairs);
}

/// Macro F1 by direct per-class tallies; absent precision/recall counts as 0.
inline double macro_f1_ref(const std::vector<int>& preds, const std::vector<int>& labels,
                           int n_classes) {
  double total = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] == c && labels[i] == c) ++tp;
      if (preds[i] == c && labels[i] != c) ++fp;
      if (preds[i] != c && labels[i] == c) ++fn;
    }
    const double denom = static_cast<double>(2 * tp + fp + fn);
    total += denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
  }
  return total / static_cast<double>(n_classes);
}

/// All permutations of {0..n-1}, for Hungarian-style matching of few items.
inline void permutations(int n, std::vector<std::vector<int>>& out) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  do {
    out.push_back(p);
  } while (std::next_permutation(p.begin(), p.end()));
}

/// Minimal total distance between matched centroid sets over all assignments.
inline double best_match_cost(const Mat& found, const Mat& truth) {
  std::vector<std::vector<int>> perms;
  permutations(static_cast<int>(truth.rows()), perms);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : perms) {
    double cost = 0.0;
    for (Eigen::Index i = 0; i < truth.rows(); ++i)
      cost = std::max(cost, (found.row(p[static_cast<std::size_t>(i)]) - truth.row(i)).norm());
    best = std::min(best, cost);
  }
  return best;
}

/// Indices of the k largest values, ties to the lowest index, by full sort.
inline std::vector<int> top_k_ref(const Vec& scores, int k) {
  std::vector<int> idx(static_cast<std::size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores(a) > scores(b); });
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace oracle
