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

#include "mosare/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mosare {
namespace {

Vec softmax_vec(const Vec& s) {
  Vec e = (s.array() - s.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace

Vec cma_pair(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw DimensionError("cma_pair: vector length mismatch");
  return a + a.dot(b) * b;
}

CmaVectors cma_global(const std::array<Vec, kNumModalities>& globals) {
  CmaVectors out;
  for (int m = 0; m < kNumModalities; ++m) {
    const int o1 = (m + 1) % kNumModalities;
    const int o2 = (m + 2) % kNumModalities;
    out.per_modality[m] =
        0.5 * (cma_pair(globals[m], globals[o1]) + cma_pair(globals[m], globals[o2]));
  }
  out.agg = out.per_modality[0] + out.per_modality[1] + out.per_modality[2];
  return out;
}

ad::Var cma_pair_rows(ad::Var a, ad::Var b) {
  return ad::add(a, ad::mul_colvec(b, ad::dot_rows(a, b)));
}

CmaRows cma_rows(const std::array<ad::Var, kNumModalities>& globals) {
  CmaRows out;
  for (int m = 0; m < kNumModalities; ++m) {
    const int o1 = (m + 1) % kNumModalities;
    const int o2 = (m + 2) % kNumModalities;
    out.per_modality[m] = ad::scale(
        ad::add(cma_pair_rows(globals[m], globals[o1]), cma_pair_rows(globals[m], globals[o2])),
        0.5);
  }
  out.agg = ad::add(ad::add(out.per_modality[0], out.per_modality[1]), out.per_modality[2]);
  return out;
}

std::vector<int> top_k_indices(const Vec& scores, int k) {
  if (k < 0 || k > scores.size()) throw ValueError("top_k_indices: k out of range");
  std::vector<int> idx(static_cast<std::size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores(a) > scores(b); });
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

GateDecision route_gate(const Vec& gate_probs, int top_k, bool renormalize) {
  GateDecision d;
  d.picks = top_k_indices(gate_probs, top_k);
  d.weights.resize(static_cast<Eigen::Index>(d.picks.size()));
  double total = 0.0;
  for (std::size_t i = 0; i < d.picks.size(); ++i) {
    d.weights(static_cast<Eigen::Index>(i)) = gate_probs(d.picks[i]);
    total += gate_probs(d.picks[i]);
  }
  if (renormalize && total > 0.0) d.weights /= total;
  return d;
}

// ---------------------------------------------------------------------------
// ExpertBank

ExpertBank::ExpertBank(ad::ParamStore& store, const std::string& prefix, int in_dim, int out_dim,
                       int n_experts, int top_k, bool renormalize, RngStream& init_rng)
    : in_dim_(in_dim),
      out_dim_(out_dim),
      n_experts_(n_experts),
      top_k_(top_k),
      renormalize_(renormalize) {
  if (n_experts < 1) throw ConfigError("ExpertBank: need at least one expert");
  if (top_k < 1 || top_k > n_experts) throw ConfigError("ExpertBank: top_k out of range");
  const double sg = 1.0 / std::sqrt(static_cast<double>(in_dim));
  const double sh = 1.0 / std::sqrt(static_cast<double>(out_dim));
  gate_w_ = store.add(prefix + ".gate.w", init_rng.normal_matrix(in_dim, n_experts, sg));
  gate_b_ = store.add(prefix + ".gate.b", Mat::Zero(1, n_experts));
  experts_.reserve(static_cast<std::size_t>(n_experts));
  for (int e = 0; e < n_experts; ++e) {
    std::string base = cat(prefix, ".exp", e);
    experts_.push_back({
        store.add(base + ".w1", init_rng.normal_matrix(in_dim, out_dim, sg)),
        store.add(base + ".b1", Mat::Zero(1, out_dim)),
        store.add(base + ".w2", init_rng.normal_matrix(out_dim, out_dim, sh)),
        store.add(base + ".b2", Mat::Zero(1, out_dim)),
    });
  }
}

ExpertBank::Routed ExpertBank::route(ad::ModelContext& ctx, ad::Var tokens) const {
  if (tokens.cols() != in_dim_) throw DimensionError("ExpertBank: token dim mismatch");
  const Eigen::Index t_count = tokens.rows();
  ad::Var gate = ad::softmax_rows(ad::affine(tokens, ctx.use(gate_w_), ctx.use(gate_b_)));

  Routed routed;
  routed.gate_probs = gate.val();
  Mat keep_mask = Mat::Zero(t_count, n_experts_);
  routed.decisions.reserve(static_cast<std::size_t>(t_count));
  for (Eigen::Index t = 0; t < t_count; ++t) {
    Vec row = routed.gate_probs.row(t).transpose();
    std::vector<int> picks = top_k_indices(row, top_k_);
    if (ctx.trace != nullptr) picks = ctx.trace->choose(picks);
    GateDecision d;
    d.picks = picks;
    d.weights.resize(static_cast<Eigen::Index>(picks.size()));
    double total = 0.0;
    for (std::size_t i = 0; i < picks.size(); ++i) {
      keep_mask(t, picks[i]) = 1.0;
      d.weights(static_cast<Eigen::Index>(i)) = row(picks[i]);
      total += row(picks[i]);
    }
    if (renormalize_ && total > 0.0) d.weights /= total;
    routed.decisions.push_back(std::move(d));
  }

  ad::Var kept = ad::mul_const(gate, keep_mask);
  ad::Var weights = kept;
  if (renormalize_) weights = ad::mul_colvec(kept, ad::reciprocal(ad::sum_rows(kept)));

  ad::Var out{};
  for (int e = 0; e < n_experts_; ++e) {
    const Expert& ex = experts_[static_cast<std::size_t>(e)];
    ad::Var h = ad::relu(ad::affine(tokens, ctx.use(ex.w1), ctx.use(ex.b1)));
    ad::Var y = ad::affine(h, ctx.use(ex.w2), ctx.use(ex.b2));
    Mat pick_col = Mat::Zero(n_experts_, 1);
    pick_col(e, 0) = 1.0;
    ad::Var w_e = ad::matmul(weights, ctx.tape().constant(pick_col));  // (T, 1)
    ad::Var term = ad::mul_colvec(y, w_e);
    out = out.valid() ? ad::add(out, term) : term;
  }
  routed.out = out;
  return routed;
}

Vec ExpertBank::transform_values(const ad::ParamStore& store, const Vec& x,
                                 GateDecision* decision) const {
  if (x.size() != in_dim_) throw DimensionError("ExpertBank: input dim mismatch");
  Vec logits = store.at(gate_w_).value.transpose() * x +
               store.at(gate_b_).value.row(0).transpose();
  GateDecision d = route_gate(softmax_vec(logits), top_k_, renormalize_);
  Vec out = Vec::Zero(out_dim_);
  for (std::size_t i = 0; i < d.picks.size(); ++i) {
    const Expert& ex = experts_[static_cast<std::size_t>(d.picks[i])];
    Vec h = (store.at(ex.w1).value.transpose() * x +
             store.at(ex.b1).value.row(0).transpose())
                .cwiseMax(0.0);
    Vec y = store.at(ex.w2).value.transpose() * h + store.at(ex.b2).value.row(0).transpose();
    out += d.weights(static_cast<Eigen::Index>(i)) * y;
  }
  if (decision != nullptr) *decision = std::move(d);
  return out;
}

// ---------------------------------------------------------------------------
// LocalSelector

LocalSelector::LocalSelector(ad::ParamStore& store, const std::string& prefix, int dim,
                             RngStream& init_rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  w_id_ = store.add(prefix + ".act.w", init_rng.normal_matrix(dim, 1, s));
  b_id_ = store.add(prefix + ".act.b", Mat::Zero(1, 1));
}

Vec LocalSelector::scores_values(const ad::ParamStore& store, const Mat& z) const {
  return ((z * store.at(w_id_).value).col(0).array() + store.at(b_id_).value(0, 0)).matrix();
}

LocalSelector::Selection LocalSelector::select_blocks(ad::ModelContext& ctx, ad::Var z,
                                                      int block_size, int k_loc) const {
  if (block_size < 1 || z.rows() % block_size != 0) {
    throw DimensionError("select_blocks: rows must tile into blocks");
  }
  if (k_loc > block_size) throw ConfigError("select_blocks: k_loc exceeds rows per sample");
  const Eigen::Index n_blocks = z.rows() / block_size;

  Vec scores = scores_values(ctx.store(), z.val());
  Mat pool = Mat::Zero(n_blocks, z.rows());
  Mat row_mask = Mat::Zero(z.rows(), z.cols());
  Selection sel;
  sel.picks.reserve(static_cast<std::size_t>(n_blocks));
  for (Eigen::Index b = 0; b < n_blocks; ++b) {
    Vec block_scores = scores.segment(b * block_size, block_size);
    std::vector<int> picks = top_k_indices(block_scores, k_loc);
    if (ctx.trace != nullptr) picks = ctx.trace->choose(picks);
    for (int j : picks) {
      const Eigen::Index row = b * block_size + j;
      pool(b, row) = 1.0 / static_cast<double>(k_loc);
      row_mask.row(row).setOnes();
    }
    sel.picks.push_back(std::move(picks));
  }
  sel.selected_mean = ad::matmul_const_left(pool, z);
  sel.masked = ad::mul_const(z, row_mask);
  return sel;
}

Mat select_local(const ad::ParamStore& store, const Mat& locals, const LocalSelector& selector,
                 const ExpertBank& bank, int k_loc, std::vector<int>* picked) {
  if (k_loc > locals.rows()) throw ConfigError("select_local: k_loc exceeds row count");
  Mat z(locals.rows(), locals.cols());
  for (Eigen::Index j = 0; j < locals.rows(); ++j) {
    z.row(j) = bank.transform_values(store, locals.row(j).transpose()).transpose();
  }
  std::vector<int> picks = top_k_indices(selector.scores_values(store, z), k_loc);
  Mat out = Mat::Zero(z.rows(), z.cols());
  for (int j : picks) out.row(j) = z.row(j);
  if (picked != nullptr) *picked = picks;
  return out;
}

}  // namespace mosare
