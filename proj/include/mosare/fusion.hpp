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

#include <array>
#include <string>
#include <vector>

#include "mosare/autodiff.hpp"
#include "mosare/common.hpp"
#include "mosare/dataio.hpp"
#include "mosare/rng.hpp"

namespace mosare {

/// Residual cross-attention between two vectors: a + (a . b) b.
Vec cma_pair(const Vec& a, const Vec& b);

/// Per-modality fused vectors (mean of the two pairwise terms) and their sum.
struct CmaVectors {
  std::array<Vec, kNumModalities> per_modality;
  Vec agg;
};
CmaVectors cma_global(const std::array<Vec, kNumModalities>& globals);

/// Batched counterparts over row-aligned matrices.
ad::Var cma_pair_rows(ad::Var a, ad::Var b);
struct CmaRows {
  std::array<ad::Var, kNumModalities> per_modality;
  ad::Var agg;
};
CmaRows cma_rows(const std::array<ad::Var, kNumModalities>& globals);

/// Indices of the k largest entries, ties to the lowest index, returned
/// in ascending index order.
std::vector<int> top_k_indices(const Vec& scores, int k);

/// Top-k gate routing on a softmax row: which experts fire and with what
/// weights (renormalized to sum 1, or the raw gate values).
struct GateDecision {
  std::vector<int> picks;  // ascending
  Vec weights;             // aligned with picks
};
GateDecision route_gate(const Vec& gate_probs, int top_k, bool renormalize);

/// Sparse mixture of two-layer ReLU experts with a softmax gate.
class ExpertBank {
 public:
  ExpertBank(ad::ParamStore& store, const std::string& prefix, int in_dim, int out_dim,
             int n_experts, int top_k, bool renormalize, RngStream& init_rng);

  struct Routed {
    ad::Var out;                          // (T, out_dim)
    std::vector<GateDecision> decisions;  // per token, at the evaluation point
    Mat gate_probs;                       // (T, n_experts) pre-top-k softmax values
  };

  /// Routes every row of `tokens`; discrete picks go through ctx.trace when
  /// bound so perturbed replays stay inside the same linear region.
  Routed route(ad::ModelContext& ctx, ad::Var tokens) const;

  /// Single-vector transform at current parameter values.
  Vec transform_values(const ad::ParamStore& store, const Vec& x,
                       GateDecision* decision = nullptr) const;

  int n_experts() const { return n_experts_; }
  int top_k() const { return top_k_; }

 private:
  struct Expert {
    int w1, b1, w2, b2;
  };
  int in_dim_, out_dim_, n_experts_, top_k_;
  bool renormalize_;
  int gate_w_, gate_b_;
  std::vector<Expert> experts_;
};

/// Scores transformed local rows with a single affine map and keeps the
/// top k_loc per sample. The hard 0/1 mask follows the selection equation
/// as written, so the scorer's parameters receive no gradient.
class LocalSelector {
 public:
  LocalSelector(ad::ParamStore& store, const std::string& prefix, int dim, RngStream& init_rng);

  Vec scores_values(const ad::ParamStore& store, const Mat& z) const;

  struct Selection {
    ad::Var selected_mean;               // (n_blocks, dim) mean of kept rows
    ad::Var masked;                      // (T, dim) with unkept rows zeroed
    std::vector<std::vector<int>> picks; // per block, ascending, block-relative
  };

  /// `z` holds n_blocks consecutive blocks of `block_size` rows each.
  Selection select_blocks(ad::ModelContext& ctx, ad::Var z, int block_size, int k_loc) const;

 private:
  int w_id_, b_id_;
};

/// Single-sample selection at current values: rows transformed by `bank`,
/// scored, top k_loc kept, the rest zeroed.
Mat select_local(const ad::ParamStore& store, const Mat& locals, const LocalSelector& selector,
                 const ExpertBank& bank, int k_loc, std::vector<int>* picked = nullptr);

}  // namespace mosare
