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

#include "mosare/autodiff.hpp"
#include "mosare/common.hpp"
#include "mosare/dataio.hpp"
#include "mosare/rng.hpp"

namespace mosare {

/// Six two-layer ReLU heads mapping the aggregated representation back to
/// per-modality features, one head per modality per level. With
/// `share_levels` the local heads alias the global heads' parameters.
class DecouplerSet {
 public:
  DecouplerSet(ad::ParamStore& store, const std::string& prefix, int dim, bool share_levels,
               RngStream& init_rng);

  struct Decoupled {
    std::array<ad::Var, kNumModalities> global;
    std::array<ad::Var, kNumModalities> local;
  };

  /// Batched: both aggregates are (B, D); every slot comes back (B, D).
  Decoupled decouple(ad::ModelContext& ctx, ad::Var agg_global, ad::Var agg_local) const;

  /// Single-sample path at current parameter values.
  void decouple_values(const ad::ParamStore& store, const Vec& agg_global, const Vec& agg_local,
                       std::array<Vec, kNumModalities>& rec_global,
                       std::array<Vec, kNumModalities>& rec_local) const;

 private:
  struct Head {
    int w1, b1, w2, b2;
  };
  Mat head_apply(const ad::ParamStore& store, const Head& h, const Mat& x) const;
  ad::Var head_apply(ad::ModelContext& ctx, const Head& h, ad::Var x) const;

  std::array<Head, kNumModalities> global_heads_;
  std::array<Head, kNumModalities> local_heads_;
};

/// Per-sample squared-L2 objective over both levels; slots whose include
/// flag is false contribute nothing.
double reconstruction_loss(const std::array<Vec, kNumModalities>& target_global,
                           const std::array<Vec, kNumModalities>& rec_global,
                           const std::array<Vec, kNumModalities>& target_local,
                           const std::array<Vec, kNumModalities>& rec_local,
                           const std::array<bool, kNumModalities>& include);

/// Batched mean-per-sample loss. `include_cols[m]` is a (B, 1) 0/1 column
/// choosing which samples' residuals count for modality m.
ad::Var reconstruction_loss_rows(const std::array<ad::Var, kNumModalities>& target_global,
                                 const std::array<ad::Var, kNumModalities>& rec_global,
                                 const std::array<ad::Var, kNumModalities>& target_local,
                                 const std::array<ad::Var, kNumModalities>& rec_local,
                                 const std::array<Mat, kNumModalities>& include_cols);

}  // namespace mosare
