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

#include "mosare/reconstruction.hpp"

#include <cmath>

namespace mosare {

DecouplerSet::DecouplerSet(ad::ParamStore& store, const std::string& prefix, int dim,
                           bool share_levels, RngStream& init_rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  auto make_head = [&](const std::string& base) {
    return Head{
        store.add(base + ".w1", init_rng.normal_matrix(dim, dim, s)),
        store.add(base + ".b1", Mat::Zero(1, dim)),
        store.add(base + ".w2", init_rng.normal_matrix(dim, dim, s)),
        store.add(base + ".b2", Mat::Zero(1, dim)),
    };
  };
  for (int m = 0; m < kNumModalities; ++m) {
    const char* name = modality_name(m);
    global_heads_[static_cast<std::size_t>(m)] = make_head(cat(prefix, ".g.", name));
    local_heads_[static_cast<std::size_t>(m)] =
        share_levels ? global_heads_[static_cast<std::size_t>(m)]
                     : make_head(cat(prefix, ".l.", name));
  }
}

Mat DecouplerSet::head_apply(const ad::ParamStore& store, const Head& h, const Mat& x) const {
  Mat hidden = ((x * store.at(h.w1).value).rowwise() + store.at(h.b1).value.row(0)).cwiseMax(0.0);
  return (hidden * store.at(h.w2).value).rowwise() + store.at(h.b2).value.row(0);
}

ad::Var DecouplerSet::head_apply(ad::ModelContext& ctx, const Head& h, ad::Var x) const {
  ad::Var hidden = ad::relu(ad::affine(x, ctx.use(h.w1), ctx.use(h.b1)));
  return ad::affine(hidden, ctx.use(h.w2), ctx.use(h.b2));
}

DecouplerSet::Decoupled DecouplerSet::decouple(ad::ModelContext& ctx, ad::Var agg_global,
                                               ad::Var agg_local) const {
  Decoupled out;
  for (int m = 0; m < kNumModalities; ++m) {
    out.global[m] = head_apply(ctx, global_heads_[static_cast<std::size_t>(m)], agg_global);
    out.local[m] = head_apply(ctx, local_heads_[static_cast<std::size_t>(m)], agg_local);
  }
  return out;
}

void DecouplerSet::decouple_values(const ad::ParamStore& store, const Vec& agg_global,
                                   const Vec& agg_local,
                                   std::array<Vec, kNumModalities>& rec_global,
                                   std::array<Vec, kNumModalities>& rec_local) const {
  for (int m = 0; m < kNumModalities; ++m) {
    rec_global[m] = head_apply(store, global_heads_[static_cast<std::size_t>(m)],
                               agg_global.transpose())
                        .row(0)
                        .transpose();
    rec_local[m] =
        head_apply(store, local_heads_[static_cast<std::size_t>(m)], agg_local.transpose())
            .row(0)
            .transpose();
  }
}

double reconstruction_loss(const std::array<Vec, kNumModalities>& target_global,
                           const std::array<Vec, kNumModalities>& rec_global,
                           const std::array<Vec, kNumModalities>& target_local,
                           const std::array<Vec, kNumModalities>& rec_local,
                           const std::array<bool, kNumModalities>& include) {
  double loss = 0.0;
  for (int m = 0; m < kNumModalities; ++m) {
    if (!include[m]) continue;
    loss += (target_global[m] - rec_global[m]).squaredNorm();
    loss += (target_local[m] - rec_local[m]).squaredNorm();
  }
  return loss;
}

ad::Var reconstruction_loss_rows(const std::array<ad::Var, kNumModalities>& target_global,
                                 const std::array<ad::Var, kNumModalities>& rec_global,
                                 const std::array<ad::Var, kNumModalities>& target_local,
                                 const std::array<ad::Var, kNumModalities>& rec_local,
                                 const std::array<Mat, kNumModalities>& include_cols) {
  ad::Var total{};
  const double inv_b = 1.0 / static_cast<double>(target_global[0].rows());
  for (int m = 0; m < kNumModalities; ++m) {
    Mat mask = include_cols[m].replicate(1, target_global[m].cols());
    ad::Var rg = ad::mul_const(ad::sub(target_global[m], rec_global[m]), mask);
    ad::Var rl = ad::mul_const(ad::sub(target_local[m], rec_local[m]), mask);
    ad::Var term = ad::add(ad::total_sum(ad::mul(rg, rg)), ad::total_sum(ad::mul(rl, rl)));
    total = total.valid() ? ad::add(total, term) : term;
  }
  return ad::scale(total, inv_b);
}

}  // namespace mosare
