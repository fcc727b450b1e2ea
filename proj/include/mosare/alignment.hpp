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

#ifndef MOSARE_ALIGNMENT_HPP_
#define MOSARE_ALIGNMENT_HPP_

#include <cstdint>
#include <utility>
#include <vector>

#include "mosare/autodiff.hpp"
#include "mosare/common.hpp"

namespace mosare {

// Symmetric InfoNCE between two row-aligned batches. Rows of `a` and `b` are
// embeddings; row i of `a` and row i of `b` form the positive pair. With
// `tau_multiplies` the logit for (i, j) is tau * a_i . b_j, otherwise
// a_i . b_j / tau. Averages the a->b and b->a directions. Throws ValueError
// on an empty batch; a single-row batch yields exactly zero.
ad::Var symcl_loss(ad::Var a, ad::Var b, double tau, bool tau_multiplies = true);

// Value-level mirror of symcl_loss for frozen inputs.
double symcl_loss_values(const Mat& a, const Mat& b, double tau,
                         bool tau_multiplies = true);

// Mean of symcl_loss over a list of (a, b) pairs. Empty list is an error.
ad::Var symcl_total(const std::vector<std::pair<ad::Var, ad::Var>>& pairs,
                    double tau, bool tau_multiplies = true);

// Diagonal Gaussian mixture over one class. `weights` lives on the simplex,
// `means` and `vars` are (n_components, dim) with vars kept >= the floor
// supplied by the owner. An empty `means` marks the mixture uninitialized.
struct ClassGmm {
  Vec weights;
  Mat means;
  Mat vars;

  bool initialized() const { return means.size() > 0; }
  int n_components() const { return static_cast<int>(means.rows()); }
};

// Component log densities log w_m + log N(x; mu_m, diag var_m), shape
// (n_components). Computed in log space so distant points stay finite.
Vec gmm_component_log_joint(const Vec& x, const ClassGmm& gmm);

// Posterior responsibilities p(m | x); entries are nonnegative and sum to
// one within 1e-8. Throws NumericalError when every component log joint is
// non-finite, since no posterior exists in that case.
Vec gmm_posterior(const Vec& x, const ClassGmm& gmm);

// Mean per-sample log likelihood of `features` (rows) under the mixture.
double gmm_log_likelihood(const Mat& features, const ClassGmm& gmm);

// Balances exp(log_r / reg) in log space so rows sum to 1 and columns sum
// to rows / cols; reg > 1 flattens the assignments before balancing. Runs
// `iters` paired updates, then continues until the column marginals also
// match within 1e-9 (bounded), always finishing on a row update so row sums
// are exact. iters == 0 skips balancing entirely and returns the
// row-normalized posterior of log_r instead.
Mat sinkhorn_balance(const Mat& log_r, int iters, double reg = 1.0);

// Per-class prototype mixtures updated by momentum Sinkhorn-EM.
class PrototypeGmms {
 public:
  PrototypeGmms() = default;
  PrototypeGmms(int n_classes, int n_components, int dim, double var_floor);

  bool initialized() const;
  int n_classes() const { return static_cast<int>(gmms_.size()); }
  int n_components() const { return n_components_; }
  int dim() const { return dim_; }
  double var_floor() const { return var_floor_; }

  const ClassGmm& gmm(int label) const;
  ClassGmm& gmm_mutable(int label);

  // Seeds each class mixture with k-means centers over that class's rows,
  // uniform weights, and unit variances. Classes with fewer rows than
  // components replicate rows as centers; classes with no rows stay
  // uninitialized until data for them arrives.
  void initialize(const std::vector<Mat>& per_class_features, std::uint64_t seed);

  // One EM step per class present in the batch: balanced responsibilities
  // (plain posteriors when sinkhorn_iters == 0), batch-optimal parameters,
  // then new = momentum * old + (1 - momentum) * batch. Classes absent from
  // the batch are left untouched.
  void update(const Mat& features, const std::vector<int>& labels,
              double momentum, int sinkhorn_iters, double sinkhorn_reg = 1.0);

  // Index of the component with the highest posterior for x under the
  // mixture of `label`.
  int argmax_component(const Vec& x, int label) const;

 private:
  std::vector<ClassGmm> gmms_;
  int n_components_ = 0;
  int dim_ = 0;
  double var_floor_ = 1e-6;
};

// Prototype contrast for one sample: the positive is the argmax-posterior
// component mean of the sample's own class, and each other class contributes
// its argmax-posterior mean as one negative. Logits are dot products divided
// by tau. Prototypes are constants; only x carries gradient.
double mcl_loss(const Vec& x, int label, const PrototypeGmms& gmms, double tau);

// Batched tape version of mcl_loss, averaged over rows of x. Component picks
// run through ctx.trace when set so finite-difference probes see a frozen
// selection. Throws StateError when the mixtures have not been initialized;
// they are fit from features collected during warm-up epochs.
ad::Var mcl_loss_rows(ad::ModelContext& ctx, ad::Var x, const std::vector<int>& labels,
                      const PrototypeGmms& gmms, double tau);

}  // namespace mosare

#endif  // MOSARE_ALIGNMENT_HPP_
