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

#include "mosare/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mosare/encoders.hpp"
#include "mosare/rng.hpp"

namespace mosare {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;
// Responsibility mass below which a component keeps its previous parameters.
constexpr double kEmptyComponentMass = 1e-10;
// Extra Sinkhorn pairs allowed while driving column marginals to kSinkhornTol.
constexpr int kSinkhornExtraIters = 1000;
constexpr double kSinkhornTol = 1e-9;

double logsumexp(const Vec& v) {
  double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((v.array() - mx).exp().sum());
}

void check_pair_shape(Eigen::Index ar, Eigen::Index ac, Eigen::Index br,
                      Eigen::Index bc) {
  if (ar == 0) throw ValueError("symcl_loss: empty batch");
  if (ar != br || ac != bc)
    throw DimensionError("symcl_loss: batches must have identical shape, got " +
                         std::to_string(ar) + "x" + std::to_string(ac) + " vs " +
                         std::to_string(br) + "x" + std::to_string(bc));
}

}  // namespace

ad::Var symcl_loss(ad::Var a, ad::Var b, double tau, bool tau_multiplies) {
  check_pair_shape(a.rows(), a.cols(), b.rows(), b.cols());
  const double f = tau_multiplies ? tau : 1.0 / tau;
  const double m = static_cast<double>(a.rows());
  ad::Var s = ad::scale(ad::matmul_nt(a, b), f);
  ad::Var st = ad::transpose(s);
  ad::Var row_term = ad::sub(ad::logsumexp_rows(s), ad::diag_part(s));
  ad::Var col_term = ad::sub(ad::logsumexp_rows(st), ad::diag_part(st));
  ad::Var total = ad::add(ad::total_sum(row_term), ad::total_sum(col_term));
  return ad::scale(total, 1.0 / (2.0 * m));
}

double symcl_loss_values(const Mat& a, const Mat& b, double tau,
                         bool tau_multiplies) {
  check_pair_shape(a.rows(), a.cols(), b.rows(), b.cols());
  const double f = tau_multiplies ? tau : 1.0 / tau;
  const Eigen::Index m = a.rows();
  Mat s = f * (a * b.transpose());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    acc += logsumexp(s.row(i).transpose()) - s(i, i);
    acc += logsumexp(s.col(i)) - s(i, i);
  }
  return acc / (2.0 * static_cast<double>(m));
}

ad::Var symcl_total(const std::vector<std::pair<ad::Var, ad::Var>>& pairs,
                    double tau, bool tau_multiplies) {
  if (pairs.empty()) throw ValueError("symcl_total: no pairs given");
  ad::Var acc;
  for (const auto& [a, b] : pairs) {
    ad::Var term = symcl_loss(a, b, tau, tau_multiplies);
    acc = acc.valid() ? ad::add(acc, term) : term;
  }
  return ad::scale(acc, 1.0 / static_cast<double>(pairs.size()));
}

Vec gmm_component_log_joint(const Vec& x, const ClassGmm& gmm) {
  if (!gmm.initialized()) throw StateError("gmm_component_log_joint: mixture has no parameters");
  if (x.size() != gmm.means.cols())
    throw DimensionError("gmm_component_log_joint: feature dim " +
                         std::to_string(x.size()) + " vs mixture dim " +
                         std::to_string(gmm.means.cols()));
  const int m = gmm.n_components();
  Vec out(m);
  for (int k = 0; k < m; ++k) {
    Vec diff = x - gmm.means.row(k).transpose();
    Vec var = gmm.vars.row(k).transpose();
    double quad = (diff.array().square() / var.array()).sum();
    double logdet = var.array().log().sum();
    out(k) = std::log(gmm.weights(k)) -
             0.5 * (static_cast<double>(x.size()) * kLog2Pi + logdet + quad);
  }
  return out;
}

Vec gmm_posterior(const Vec& x, const ClassGmm& gmm) {
  Vec lj = gmm_component_log_joint(x, gmm);
  double mx = lj.maxCoeff();
  if (!std::isfinite(mx))
    throw NumericalError("gmm_posterior: no component has finite density at this point");
  Vec shifted = (lj.array() - mx).exp();
  return shifted / shifted.sum();
}

double gmm_log_likelihood(const Mat& features, const ClassGmm& gmm) {
  if (features.rows() == 0) throw ValueError("gmm_log_likelihood: empty feature set");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < features.rows(); ++i)
    acc += logsumexp(gmm_component_log_joint(features.row(i).transpose(), gmm));
  return acc / static_cast<double>(features.rows());
}

Mat sinkhorn_balance(const Mat& log_r, int iters, double reg) {
  const Eigen::Index n = log_r.rows();
  const Eigen::Index m = log_r.cols();
  if (n == 0 || m == 0) throw ValueError("sinkhorn_balance: empty responsibility matrix");
  if (reg <= 0.0) throw ConfigError("sinkhorn_balance: regularization must be positive");
  if (!all_finite(log_r))
    throw NumericalError("sinkhorn_balance: non-finite log responsibilities");

  Mat out(n, m);
  if (iters <= 0) {
    for (Eigen::Index i = 0; i < n; ++i) {
      Vec row = log_r.row(i).transpose();
      Vec p = (row.array() - logsumexp(row)).exp();
      out.row(i) = (p / p.sum()).transpose();
    }
    return out;
  }
  Mat log_k = log_r / reg;

  const double log_col_target =
      std::log(static_cast<double>(n) / static_cast<double>(m));
  const double col_target = static_cast<double>(n) / static_cast<double>(m);
  Vec log_u = Vec::Zero(n);
  Vec log_v = Vec::Zero(m);

  auto pair_update = [&]() {
    for (Eigen::Index j = 0; j < m; ++j)
      log_v(j) = log_col_target - logsumexp(log_k.col(j) + log_u);
    for (Eigen::Index i = 0; i < n; ++i)
      log_u(i) = -logsumexp(log_k.row(i).transpose() + log_v);
  };
  auto realize = [&]() {
    for (Eigen::Index i = 0; i < n; ++i)
      out.row(i) = (log_k.row(i).transpose() + log_v).array() + log_u(i);
    out = out.array().exp();
  };

  for (int it = 0; it < iters; ++it) pair_update();
  // Rows are exact after ending on a row update; polish until columns match.
  for (int extra = 0; extra < kSinkhornExtraIters; ++extra) {
    realize();
    double err = (out.colwise().sum().transpose().array() - col_target).abs().maxCoeff();
    if (err <= kSinkhornTol * std::max(1.0, col_target)) return out;
    pair_update();
  }
  realize();
  if (!all_finite(out))
    throw NumericalError("sinkhorn_balance: balancing diverged");
  return out;
}

PrototypeGmms::PrototypeGmms(int n_classes, int n_components, int dim, double var_floor)
    : gmms_(static_cast<std::size_t>(n_classes)),
      n_components_(n_components),
      dim_(dim),
      var_floor_(var_floor) {
  if (n_classes <= 0 || n_components <= 0 || dim <= 0)
    throw ConfigError("PrototypeGmms: class count, component count, and dim must be positive");
  if (var_floor <= 0.0) throw ConfigError("PrototypeGmms: variance floor must be positive");
}

bool PrototypeGmms::initialized() const {
  if (gmms_.empty()) return false;
  for (const ClassGmm& g : gmms_)
    if (!g.initialized()) return false;
  return true;
}

const ClassGmm& PrototypeGmms::gmm(int label) const {
  if (label < 0 || label >= n_classes())
    throw ValueError("PrototypeGmms: label " + std::to_string(label) + " out of range");
  return gmms_[static_cast<std::size_t>(label)];
}

ClassGmm& PrototypeGmms::gmm_mutable(int label) {
  if (label < 0 || label >= n_classes())
    throw ValueError("PrototypeGmms: label " + std::to_string(label) + " out of range");
  return gmms_[static_cast<std::size_t>(label)];
}

void PrototypeGmms::initialize(const std::vector<Mat>& per_class_features,
                               std::uint64_t seed) {
  if (static_cast<int>(per_class_features.size()) != n_classes())
    throw DimensionError("PrototypeGmms::initialize: need one feature block per class");
  for (int c = 0; c < n_classes(); ++c) {
    const Mat& rows = per_class_features[static_cast<std::size_t>(c)];
    if (rows.rows() == 0) continue;
    if (rows.cols() != dim_)
      throw DimensionError("PrototypeGmms::initialize: class " + std::to_string(c) +
                           " features have dim " + std::to_string(rows.cols()) +
                           ", expected " + std::to_string(dim_));
    ClassGmm& g = gmms_[static_cast<std::size_t>(c)];
    if (rows.rows() < n_components_) {
      // Too few rows to support k-means; replicate them cyclically. Ties in
      // the resulting posteriors resolve to the lowest component index.
      g.means.resize(n_components_, dim_);
      for (int k = 0; k < n_components_; ++k) g.means.row(k) = rows.row(k % rows.rows());
    } else {
      g.means = fit_corpus_kmeans(
          rows, n_components_,
          RngStream::derive_seed(seed, "proto_class_" + std::to_string(c)));
    }
    g.vars = Mat::Constant(n_components_, dim_, std::max(1.0, var_floor_));
    g.weights = Vec::Constant(n_components_, 1.0 / static_cast<double>(n_components_));
  }
}

void PrototypeGmms::update(const Mat& features, const std::vector<int>& labels,
                           double momentum, int sinkhorn_iters, double sinkhorn_reg) {
  if (features.rows() != static_cast<Eigen::Index>(labels.size()))
    throw DimensionError("PrototypeGmms::update: one label per feature row required");
  if (momentum < 0.0 || momentum > 1.0)
    throw ConfigError("PrototypeGmms::update: momentum must lie in [0, 1]");

  for (int c = 0; c < n_classes(); ++c) {
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) idx.push_back(static_cast<Eigen::Index>(i));
    if (idx.empty()) continue;

    ClassGmm& g = gmms_[static_cast<std::size_t>(c)];
    if (!g.initialized())
      throw StateError("PrototypeGmms::update: class " + std::to_string(c) +
                       " mixture is uninitialized; call initialize() after warm-up");

    const Eigen::Index nc = static_cast<Eigen::Index>(idx.size());
    Mat x(nc, features.cols());
    for (Eigen::Index r = 0; r < nc; ++r) x.row(r) = features.row(idx[static_cast<std::size_t>(r)]);

    Mat log_r(nc, n_components_);
    for (Eigen::Index r = 0; r < nc; ++r)
      log_r.row(r) = gmm_component_log_joint(x.row(r).transpose(), g).transpose();
    Mat resp = sinkhorn_balance(log_r, sinkhorn_iters, sinkhorn_reg);

    Vec mass = resp.colwise().sum().transpose();
    Vec batch_w = mass / static_cast<double>(nc);
    Mat batch_mu = g.means;
    Mat batch_var = g.vars;
    for (int k = 0; k < n_components_; ++k) {
      if (mass(k) < kEmptyComponentMass) continue;
      Vec mu = (resp.col(k).transpose() * x).transpose() / mass(k);
      Mat centered = x.rowwise() - mu.transpose();
      Vec var = (centered.array().square().colwise() * resp.col(k).array())
                    .colwise()
                    .sum()
                    .transpose() /
                mass(k);
      batch_mu.row(k) = mu.transpose();
      batch_var.row(k) = var.cwiseMax(var_floor_).transpose();
    }

    g.weights = momentum * g.weights + (1.0 - momentum) * batch_w;
    g.weights /= g.weights.sum();
    g.means = momentum * g.means + (1.0 - momentum) * batch_mu;
    g.vars = (momentum * g.vars + (1.0 - momentum) * batch_var).cwiseMax(var_floor_);
  }
}

int PrototypeGmms::argmax_component(const Vec& x, int label) const {
  Vec lj = gmm_component_log_joint(x, gmm(label));
  if (!std::isfinite(lj.maxCoeff()))
    throw NumericalError("PrototypeGmms::argmax_component: no finite component density");
  Eigen::Index best = 0;
  lj.maxCoeff(&best);
  return static_cast<int>(best);
}

namespace {

void require_initialized_for_mcl(const PrototypeGmms& gmms) {
  if (gmms.n_classes() == 0 || !gmms.initialized())
    throw StateError(
        "mcl_loss: prototype mixtures are uninitialized; train warm-up epochs "
        "to collect features often enough to fit them first");
}

}  // namespace

double mcl_loss(const Vec& x, int label, const PrototypeGmms& gmms, double tau) {
  require_initialized_for_mcl(gmms);
  if (label < 0 || label >= gmms.n_classes())
    throw ValueError("mcl_loss: label " + std::to_string(label) + " out of range");
  if (tau <= 0.0) throw ConfigError("mcl_loss: tau must be positive");

  Vec logits(gmms.n_classes());
  for (int c = 0; c < gmms.n_classes(); ++c) {
    int k = gmms.argmax_component(x, c);
    logits(c) = x.dot(gmms.gmm(c).means.row(k).transpose()) / tau;
  }
  return logsumexp(logits) - logits(label);
}

ad::Var mcl_loss_rows(ad::ModelContext& ctx, ad::Var x, const std::vector<int>& labels,
                      const PrototypeGmms& gmms, double tau) {
  require_initialized_for_mcl(gmms);
  if (tau <= 0.0) throw ConfigError("mcl_loss: tau must be positive");
  const Eigen::Index b = x.rows();
  if (b == 0) throw ValueError("mcl_loss: empty batch");
  if (b != static_cast<Eigen::Index>(labels.size()))
    throw DimensionError("mcl_loss: one label per row required");

  const int nc = gmms.n_classes();
  const Mat& xv = x.val();
  std::vector<Mat> protos(static_cast<std::size_t>(nc), Mat(b, x.cols()));
  Mat onehot = Mat::Zero(b, nc);
  for (Eigen::Index i = 0; i < b; ++i) {
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= nc)
      throw ValueError("mcl_loss: label out of range at row " + std::to_string(i));
    onehot(i, labels[static_cast<std::size_t>(i)]) = 1.0;
    for (int c = 0; c < nc; ++c) {
      std::vector<int> pick{gmms.argmax_component(xv.row(i).transpose(), c)};
      if (ctx.trace) pick = ctx.trace->choose(pick);
      protos[static_cast<std::size_t>(c)].row(i) = gmms.gmm(c).means.row(pick[0]);
    }
  }

  std::vector<ad::Var> cols;
  cols.reserve(static_cast<std::size_t>(nc));
  for (int c = 0; c < nc; ++c)
    cols.push_back(ad::dot_rows(x, ctx.tape().constant(protos[static_cast<std::size_t>(c)])));
  ad::Var logits = ad::scale(ad::concat_cols(cols), 1.0 / tau);
  ad::Var picked = ad::total_sum(ad::mul(logits, ctx.tape().constant(onehot)));
  ad::Var lse = ad::total_sum(ad::logsumexp_rows(logits));
  return ad::scale(ad::sub(lse, picked), 1.0 / static_cast<double>(b));
}

}  // namespace mosare
