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

#include "mosare/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mosare {
namespace {

constexpr double kZeroRowEps = 1e-12;
constexpr double kEmptyComponentMass = 1e-10;
constexpr double kLog2Pi = 1.8378770664093453;

double stable_sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Softmax of a vector of scores, shifted by the max for stability.
Vec softmax_vec(const Vec& s) {
  Vec e = (s.array() - s.maxCoeff()).exp();
  return e / e.sum();
}

void normalize_vec_inplace(Vec& v) {
  double n = v.norm();
  if (n > kZeroRowEps) v /= n;
}

Mat layer_norm_values(const Mat& x, double eps = 1e-5) {
  Mat out(x.rows(), x.cols());
  const double inv_d = 1.0 / static_cast<double>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mean = x.row(i).mean();
    double var = (x.row(i).array() - mean).square().sum() * inv_d;
    out.row(i) = (x.row(i).array() - mean) / std::sqrt(var + eps);
  }
  return out;
}

}  // namespace

void normalize_rows_inplace(Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    double n = m.row(i).norm();
    if (n > kZeroRowEps) m.row(i) /= n;
  }
}

// ---------------------------------------------------------------------------
// AbmilPooler

AbmilPooler::AbmilPooler(ad::ParamStore& store, const std::string& prefix, int dim, int d_attn,
                         RngStream& init_rng) {
  if (dim < 1 || d_attn < 1) throw ConfigError("AbmilPooler: dims must be positive");
  const double sv = 1.0 / std::sqrt(static_cast<double>(dim));
  const double sw = 1.0 / std::sqrt(static_cast<double>(d_attn));
  v_id_ = store.add(prefix + ".V", init_rng.normal_matrix(dim, d_attn, sv));
  u_id_ = store.add(prefix + ".U", init_rng.normal_matrix(dim, d_attn, sv));
  w_id_ = store.add(prefix + ".w", init_rng.normal_matrix(d_attn, 1, sw));
}

ad::Var AbmilPooler::pool(ad::ModelContext& ctx, ad::Var instances, ad::Var* weights_out) const {
  if (instances.rows() < 1) throw ValueError("abmil_pool: empty bag");
  ad::Var v = ctx.use(v_id_);
  ad::Var u = ctx.use(u_id_);
  ad::Var w = ctx.use(w_id_);
  ad::Var gate = ad::mul(ad::tanh_op(ad::matmul(instances, v)),
                         ad::sigmoid(ad::matmul(instances, u)));
  ad::Var scores = ad::matmul(gate, w);                            // (n, 1)
  ad::Var weights_row = ad::softmax_rows(ad::transpose(scores));   // (1, n)
  if (weights_out != nullptr) *weights_out = ad::transpose(weights_row);
  return ad::matmul(weights_row, instances);                       // (1, dim)
}

Vec AbmilPooler::pool_values(const ad::ParamStore& store, const Mat& instances,
                             Vec* weights_out) const {
  if (instances.rows() < 1) throw ValueError("abmil_pool: empty bag");
  const Mat& v = store.at(v_id_).value;
  const Mat& u = store.at(u_id_).value;
  const Mat& w = store.at(w_id_).value;
  if (instances.cols() != v.rows()) throw DimensionError("abmil_pool: instance dim mismatch");
  Mat gate = (instances * v).array().tanh() *
             (instances * u).unaryExpr(&stable_sigmoid).array();
  Vec weights = softmax_vec(gate * w);
  if (weights_out != nullptr) *weights_out = weights;
  return instances.transpose() * weights;
}

// ---------------------------------------------------------------------------
// Corpus k-means

Mat fit_corpus_kmeans(const Mat& points, int n_clusters, std::uint64_t seed, int max_iters) {
  const Eigen::Index n = points.rows();
  if (n_clusters < 1) throw ValueError("fit_corpus_kmeans: n_clusters must be positive");
  if (n < n_clusters) {
    throw ValueError(cat("fit_corpus_kmeans: ", n, " points for ", n_clusters, " clusters"));
  }

  // Degenerate corpora cannot support n_clusters distinct centroids.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index j = 0; j < points.cols(); ++j) {
      if (points(a, j) != points(b, j)) return points(a, j) < points(b, j);
    }
    return false;
  });
  Eigen::Index distinct = n > 0 ? 1 : 0;
  for (std::size_t i = 1; i < order.size(); ++i) {
    if ((points.row(order[i]).array() != points.row(order[i - 1]).array()).any()) ++distinct;
  }
  if (distinct < n_clusters) {
    throw ValueError(cat("fit_corpus_kmeans: only ", distinct, " distinct points for ",
                         n_clusters, " clusters"));
  }

  RngStream rng(RngStream::derive(seed, "kmeans"));
  Mat centroids(n_clusters, points.cols());

  // k-means++: first uniform, then proportional to squared distance.
  Vec d2 = Vec::Constant(n, std::numeric_limits<double>::infinity());
  Eigen::Index first = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(n)));
  centroids.row(0) = points.row(first);
  for (int c = 1; c < n_clusters; ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double d = (points.row(i) - centroids.row(c - 1)).squaredNorm();
      if (d < d2(i)) d2(i) = d;
    }
    double total = d2.sum();
    double target = rng.uniform() * total;
    Eigen::Index pick = n - 1;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      acc += d2(i);
      if (acc >= target) {
        pick = i;
        break;
      }
    }
    centroids.row(c) = points.row(pick);
  }

  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < max_iters; ++iter) {
    Eigen::Index changed = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = (points.row(i) - centroids.row(0)).squaredNorm();
      for (int c = 1; c < n_clusters; ++c) {
        double d = (points.row(i) - centroids.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assign[static_cast<std::size_t>(i)] != best) {
        assign[static_cast<std::size_t>(i)] = best;
        ++changed;
      }
    }
    if (changed == 0) break;

    Mat sums = Mat::Zero(n_clusters, points.cols());
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(n_clusters), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      int c = assign[static_cast<std::size_t>(i)];
      sums.row(c) += points.row(i);
      ++counts[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < n_clusters; ++c) {
      // Empty clusters keep their previous centroid.
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
      }
    }
  }
  return centroids;
}

// ---------------------------------------------------------------------------
// Per-bag diagonal GMM

LocalGmmFit fit_local_gmm(const Mat& bag, const Mat& init_means, int max_iters, double tol,
                          double var_floor) {
  const Eigen::Index n = bag.rows();
  const Eigen::Index dim = bag.cols();
  const Eigen::Index n_comp = init_means.rows();
  if (n < 1) throw ValueError("fit_local_gmm: empty bag");
  if (n_comp < 1) throw ValueError("fit_local_gmm: no components");
  if (init_means.cols() != dim) throw DimensionError("fit_local_gmm: centroid dim mismatch");

  LocalGmmFit fit;
  fit.means = init_means;
  Mat vars = Mat::Ones(n_comp, dim);
  Vec weights = Vec::Constant(n_comp, 1.0 / static_cast<double>(n_comp));

  double prev_ll = 0.0;
  Mat logp(n, n_comp);
  for (int iter = 0; iter < max_iters; ++iter) {
    for (Eigen::Index k = 0; k < n_comp; ++k) {
      double log_norm = -0.5 * (kLog2Pi * static_cast<double>(dim) +
                                vars.row(k).array().log().sum());
      for (Eigen::Index i = 0; i < n; ++i) {
        double quad = ((bag.row(i) - fit.means.row(k)).array().square() /
                       vars.row(k).array()).sum();
        logp(i, k) = std::log(weights(k)) + log_norm - 0.5 * quad;
      }
    }

    Vec row_lse(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = logp.row(i).maxCoeff();
      row_lse(i) = mx + std::log((logp.row(i).array() - mx).exp().sum());
    }
    double ll = row_lse.sum();
    if (!std::isfinite(ll)) {
      throw NumericalError(cat("fit_local_gmm: non-finite log-likelihood at iteration ", iter));
    }
    fit.log_likelihoods.push_back(ll);
    if (iter > 0 && std::abs(ll - prev_ll) / std::max(1.0, std::abs(prev_ll)) < tol) break;
    prev_ll = ll;

    Mat resp = (logp.colwise() - row_lse).array().exp();
    Vec mass = resp.colwise().sum().transpose();
    for (Eigen::Index k = 0; k < n_comp; ++k) {
      // Components without responsibility mass keep their initialization.
      if (mass(k) < kEmptyComponentMass) continue;
      weights(k) = mass(k) / static_cast<double>(n);
      fit.means.row(k) = (resp.col(k).transpose() * bag) / mass(k);
      Vec acc = Vec::Zero(dim);
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += resp(i, k) * (bag.row(i) - fit.means.row(k)).array().square().matrix().transpose();
      }
      vars.row(k) = (acc / mass(k)).cwiseMax(var_floor).transpose();
    }
    weights /= weights.sum();
  }
  return fit;
}

// ---------------------------------------------------------------------------
// GlobalMlp

GlobalMlp::GlobalMlp(ad::ParamStore& store, const std::string& prefix, int in_dim, int out_dim,
                     double dropout, RngStream& init_rng)
    : dropout_(dropout) {
  if (in_dim < 1 || out_dim < 1) throw ConfigError("GlobalMlp: dims must be positive");
  int d_in = in_dim;
  for (int i = 0; i < 3; ++i) {
    std::string base = cat(prefix, ".l", i);
    const double sw = 1.0 / std::sqrt(static_cast<double>(d_in));
    layers_[static_cast<std::size_t>(i)] = {
        store.add(base + ".w", init_rng.normal_matrix(d_in, out_dim, sw)),
        store.add(base + ".b", Mat::Zero(1, out_dim)),
        store.add(base + ".gain", Mat::Ones(1, out_dim)),
        store.add(base + ".bias", Mat::Zero(1, out_dim)),
    };
    d_in = out_dim;
  }
}

ad::Var GlobalMlp::forward(ad::ModelContext& ctx, ad::Var x) const {
  ad::Var h = x;
  for (const Layer& l : layers_) {
    h = ad::affine(h, ctx.use(l.w), ctx.use(l.b));
    h = ad::layer_norm_rows(h);
    h = ad::add_rowvec(ad::mul_rowvec(h, ctx.use(l.gain)), ctx.use(l.bias));
    h = ad::relu(h);
    h = ad::dropout(ctx, h, dropout_);
  }
  return h;
}

Mat GlobalMlp::forward_values(const ad::ParamStore& store, const Mat& x) const {
  Mat h = x;
  for (const Layer& l : layers_) {
    const Mat& w = store.at(l.w).value;
    if (h.cols() != w.rows()) throw DimensionError("GlobalMlp: input dim mismatch");
    h = (h * w).rowwise() + store.at(l.b).value.row(0);
    h = layer_norm_values(h);
    h = (h.array().rowwise() * store.at(l.gain).value.row(0).array()).matrix();
    h = (h.rowwise() + store.at(l.bias).value.row(0)).cwiseMax(0.0);
  }
  return h;
}

// ---------------------------------------------------------------------------
// MultiHeadLocalAttention

MultiHeadLocalAttention::MultiHeadLocalAttention(ad::ParamStore& store, const std::string& prefix,
                                                 int n_heads, int in_dim, int out_dim, int d_attn,
                                                 RngStream& init_rng) {
  if (n_heads < 1) throw ConfigError("MultiHeadLocalAttention: need at least one head");
  const double sa = 1.0 / std::sqrt(static_cast<double>(in_dim));
  const double sv = 1.0 / std::sqrt(static_cast<double>(d_attn));
  heads_.reserve(static_cast<std::size_t>(n_heads));
  for (int j = 0; j < n_heads; ++j) {
    std::string base = cat(prefix, ".h", j);
    heads_.push_back({
        store.add(base + ".A", init_rng.normal_matrix(in_dim, d_attn, sa)),
        store.add(base + ".v", init_rng.normal_matrix(d_attn, 1, sv)),
        store.add(base + ".W", init_rng.normal_matrix(in_dim, out_dim, sa)),
    });
  }
}

ad::Var MultiHeadLocalAttention::forward(ad::ModelContext& ctx, ad::Var tokens) const {
  if (tokens.rows() < 1) throw ValueError("multihead_local: no tokens");
  std::vector<ad::Var> rows;
  rows.reserve(heads_.size());
  for (const Head& h : heads_) {
    ad::Var scores = ad::matmul(ad::tanh_op(ad::matmul(tokens, ctx.use(h.a))), ctx.use(h.v));
    ad::Var alpha = ad::softmax_rows(ad::transpose(scores));  // (1, n)
    rows.push_back(ad::matmul(alpha, ad::matmul(tokens, ctx.use(h.w))));
  }
  return ad::concat_rows(rows);
}

Mat MultiHeadLocalAttention::forward_values(const ad::ParamStore& store, const Mat& tokens) const {
  if (tokens.rows() < 1) throw ValueError("multihead_local: no tokens");
  Mat out(static_cast<Eigen::Index>(heads_.size()), store.at(heads_[0].w).value.cols());
  for (std::size_t j = 0; j < heads_.size(); ++j) {
    const Mat& a = store.at(heads_[j].a).value;
    if (tokens.cols() != a.rows()) throw DimensionError("multihead_local: token dim mismatch");
    Vec alpha = softmax_vec((tokens * a).array().tanh().matrix() * store.at(heads_[j].v).value);
    out.row(static_cast<Eigen::Index>(j)) =
        alpha.transpose() * (tokens * store.at(heads_[j].w).value);
  }
  return out;
}

Mat MultiHeadLocalAttention::attention_values(const ad::ParamStore& store,
                                              const Mat& tokens) const {
  Mat out(static_cast<Eigen::Index>(heads_.size()), tokens.rows());
  for (std::size_t j = 0; j < heads_.size(); ++j) {
    Vec alpha = softmax_vec((tokens * store.at(heads_[j].a).value).array().tanh().matrix() *
                            store.at(heads_[j].v).value);
    out.row(static_cast<Eigen::Index>(j)) = alpha.transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// EncoderSet

EncoderSet::EncoderSet(ad::ParamStore& store, const DatasetManifest& manifest, int d_attn,
                       double dropout, RngStream& init_rng)
    : d_(manifest.D),
      c_wsi_(manifest.C),
      n_h_(manifest.N_h),
      c_rpt_(manifest.C),
      abmil_(store, "enc.wsi.abmil", manifest.D, d_attn, init_rng),
      rna_mlp_(store, "enc.rna.mlp", manifest.D, manifest.D, dropout, init_rng),
      rna_attn_(store, "enc.rna.attn", manifest.N_h, manifest.D, manifest.D, d_attn, init_rng) {}

void EncoderSet::fit_corpus_centroids(const std::vector<SampleRecord>& records,
                                      std::uint64_t seed) {
  std::vector<const Mat*> wsi_bags;
  std::vector<const Mat*> rpt_bags;
  Eigen::Index wsi_rows = 0;
  Eigen::Index rpt_rows = 0;
  for (const SampleRecord& r : records) {
    if (r.modality[kWsi].present && r.patch_embeddings.rows() > 0) {
      wsi_bags.push_back(&r.patch_embeddings);
      wsi_rows += r.patch_embeddings.rows();
    }
    if (r.modality[kRpt].present && r.modality[kRpt].local.rows() > 0) {
      rpt_bags.push_back(&r.modality[kRpt].local);
      rpt_rows += r.modality[kRpt].local.rows();
    }
  }
  auto stack = [this](const std::vector<const Mat*>& bags, Eigen::Index total) {
    Mat all(total, d_);
    Eigen::Index at = 0;
    for (const Mat* b : bags) {
      all.middleRows(at, b->rows()) = *b;
      at += b->rows();
    }
    return all;
  };
  if (wsi_rows > 0) {
    wsi_centroids_ =
        fit_corpus_kmeans(stack(wsi_bags, wsi_rows), c_wsi_, RngStream::derive_seed(seed, "corpus_wsi"));
  }
  if (rpt_rows > 0) {
    rpt_centroids_ =
        fit_corpus_kmeans(stack(rpt_bags, rpt_rows), c_rpt_, RngStream::derive_seed(seed, "corpus_rpt"));
  }
}

EncodedSample EncoderSet::encode_precomputed(const SampleRecord& record) const {
  EncodedSample out;
  out.label = record.label;
  for (int m = 0; m < kNumModalities; ++m) {
    auto mod = static_cast<Modality>(m);
    out.present[m] = record.modality[m].present;
    if (out.present[m]) {
      out.global[m] = record.modality[m].global;
      normalize_vec_inplace(out.global[m]);
      out.local[m] = record.modality[m].local;
      normalize_rows_inplace(out.local[m]);
    } else {
      out.global[m] = Vec::Zero(d_);
      out.local[m] = Mat::Zero(record.modality[m].local.rows() > 0
                                   ? record.modality[m].local.rows()
                                   : (mod == Modality::Rna ? n_h_ : c_wsi_),
                               d_);
    }
  }
  return out;
}

EncodedSample EncoderSet::encode_raw_values(const ad::ParamStore& store,
                                            const SampleRecord& record) const {
  EncodedSample out = encode_precomputed(record);

  if (out.present[kWsi] && record.patch_embeddings.rows() > 0) {
    if (record.patch_embeddings.cols() != d_) {
      throw DimensionError("encode_sample: patch dim must match model dim");
    }
    if (wsi_centroids_.rows() == 0) {
      throw StateError("encode_sample: corpus centroids not fitted");
    }
    out.global[kWsi] = abmil_.pool_values(store, record.patch_embeddings);
    normalize_vec_inplace(out.global[kWsi]);
    out.local[kWsi] = fit_local_gmm(record.patch_embeddings, wsi_centroids_).means;
    normalize_rows_inplace(out.local[kWsi]);
  }
  if (out.present[kRna]) {
    Mat g = rna_mlp_.forward_values(store, record.modality[kRna].global.transpose());
    out.global[kRna] = g.row(0).transpose();
    normalize_vec_inplace(out.global[kRna]);
    out.local[kRna] = rna_attn_.forward_values(store, record.modality[kRna].local);
    normalize_rows_inplace(out.local[kRna]);
  }
  if (out.present[kRpt] && record.modality[kRpt].local.rows() > 0) {
    if (rpt_centroids_.rows() == 0) {
      throw StateError("encode_sample: corpus centroids not fitted");
    }
    out.local[kRpt] = fit_local_gmm(record.modality[kRpt].local, rpt_centroids_).means;
    normalize_rows_inplace(out.local[kRpt]);
  }
  return out;
}

EncoderSet::VarSample EncoderSet::encode_raw(ad::ModelContext& ctx,
                                             const SampleRecord& record) const {
  // Mixture locals and the pass-through slots come from the value-level
  // path; only the learned stacks rebuild on the tape.
  EncodedSample values = encode_raw_values(ctx.store(), record);
  VarSample out;
  out.label = values.label;
  out.present = values.present;
  ad::Tape& tape = ctx.tape();

  for (int m = 0; m < kNumModalities; ++m) {
    out.local[m] = tape.constant(values.local[m]);
    out.global[m] = tape.constant(values.global[m].transpose());
  }
  if (values.present[kWsi] && record.patch_embeddings.rows() > 0) {
    ad::Var patches = tape.constant(record.patch_embeddings);
    out.global[kWsi] = ad::l2_normalize_rows(abmil_.pool(ctx, patches));
  }
  if (values.present[kRna]) {
    ad::Var g = tape.constant(record.modality[kRna].global.transpose());
    out.global[kRna] = ad::l2_normalize_rows(rna_mlp_.forward(ctx, g));
    ad::Var tokens = tape.constant(record.modality[kRna].local);
    out.local[kRna] = ad::l2_normalize_rows(rna_attn_.forward(ctx, tokens));
  }
  return out;
}

Vec EncoderSet::wsi_attention(const ad::ParamStore& store, const SampleRecord& record) const {
  if (record.patch_embeddings.rows() < 1) {
    throw ValueError("wsi_attention: sample has no patch embeddings");
  }
  Vec weights;
  abmil_.pool_values(store, record.patch_embeddings, &weights);
  return weights;
}

}  // namespace mosare
