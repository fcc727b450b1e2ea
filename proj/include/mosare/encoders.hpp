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

/// Unit-L2-normalizes each row in place; all-zero rows are left untouched.
void normalize_rows_inplace(Mat& m);

/// Gated attention pooling over a bag of instances. Scores are
/// (tanh(h V) * sigmoid(h U)) w, softmaxed over the bag.
class AbmilPooler {
 public:
  AbmilPooler(ad::ParamStore& store, const std::string& prefix, int dim, int d_attn,
              RngStream& init_rng);

  /// Pooled vector (1, dim) on the tape; `weights_out`, when non-null,
  /// receives the softmax attention weights (n, 1).
  ad::Var pool(ad::ModelContext& ctx, ad::Var instances, ad::Var* weights_out = nullptr) const;

  /// Value-level pooling at the current parameter values.
  Vec pool_values(const ad::ParamStore& store, const Mat& instances,
                  Vec* weights_out = nullptr) const;

 private:
  int v_id_, u_id_, w_id_;
};

/// k-means++ seeding followed by Lloyd iterations; stops when assignments
/// no longer change or after `max_iters`. Deterministic for a given seed.
Mat fit_corpus_kmeans(const Mat& points, int n_clusters, std::uint64_t seed, int max_iters = 100);

struct LocalGmmFit {
  Mat means;                     // (n_components, dim)
  std::vector<double> log_likelihoods;  // one entry per EM iteration, non-decreasing
};

/// Diagonal-covariance GMM over one bag, initialized at `init_means` with
/// uniform weights and unit variances. Components that receive no
/// responsibility mass keep their initialization. Returns the component
/// means row-aligned with `init_means`.
LocalGmmFit fit_local_gmm(const Mat& bag, const Mat& init_means, int max_iters = 25,
                          double tol = 1e-6, double var_floor = 1e-6);

/// Three affine layers, each followed by layer normalization, ReLU and
/// dropout. Maps (n, in_dim) to (n, out_dim).
class GlobalMlp {
 public:
  GlobalMlp(ad::ParamStore& store, const std::string& prefix, int in_dim, int out_dim,
            double dropout, RngStream& init_rng);

  ad::Var forward(ad::ModelContext& ctx, ad::Var x) const;
  Mat forward_values(const ad::ParamStore& store, const Mat& x) const;

 private:
  struct Layer {
    int w, b, gain, bias;
  };
  std::array<Layer, 3> layers_;
  double dropout_;
};

/// One output row per head: alpha_j = softmax_k(tanh(T A_j) v_j),
/// row_j = alpha_j^T (T W_j). Maps (n_tokens, in_dim) to (n_heads, out_dim).
class MultiHeadLocalAttention {
 public:
  MultiHeadLocalAttention(ad::ParamStore& store, const std::string& prefix, int n_heads,
                          int in_dim, int out_dim, int d_attn, RngStream& init_rng);

  ad::Var forward(ad::ModelContext& ctx, ad::Var tokens) const;
  Mat forward_values(const ad::ParamStore& store, const Mat& tokens) const;

  /// Per-head attention weights (n_heads, n_tokens) at current values.
  Mat attention_values(const ad::ParamStore& store, const Mat& tokens) const;

 private:
  struct Head {
    int a, v, w;
  };
  std::vector<Head> heads_;
};

enum class EncodeMode { Precomputed, Raw };

/// One sample after encoding: per-modality global vector and local matrix,
/// rows unit-normalized, absent slots zeroed.
struct EncodedSample {
  std::array<Vec, kNumModalities> global;
  std::array<Mat, kNumModalities> local;
  std::array<bool, kNumModalities> present{};
  int label = 0;
};

/// Owns the trainable encoder stacks and the frozen corpus centroids used
/// to seed per-bag mixture fits in raw mode.
class EncoderSet {
 public:
  EncoderSet(ad::ParamStore& store, const DatasetManifest& manifest, int d_attn, double dropout,
             RngStream& init_rng);

  /// Fits the shared centroids that seed per-bag mixture fits: patch space
  /// for WSI (from raw patch bags) and sentence space for RPT (from stored
  /// local rows). Required before raw-mode encoding.
  void fit_corpus_centroids(const std::vector<SampleRecord>& records, std::uint64_t seed);
  const Mat& wsi_centroids() const { return wsi_centroids_; }
  const Mat& rpt_centroids() const { return rpt_centroids_; }
  void set_centroids(Mat wsi, Mat rpt) {
    wsi_centroids_ = std::move(wsi);
    rpt_centroids_ = std::move(rpt);
  }

  /// Precomputed mode: pass-through plus row normalization, no parameters.
  EncodedSample encode_precomputed(const SampleRecord& record) const;

  /// Raw mode at current parameter values (dropout off). Mixture-model
  /// locals are EM fits and carry no gradient in either API.
  EncodedSample encode_raw_values(const ad::ParamStore& store, const SampleRecord& record) const;

  /// Raw-mode tape encoding for one sample; trainable paths contribute
  /// gradients, mixture locals enter as constants. Absent slots are zero.
  struct VarSample {
    std::array<ad::Var, kNumModalities> global;
    std::array<ad::Var, kNumModalities> local;
    std::array<bool, kNumModalities> present{};
    int label = 0;
  };
  VarSample encode_raw(ad::ModelContext& ctx, const SampleRecord& record) const;

  /// ABMIL softmax weights over the sample's patches at current values.
  Vec wsi_attention(const ad::ParamStore& store, const SampleRecord& record) const;

  const AbmilPooler& abmil() const { return abmil_; }

 private:
  int d_;
  int c_wsi_, n_h_, c_rpt_;
  AbmilPooler abmil_;
  GlobalMlp rna_mlp_;
  MultiHeadLocalAttention rna_attn_;
  Mat wsi_centroids_;
  Mat rpt_centroids_;
};

}  // namespace mosare
