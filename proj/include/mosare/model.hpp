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

#ifndef MOSARE_MODEL_HPP_
#define MOSARE_MODEL_HPP_

#include <array>
#include <memory>
#include <vector>

#include "mosare/alignment.hpp"
#include "mosare/autodiff.hpp"
#include "mosare/common.hpp"
#include "mosare/config.hpp"
#include "mosare/dataio.hpp"
#include "mosare/encoders.hpp"
#include "mosare/fusion.hpp"
#include "mosare/reconstruction.hpp"

namespace mosare {

// One mini-batch stacked into row-aligned matrices. In precomputed mode the
// tensor slots are filled; in raw mode they stay empty and `sources` carries
// the records so the trainable encoder stacks can run on tape.
struct EncodedBatch {
  std::array<Mat, kNumModalities> globals;   // (B, D) each
  std::array<Mat, kNumModalities> locals;    // (B * C_m, D) each
  Mat presence;                              // (B, 3), exact 0/1
  std::vector<int> labels;                   // size B
  std::vector<const SampleRecord*> sources;  // row -> record

  Eigen::Index size() const { return presence.rows(); }
};

// Every intermediate the losses and metrics read, for one batch. Slots that
// a disabled component would have produced are left invalid.
struct ForwardBundle {
  std::array<ad::Var, kNumModalities> cma_global, cma_local;      // (B, D)
  ad::Var agg_global, agg_local;                                  // (B, D)
  std::array<ad::Var, kNumModalities> rec_global, rec_local;      // (B, D)
  std::array<ad::Var, kNumModalities> final_global, final_local;  // (B, D)
  ad::Var x_out;                                                  // (B, D)
  std::array<ad::Var, kNumModalities> logits_global, logits_local;
  ad::Var logits_agg;                        // (B, n_classes)
  std::array<Mat, kNumModalities> presence_cols;  // (B, 1) each, exact 0/1
};

// Per-sample interpretability slice at current parameter values.
struct SampleExplanation {
  Vec wsi_patch_attention;  // empty without a raw patch bag
  std::array<std::vector<int>, kNumModalities> local_picks;  // kept row indices
  // |global dot| with partners (m+1)%3 and (m+2)%3, in that order.
  std::array<std::array<double, 2>, kNumModalities> cma_cross_global{};
  std::array<std::vector<GateDecision>, kNumModalities> local_experts;  // per row
};

// Full fused classifier: encoders, per-modality local expert banks and
// selectors, cross-modal fusion, decoupling heads, a final expert bank, and
// linear classifier heads. All parameters live in one ParamStore; contexts
// must be created after construction completes.
class MosareModel {
 public:
  MosareModel(const RunConfig& cfg, const DatasetManifest& manifest);

  const RunConfig& config() const { return cfg_; }
  const DatasetManifest& manifest() const { return manifest_; }
  int n_classes() const { return manifest_.n_classes; }

  ad::ParamStore& store() { return store_; }
  const ad::ParamStore& store() const { return store_; }

  EncoderSet& encoders() { return encoders_; }
  const EncoderSet& encoders() const { return encoders_; }

  PrototypeGmms& gmms() { return gmms_; }
  const PrototypeGmms& gmms() const { return gmms_; }

  // Stacks records for one batch; encoding is the precomputed pass-through
  // unless the config selects raw mode, in which case tensors defer to
  // forward() so the encoder stacks stay on tape.
  EncodedBatch make_batch(const std::vector<const SampleRecord*>& records) const;

  // One batched pass through fusion, reconstruction, and the heads.
  ForwardBundle forward(ad::ModelContext& ctx, const EncodedBatch& batch);

  // Aggregate-head class probabilities in eval mode, batched internally.
  Mat predict_proba(const std::vector<const SampleRecord*>& records, int batch_size);

  // Aggregate-output vectors in eval mode, one row per record.
  Mat collect_outputs(const std::vector<const SampleRecord*>& records, int batch_size);

  // Value-level single-sample internals for interpretability export.
  SampleExplanation explain(const SampleRecord& record) const;

 private:
  std::array<ad::Var, kNumModalities> batch_globals(ad::ModelContext& ctx,
                                                    const EncodedBatch& batch,
                                                    std::array<ad::Var, kNumModalities>& locals);
  ad::Var head_logits(ad::ModelContext& ctx, ad::Var x, const std::string& head,
                      int modality) const;

  RunConfig cfg_;
  DatasetManifest manifest_;
  ad::ParamStore store_;
  EncoderSet encoders_;
  std::vector<ExpertBank> local_banks_;     // one per modality
  std::vector<LocalSelector> selectors_;    // one per modality
  std::unique_ptr<ExpertBank> final_bank_;  // absent when the mixture is off
  DecouplerSet decouplers_;
  PrototypeGmms gmms_;
};

}  // namespace mosare

#endif  // MOSARE_MODEL_HPP_
