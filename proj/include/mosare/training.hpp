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

#ifndef MOSARE_TRAINING_HPP_
#define MOSARE_TRAINING_HPP_

#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mosare/model.hpp"

namespace mosare {

// Which loss terms an epoch trains. Reconstruction and classification run
// from epoch zero; both contrastive alignments start after the warm-up.
struct ActiveLosses {
  bool rec = true;
  bool cls = true;
  bool symcl = false;
  bool mcl = false;
};
ActiveLosses warmup_schedule(int epoch, const RunConfig& cfg);

// Mean cross-entropy of row logits against integer labels.
ad::Var ce_loss_rows(ad::Var logits, const std::vector<int>& labels);

// Per-level classification losses: global and local average their three
// modality heads; agg scores the fused output.
struct ClsLosses {
  ad::Var global, local, agg;
};
ClsLosses classification_losses(const ForwardBundle& bundle, const std::vector<int>& labels);

struct LossBreakdown {
  double symcl = 0.0;
  double mcl = 0.0;
  double rec = 0.0;
  double cls_global = 0.0;
  double cls_local = 0.0;
  double cls_agg = 0.0;
  double total = 0.0;

  std::string describe() const;
};

struct LossTerms {
  ad::Var total;
  LossBreakdown breakdown;
};

// Weighted total over one batch. Inactive terms (warm-up, ablation switches,
// zero weights) contribute exact zeros to both graph and breakdown, so
// total == lambda1*symcl + lambda2*mcl + lambda3*rec + lambda4*(sum of cls)
// holds identically.
LossTerms total_loss(ad::ModelContext& ctx, MosareModel& model, const ForwardBundle& bundle,
                     const EncodedBatch& batch, int epoch);

// Adam with bias correction, decoupled weight decay, and global-norm
// gradient clipping, reading hyperparameters from the run config.
class AdamOptimizer {
 public:
  AdamOptimizer(ad::ParamStore& store, const RunConfig& cfg);

  // One update from per-parameter gradient sums; returns the pre-clip
  // global gradient norm.
  double step(const std::vector<std::pair<int, Mat>>& grads);

  long steps_taken() const { return t_; }

 private:
  ad::ParamStore* store_;
  double lr_, beta1_, beta2_, eps_, weight_decay_, clip_;
  long t_ = 0;
};

struct EpochMetrics {
  int epoch = 0;
  std::string split = "val";
  LossBreakdown loss;
  double auc = 0.0;
  double f1 = 0.0;
  double acc = 0.0;
};

std::string epoch_metrics_json(const EpochMetrics& m);

struct TrainOptions {
  std::string checkpoint_path;       // save the final model here when non-empty
  std::string metrics_path;          // append per-epoch JSON lines when non-empty
  std::ostream* progress = nullptr;  // human-readable epoch lines when set
};

struct TrainResult {
  std::unique_ptr<MosareModel> model;
  std::vector<EpochMetrics> history;
};

// Full training run: scenario masking, stratified fold split (fold
// cfg.eval_fold held out), mini-batch Adam with warm-up scheduling, EM
// prototype updates after each post-warm-up batch, per-epoch held-out
// metrics, and, when requested, a final checkpoint that the returned model
// has itself been reloaded from so later loads reproduce it exactly.
TrainResult train(const Dataset& dataset, const RunConfig& cfg, const TrainOptions& opts = {});

// Checkpoint archive: config and manifest snapshot as JSON, parameter
// tensors as named little-endian float32 blocks, mixture state, RNG states.
struct Checkpoint {
  RunConfig config;
  DatasetManifest manifest;  // fold assignments omitted
  std::vector<std::pair<std::string, Mat>> tensors;
  std::vector<ClassGmm> gmm_state;  // empty until alignment initialized
  std::map<std::string, std::string> rng_state;
};

void save_checkpoint(const std::string& path, const MosareModel& model,
                     const std::map<std::string, std::string>& rng_state);
Checkpoint load_checkpoint(const std::string& path);

// Rebuilds a model from an archive; tensor names and shapes must match the
// architecture the config describes.
std::unique_ptr<MosareModel> model_from_checkpoint(const Checkpoint& ck);

}  // namespace mosare

#endif  // MOSARE_TRAINING_HPP_
