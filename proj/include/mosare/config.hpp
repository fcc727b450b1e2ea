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

#include <cstdint>
#include <map>
#include <string>

#include "mosare/common.hpp"

namespace mosare {

enum class ScenarioKind { MaskedTrainMaskedTest, MaskedTrainUnmaskedTest, RemovedTrainUnmaskedTest };

const char* scenario_name(ScenarioKind k);
ScenarioKind scenario_from_name(const std::string& name);

/// Every tunable the run depends on, addressable as flat dotted keys in
/// config files and --set overrides. Defaults mirror the reference setup.
struct RunConfig {
  // train.*
  double lr = 1e-4;
  int batch_size = 32;
  int epochs = 100;
  int warmup_epochs = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip_norm = 5.0;
  std::uint64_t seed = 0;
  int eval_fold = 0;

  // loss.*
  double lambda1 = 1.0;  // symmetric contrastive
  double lambda2 = 2.0;  // prototype contrastive
  double lambda3 = 1.0;  // reconstruction
  double lambda4 = 1.0;  // classification
  double tau_symcl = 10.0;
  double tau_mcl = 0.1;
  bool symcl_tau_multiplies = true;  // temperature multiplies the similarity
  bool rec_loss_on_masked = false;

  // model.*
  int n_experts = 5;
  int top_k = 2;
  int k_loc = 8;
  int d_attn = 0;  // 0 means D / 4
  double dropout = 0.2;
  bool renormalize_gate = true;
  bool final_moe_concat = false;   // route the six finals jointly as one token
  bool rec_share_heads = false;    // share decoupling heads across levels
  bool per_modality_heads = false; // separate classifier heads per modality
  bool use_cma = true;
  bool use_moe = true;
  bool use_rec = true;
  bool use_align = true;

  // align.*
  int m_comp = 3;
  double gmm_momentum = 0.999;
  int sinkhorn_iters = 10;
  double sinkhorn_reg = 1.0;
  double var_floor = 1e-6;
  bool pure_em = false;  // momentum 0, Sinkhorn balancing off

  // encoders.*
  std::string encoder_mode = "precomputed";  // or "raw"

  // mask.* (training-time masking applied by the CLI / scenario runner)
  double mask_fraction = 0.0;
  std::string mask_policy = "balanced";  // or "independent"

  // scenario.*
  std::string scenario = "masked_train_masked_test";

  void validate() const;

  /// Canonical flat form, sorted by key; the config hash and the resolved
  /// snapshot are both derived from it.
  std::map<std::string, std::string> to_map() const;
  static RunConfig from_map(const std::map<std::string, std::string>& kv);

  std::string serialize() const;  // "key=value\n" lines, sorted
  std::uint64_t hash() const;

  int resolved_d_attn(int d) const { return d_attn > 0 ? d_attn : std::max(1, d / 4); }
};

/// Parses "key=value" lines; '#' starts a comment; blank lines ignored.
/// Unknown keys are rejected.
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> load_config_file(const std::string& path);

/// Applies "key=value" overrides on top of a parsed map.
void apply_override(std::map<std::string, std::string>& kv, const std::string& assignment);

}  // namespace mosare
