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

#ifndef MOSARE_EVALUATION_HPP_
#define MOSARE_EVALUATION_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "mosare/training.hpp"

namespace mosare {

// Row-wise argmax with ties to the lowest index.
std::vector<int> argmax_rows(const Mat& scores);

// Fraction of exact agreements.
double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);

// Macro F1: per-class harmonic precision/recall mean, averaged over classes
// that appear in labels or predictions; degenerate classes contribute 0.
double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels);

// Rank-based AUC, ties worth half. Binary labels use the class-1 score
// column; more classes average one-vs-rest AUCs (macro). Throws
// StratificationError when labels contain a single class.
double auc_score(const Mat& scores, const std::vector<int>& labels);

struct FoldMetrics {
  int fold = 0;
  double auc = 0.0, f1 = 0.0, acc = 0.0;
};

struct MetricReport {
  std::vector<FoldMetrics> folds;
  double auc_mean = 0.0, auc_std = 0.0;
  double f1_mean = 0.0, f1_std = 0.0;
  double acc_mean = 0.0, acc_std = 0.0;
  std::string scenario;
  double mask_fraction = 0.0;
  std::uint64_t config_hash = 0;
  bool applicable = true;  // false renders as NA

  std::string to_json() const;
};

MetricReport aggregate_folds(std::vector<FoldMetrics> folds);

// Cross-validation: rotates the held-out fold over the first `n_folds`
// assignments, trains one model per rotation, scores it on its held-out
// fold. Progress lines go to `progress` when set.
MetricReport run_cv(const Dataset& dataset, const RunConfig& cfg, int n_folds = 5,
                    std::ostream* progress = nullptr);

struct ScenarioCell {
  std::string scenario;
  double fraction = 0.0;
  MetricReport report;
};

// Grid of the three missing-modality regimes over the given fractions.
// Cells whose masking leaves no trainable set come back applicable=false.
std::vector<ScenarioCell> run_scenarios(const Dataset& dataset, const RunConfig& cfg,
                                        const std::vector<double>& fractions,
                                        int n_folds = 5, std::ostream* progress = nullptr);

struct AblationRow {
  std::string name;
  std::uint64_t config_hash = 0;
  MetricReport report;
  double auc_delta = 0.0;  // versus the previous row
};

struct AblationReport {
  std::vector<AblationRow> components;  // complete data: baseline, fusion, +alignment
  std::vector<AblationRow> ladder;      // 30% masked: cma, +rec, +moe, +alignment
};

AblationReport run_ablation(const Dataset& dataset, const RunConfig& cfg, int n_folds = 5,
                            std::ostream* progress = nullptr);

// Per-sample interpretability export: one JSON line per record (attention
// weights, kept local rows, cross-modal dot magnitudes, expert picks); when
// `image_dir` is non-empty, samples carrying patch coordinates also get a
// grayscale attention heatmap PNG named by sample id.
void export_attention(MosareModel& model, const std::vector<const SampleRecord*>& records,
                      const std::string& jsonl_path, const std::string& image_dir = "");

// Plain-text aligned tables.
std::string cv_table(const MetricReport& report);
std::string scenario_table(const std::vector<ScenarioCell>& cells);
std::string ablation_table(const AblationReport& report);

}  // namespace mosare

#endif  // MOSARE_EVALUATION_HPP_
