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

#include "mosare/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "mosare/png.hpp"

namespace mosare {
namespace {

using json = nlohmann::json;

}  // namespace

std::vector<int> argmax_rows(const Mat& scores) {
  if (scores.cols() == 0) throw ValueError("argmax_rows: no columns");
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < scores.cols(); ++j)
      if (scores(i, j) > scores(i, best)) best = j;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size())
    throw DimensionError(cat("accuracy: ", preds.size(), " predictions vs ", labels.size(),
                             " labels"));
  if (preds.empty()) throw ValueError("accuracy: empty inputs");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size())
    throw DimensionError(cat("macro_f1: ", preds.size(), " predictions vs ", labels.size(),
                             " labels"));
  if (preds.empty()) throw ValueError("macro_f1: empty inputs");
  int n_classes = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || labels[i] < 0) throw ValueError("macro_f1: negative class index");
    n_classes = std::max(n_classes, std::max(preds[i], labels[i]) + 1);
  }
  // Classes indexed 0..max over labels and predictions; a class with zero
  // true positives scores 0, including classes never predicted or seen.
  double total = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const bool p = preds[i] == c, t = labels[i] == c;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
    if (tp > 0) {
      const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
      total += 2.0 * precision * recall / (precision + recall);
    }
  }
  return total / static_cast<double>(n_classes);
}

namespace {

// Mann-Whitney AUC over one score column; ties share the average rank.
double binary_auc(const Vec& scores, const std::vector<bool>& positive) {
  const auto n = static_cast<std::size_t>(scores.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores(static_cast<Eigen::Index>(a)) <
                                                        scores(static_cast<Eigen::Index>(b)); });
  std::vector<double> rank(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores(static_cast<Eigen::Index>(order[j + 1])) ==
                            scores(static_cast<Eigen::Index>(order[i])))
      ++j;
    const double shared = 0.5 * static_cast<double>(i + j) + 1.0;  // ranks are 1-based
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = shared;
    i = j + 1;
  }
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (positive[k]) {
      pos_rank_sum += rank[k];
      ++n_pos;
    }
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw StratificationError("auc: need both positive and negative samples");
  return (pos_rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace

double auc_score(const Mat& scores, const std::vector<int>& labels) {
  if (scores.rows() != static_cast<Eigen::Index>(labels.size()))
    throw DimensionError(cat("auc_score: ", scores.rows(), " score rows vs ", labels.size(),
                             " labels"));
  if (labels.empty()) throw ValueError("auc_score: empty inputs");
  std::vector<int> classes = labels;
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2)
    throw StratificationError("auc_score: labels hold a single class; metric undefined");

  if (scores.cols() <= 2) {
    // Binary: rank by the class-1 score (a single column is that score).
    const Vec col = scores.col(scores.cols() - 1);
    std::vector<bool> positive(labels.size());
    for (std::size_t k = 0; k < labels.size(); ++k) positive[k] = labels[k] == 1;
    return binary_auc(col, positive);
  }

  // Macro one-vs-rest over classes present in the labels.
  double total = 0.0;
  for (int c : classes) {
    if (c < 0 || c >= scores.cols())
      throw ValueError(cat("auc_score: label ", c, " outside the ", scores.cols(),
                           " score columns"));
    std::vector<bool> positive(labels.size());
    for (std::size_t k = 0; k < labels.size(); ++k) positive[k] = labels[k] == c;
    total += binary_auc(scores.col(c), positive);
  }
  return total / static_cast<double>(classes.size());
}

namespace {

void mean_std(const std::vector<double>& xs, double& mean, double& sd) {
  mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  sd = std::sqrt(var / static_cast<double>(xs.size()));
}

}  // namespace

MetricReport aggregate_folds(std::vector<FoldMetrics> folds) {
  if (folds.empty()) throw ValueError("aggregate_folds: no folds");
  MetricReport rep;
  std::vector<double> auc, f1, acc;
  for (const FoldMetrics& f : folds) {
    auc.push_back(f.auc);
    f1.push_back(f.f1);
    acc.push_back(f.acc);
  }
  mean_std(auc, rep.auc_mean, rep.auc_std);
  mean_std(f1, rep.f1_mean, rep.f1_std);
  mean_std(acc, rep.acc_mean, rep.acc_std);
  rep.folds = std::move(folds);
  return rep;
}

std::string MetricReport::to_json() const {
  json j;
  j["applicable"] = applicable;
  j["scenario"] = scenario;
  j["mask_fraction"] = mask_fraction;
  j["config_hash"] = config_hash;
  j["folds"] = json::array();
  for (const FoldMetrics& f : folds)
    j["folds"].push_back({{"fold", f.fold}, {"auc", f.auc}, {"f1", f.f1}, {"acc", f.acc}});
  j["auc"] = {{"mean", auc_mean}, {"std", auc_std}};
  j["f1"] = {{"mean", f1_mean}, {"std", f1_std}};
  j["acc"] = {{"mean", acc_mean}, {"std", acc_std}};
  return j.dump();
}

MetricReport run_cv(const Dataset& dataset, const RunConfig& cfg, int n_folds,
                    std::ostream* progress) {
  if (n_folds < 2) throw ConfigError("run_cv: need at least two folds");
  Dataset ds;
  ds.manifest = dataset.manifest;
  ds.records = dataset.records;
  if (ds.manifest.folds.empty())
    ds.manifest.folds = stratified_folds(ds.records, std::max(n_folds, 5),
                                         RngStream::derive_seed(cfg.seed, "folds"));

  std::vector<FoldMetrics> folds;
  for (int f = 0; f < n_folds; ++f) {
    RunConfig c = cfg;
    c.eval_fold = f;
    try {
      TrainResult r = train(ds, c);
      const EpochMetrics& last = r.history.back();
      folds.push_back({f, last.auc, last.f1, last.acc});
    } catch (const MaskingError& e) {
      throw MaskingError(cat("fold ", f, ": ", e.what()));
    } catch (const StratificationError& e) {
      throw StratificationError(cat("fold ", f, ": ", e.what()));
    }
    if (progress)
      *progress << "fold " << f << " auc " << folds.back().auc << " f1 " << folds.back().f1
                << " acc " << folds.back().acc << '\n';
  }
  MetricReport rep = aggregate_folds(std::move(folds));
  rep.scenario = cfg.scenario;
  rep.mask_fraction = cfg.mask_fraction;
  rep.config_hash = cfg.hash();
  return rep;
}

std::vector<ScenarioCell> run_scenarios(const Dataset& dataset, const RunConfig& cfg,
                                        const std::vector<double>& fractions, int n_folds,
                                        std::ostream* progress) {
  if (fractions.empty()) throw ValueError("run_scenarios: no fractions given");
  static constexpr ScenarioKind kKinds[] = {ScenarioKind::MaskedTrainMaskedTest,
                                            ScenarioKind::MaskedTrainUnmaskedTest,
                                            ScenarioKind::RemovedTrainUnmaskedTest};
  std::vector<ScenarioCell> cells;
  for (const ScenarioKind kind : kKinds) {
    for (const double fraction : fractions) {
      ScenarioCell cell;
      cell.scenario = scenario_name(kind);
      cell.fraction = fraction;
      RunConfig c = cfg;
      c.scenario = cell.scenario;
      c.mask_fraction = fraction;
      if (progress) *progress << cell.scenario << " fraction " << fraction << '\n';
      try {
        cell.report = run_cv(dataset, c, n_folds, progress);
      } catch (const MaskingError& e) {
        // The regime cannot produce a training set here; report NA.
        cell.report.applicable = false;
        cell.report.scenario = cell.scenario;
        cell.report.mask_fraction = fraction;
        cell.report.config_hash = c.hash();
        if (progress) *progress << "  NA: " << e.what() << '\n';
      } catch (const StratificationError& e) {
        cell.report.applicable = false;
        cell.report.scenario = cell.scenario;
        cell.report.mask_fraction = fraction;
        cell.report.config_hash = c.hash();
        if (progress) *progress << "  NA: " << e.what() << '\n';
      }
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

namespace {

AblationRow ablation_row(const std::string& name, const Dataset& dataset, const RunConfig& cfg,
                         int n_folds, std::ostream* progress) {
  if (progress) *progress << "ablation " << name << '\n';
  AblationRow row;
  row.name = name;
  row.config_hash = cfg.hash();
  row.report = run_cv(dataset, cfg, n_folds, progress);
  return row;
}

void fill_deltas(std::vector<AblationRow>& rows) {
  for (std::size_t i = 1; i < rows.size(); ++i)
    rows[i].auc_delta = rows[i].report.auc_mean - rows[i - 1].report.auc_mean;
}

}  // namespace

AblationReport run_ablation(const Dataset& dataset, const RunConfig& cfg, int n_folds,
                            std::ostream* progress) {
  AblationReport rep;

  // Component rows on complete data: fusion and alignment switched in on
  // top of a plain per-modality classifier.
  RunConfig complete = cfg;
  complete.mask_fraction = 0.0;
  complete.scenario = scenario_name(ScenarioKind::MaskedTrainMaskedTest);
  RunConfig baseline = complete;
  baseline.use_cma = false;
  baseline.use_moe = false;
  baseline.use_rec = false;
  baseline.use_align = false;
  RunConfig fusion = complete;
  fusion.use_cma = true;
  fusion.use_moe = true;
  fusion.use_rec = false;
  fusion.use_align = false;
  RunConfig aligned = fusion;
  aligned.use_align = true;
  rep.components.push_back(ablation_row("baseline", dataset, baseline, n_folds, progress));
  rep.components.push_back(ablation_row("cma_moe", dataset, fusion, n_folds, progress));
  rep.components.push_back(ablation_row("cma_moe_align", dataset, aligned, n_folds, progress));
  fill_deltas(rep.components);

  // Ladder under masking: reconstruction, then the mixture, then alignment.
  RunConfig masked = cfg;
  masked.mask_fraction = cfg.mask_fraction > 0.0 ? cfg.mask_fraction : 0.3;
  masked.scenario = scenario_name(ScenarioKind::MaskedTrainMaskedTest);
  RunConfig cma = masked;
  cma.use_cma = true;
  cma.use_moe = false;
  cma.use_rec = false;
  cma.use_align = false;
  RunConfig cma_rec = cma;
  cma_rec.use_rec = true;
  RunConfig cma_rec_moe = cma_rec;
  cma_rec_moe.use_moe = true;
  RunConfig full = cma_rec_moe;
  full.use_align = true;
  rep.ladder.push_back(ablation_row("cma", dataset, cma, n_folds, progress));
  rep.ladder.push_back(ablation_row("cma_rec", dataset, cma_rec, n_folds, progress));
  rep.ladder.push_back(ablation_row("cma_rec_moe", dataset, cma_rec_moe, n_folds, progress));
  rep.ladder.push_back(ablation_row("full", dataset, full, n_folds, progress));
  fill_deltas(rep.ladder);
  return rep;
}

namespace {

json vec_to_json(const Vec& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

// Attention mass binned onto a coordinate grid, brightest cell scaled to 255.
void write_heatmap(const std::string& path, const Mat& coords, const Vec& weights) {
  constexpr int kGrid = 64;
  const double x_min = coords.col(0).minCoeff(), x_max = coords.col(0).maxCoeff();
  const double y_min = coords.col(1).minCoeff(), y_max = coords.col(1).maxCoeff();
  const double x_span = x_max > x_min ? x_max - x_min : 1.0;
  const double y_span = y_max > y_min ? y_max - y_min : 1.0;
  std::vector<double> cells(kGrid * kGrid, 0.0);
  for (Eigen::Index i = 0; i < coords.rows(); ++i) {
    int gx = static_cast<int>((coords(i, 0) - x_min) / x_span * (kGrid - 1));
    int gy = static_cast<int>((coords(i, 1) - y_min) / y_span * (kGrid - 1));
    gx = std::clamp(gx, 0, kGrid - 1);
    gy = std::clamp(gy, 0, kGrid - 1);
    cells[static_cast<std::size_t>(gy) * kGrid + static_cast<std::size_t>(gx)] += weights(i);
  }
  const double peak = *std::max_element(cells.begin(), cells.end());
  std::vector<std::uint8_t> pixels(cells.size(), 0);
  if (peak > 0.0) {
    for (std::size_t i = 0; i < cells.size(); ++i)
      pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * cells[i] / peak));
  }
  write_png_gray(path, kGrid, kGrid, pixels);
}

}  // namespace

void export_attention(MosareModel& model, const std::vector<const SampleRecord*>& records,
                      const std::string& jsonl_path, const std::string& image_dir) {
  if (records.empty()) throw ValueError("export_attention: no records");
  std::ofstream os(jsonl_path, std::ios::trunc);
  if (!os) throw IoError(cat("cannot write attention export: ", jsonl_path));
  if (!image_dir.empty()) std::filesystem::create_directories(image_dir);

  for (const SampleRecord* rec : records) {
    SampleExplanation ex = model.explain(*rec);
    json j;
    j["sample_id"] = rec->sample_id;
    j["label"] = rec->label;
    j["wsi_attention"] = vec_to_json(ex.wsi_patch_attention);
    for (int m = 0; m < kNumModalities; ++m) {
      const auto mi = static_cast<std::size_t>(m);
      const char* name = modality_name(m);
      j["local_picks"][name] = ex.local_picks[mi];
      j["cma_cross"][name] = {ex.cma_cross_global[mi][0], ex.cma_cross_global[mi][1]};
      json experts = json::array();
      for (const GateDecision& d : ex.local_experts[mi])
        experts.push_back({{"picks", d.picks}, {"weights", vec_to_json(d.weights)}});
      j["experts"][name] = std::move(experts);
    }
    const bool heatmap = !image_dir.empty() && rec->patch_coords.rows() > 0 &&
                         ex.wsi_patch_attention.size() == rec->patch_coords.rows();
    if (heatmap) {
      const std::string img = (std::filesystem::path(image_dir) / (rec->sample_id + ".png")).string();
      write_heatmap(img, rec->patch_coords, ex.wsi_patch_attention);
      j["heatmap"] = img;
    }
    os << j.dump() << '\n';
  }
  if (!os) throw IoError(cat("write failed for attention export: ", jsonl_path));
}

namespace {

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

std::string mean_pm_std(double mean, double sd) { return cat(fmt(mean), " +- ", fmt(sd)); }

void pad(std::ostringstream& os, const std::string& s, std::size_t width) {
  os << s;
  for (std::size_t i = s.size(); i < width; ++i) os << ' ';
}

}  // namespace

std::string cv_table(const MetricReport& report) {
  std::ostringstream os;
  pad(os, "fold", 6);
  pad(os, "auc", 18);
  pad(os, "f1", 18);
  os << "acc\n";
  for (const FoldMetrics& f : report.folds) {
    pad(os, std::to_string(f.fold), 6);
    pad(os, fmt(f.auc), 18);
    pad(os, fmt(f.f1), 18);
    os << fmt(f.acc) << '\n';
  }
  pad(os, "mean", 6);
  pad(os, mean_pm_std(report.auc_mean, report.auc_std), 18);
  pad(os, mean_pm_std(report.f1_mean, report.f1_std), 18);
  os << mean_pm_std(report.acc_mean, report.acc_std) << '\n';
  return os.str();
}

std::string scenario_table(const std::vector<ScenarioCell>& cells) {
  std::ostringstream os;
  pad(os, "scenario", 30);
  pad(os, "fraction", 10);
  pad(os, "auc", 20);
  pad(os, "f1", 20);
  os << "acc\n";
  for (const ScenarioCell& c : cells) {
    pad(os, c.scenario, 30);
    pad(os, fmt(c.fraction, 2), 10);
    if (!c.report.applicable) {
      pad(os, "NA", 20);
      pad(os, "NA", 20);
      os << "NA\n";
      continue;
    }
    pad(os, mean_pm_std(c.report.auc_mean, c.report.auc_std), 20);
    pad(os, mean_pm_std(c.report.f1_mean, c.report.f1_std), 20);
    os << mean_pm_std(c.report.acc_mean, c.report.acc_std) << '\n';
  }
  return os.str();
}

std::string ablation_table(const AblationReport& report) {
  std::ostringstream os;
  auto section = [&os](const std::string& title, const std::vector<AblationRow>& rows) {
    os << title << '\n';
    pad(os, "row", 16);
    pad(os, "auc", 20);
    pad(os, "delta", 10);
    os << "config\n";
    for (const AblationRow& r : rows) {
      pad(os, r.name, 16);
      pad(os, mean_pm_std(r.report.auc_mean, r.report.auc_std), 20);
      pad(os, (r.auc_delta >= 0 ? "+" : "") + fmt(r.auc_delta), 10);
      std::ostringstream hex;
      hex << std::hex << std::setw(16) << std::setfill('0') << r.config_hash;
      os << hex.str() << '\n';
    }
  };
  section("[complete data]", report.components);
  os << '\n';
  const double frac = report.ladder.empty() ? 0.0 : report.ladder.front().report.mask_fraction;
  section(cat("[masked data, fraction ", fmt(frac, 2), "]"), report.ladder);
  return os.str();
}

}  // namespace mosare
