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

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mosare/evaluation.hpp"
#include "mosare/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace mosare {
namespace {

struct CommonArgs {
  std::string data_dir;
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  std::string runs_root;
  std::string run_dir;  // explicit path, skips the timestamped naming
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_data = true) {
  if (needs_data)
    cmd->add_option("--data", args.data_dir, "Dataset directory")->required();
  cmd->add_option("--config", args.config_path, "Config file (key=value lines, # comments)");
  cmd->add_option("--set", args.overrides, "Config override, repeatable (key=value)");
  cmd->add_option("--out", args.runs_root,
                  "Run output root (default $MOSARE_RUNS_DIR, then ./runs)");
  cmd->add_option("--run-dir", args.run_dir, "Exact run directory, overrides --out naming");
}

RunConfig resolve_config(const CommonArgs& args) {
  std::map<std::string, std::string> kv;
  if (!args.config_path.empty()) kv = load_config_file(args.config_path);
  for (const std::string& item : args.overrides) {
    const std::size_t eq = item.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError(cat("--set expects key=value, got '", item, "'"));
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return RunConfig::from_map(kv);
}

std::string timestamp_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

fs::path create_run_dir(const CommonArgs& args, const RunConfig& cfg) {
  if (!args.run_dir.empty()) {
    fs::create_directories(args.run_dir);
    return fs::path(args.run_dir);
  }
  std::string root = args.runs_root;
  if (root.empty()) {
    const char* env = std::getenv("MOSARE_RUNS_DIR");
    root = env != nullptr && *env != '\0' ? env : "runs";
  }
  std::ostringstream hash;
  hash << std::hex << std::setw(16) << std::setfill('0') << cfg.hash();
  const std::string base = cat(timestamp_now(), "-", hash.str().substr(0, 8));
  fs::path dir = fs::path(root) / base;
  for (int n = 2; fs::exists(dir); ++n) dir = fs::path(root) / cat(base, "-", n);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(cat("cannot write ", path.string()));
  os << text;
  if (!os) throw IoError(cat("write failed for ", path.string()));
}

void write_snapshot(const fs::path& run_dir, const RunConfig& cfg, json invocation) {
  write_file(run_dir / "config.txt", cfg.serialize());
  write_file(run_dir / "invocation.json", invocation.dump(2) + "\n");
}

Dataset load_dataset_checked(const std::string& dir, std::ostream& log) {
  IngestResult r = ingest(dir);
  for (const std::string& w : r.warnings) log << "warning: " << w << '\n';
  validate_records(r.dataset.records, r.dataset.manifest);
  return std::move(r.dataset);
}

std::vector<double> parse_fractions(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError(cat("--fractions expects numbers, got '", item, "'"));
    }
  }
  if (out.empty()) throw ConfigError("--fractions is empty");
  return out;
}

json report_json(const MetricReport& rep) { return json::parse(rep.to_json()); }

int run_synth(const SyntheticSpec& spec, const std::string& out_dir) {
  Dataset ds = generate_synthetic(spec);
  save_dataset(ds, out_dir);
  std::ostringstream snapshot;
  snapshot << "synth.classes=" << spec.n_classes << "\n"
           << "synth.correlation=" << spec.modality_correlation << "\n"
           << "synth.c=" << spec.C << "\n"
           << "synth.dim=" << spec.D << "\n"
           << "synth.nh=" << spec.N_h << "\n"
           << "synth.noise=" << spec.noise_std << "\n"
           << "synth.per_class=" << spec.samples_per_class << "\n"
           << "synth.seed=" << spec.seed << "\n"
           << "synth.separation=" << spec.class_separation << "\n";
  write_file(fs::path(out_dir) / "synth.txt", snapshot.str());
  std::cout << "wrote " << ds.records.size() << " samples, " << ds.manifest.n_classes
            << " classes, D=" << ds.manifest.D << " to " << out_dir << '\n';
  return 0;
}

int run_ingest_check(const std::string& dir) {
  IngestResult r = ingest(dir);
  validate_records(r.dataset.records, r.dataset.manifest);
  for (const std::string& w : r.warnings) std::cout << "warning: " << w << '\n';
  int complete = 0;
  for (const SampleRecord& rec : r.dataset.records) complete += rec.complete() ? 1 : 0;
  std::cout << "ok: " << r.dataset.records.size() << " samples (" << complete << " complete), "
            << r.dataset.manifest.n_classes << " classes, D=" << r.dataset.manifest.D
            << ", C=" << r.dataset.manifest.C << ", N_h=" << r.dataset.manifest.N_h << '\n';
  return 0;
}

// Runs `body` with the run directory prepared; errors after the directory
// exists also land there as error.json.
template <typename Body>
int with_run_dir(const CommonArgs& args, const RunConfig& cfg, json invocation, Body body) {
  const fs::path run_dir = create_run_dir(args, cfg);
  try {
    write_snapshot(run_dir, cfg, std::move(invocation));
    cfg.validate();
    body(run_dir);
    std::cout << "run dir: " << run_dir.string() << '\n';
    return 0;
  } catch (const Error& e) {
    json err{{"kind", e.kind()}, {"message", e.what()}, {"exit_code", e.user_error() ? 1 : 2}};
    write_file(run_dir / "error.json", err.dump(2) + "\n");
    throw;
  }
}

int dispatch(int argc, char** argv) {
  CLI::App app{"Multimodal mixture-of-experts classifier with missing-modality support"};
  app.require_subcommand(1);

  // synth
  SyntheticSpec spec;
  std::string synth_out;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset directory");
  synth->add_option("--out", synth_out, "Dataset output directory")->required();
  synth->add_option("--seed", spec.seed, "Generator seed");
  synth->add_option("--classes", spec.n_classes, "Number of classes");
  synth->add_option("--per-class", spec.samples_per_class, "Samples per class");
  synth->add_option("--dim", spec.D, "Embedding dimension");
  synth->add_option("--c", spec.C, "Local rows for image and report modalities");
  synth->add_option("--nh", spec.N_h, "Local rows for the expression modality");
  synth->add_option("--separation", spec.class_separation, "Class centroid separation");
  synth->add_option("--correlation", spec.modality_correlation, "Cross-modality correlation");
  synth->add_option("--noise", spec.noise_std, "Per-feature noise scale");

  // ingest-check
  std::string check_dir;
  CLI::App* check = app.add_subcommand("ingest-check", "Validate a dataset directory");
  check->add_option("dir", check_dir, "Dataset directory")->required();

  // train
  CommonArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "Train one model, holding out one fold");
  add_common(train_cmd, train_args);

  // eval
  CommonArgs eval_args;
  int eval_folds = 5;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Cross-validated evaluation");
  add_common(eval_cmd, eval_args);
  eval_cmd->add_option("--folds", eval_folds, "Fold rotations to run");

  // scenarios
  CommonArgs scen_args;
  int scen_folds = 5;
  std::string fractions_csv = "0.1,0.3,0.5";
  CLI::App* scen_cmd = app.add_subcommand("scenarios", "Missing-modality regime sweep");
  add_common(scen_cmd, scen_args);
  scen_cmd->add_option("--folds", scen_folds, "Fold rotations per cell");
  scen_cmd->add_option("--fractions", fractions_csv, "Masking fractions, comma separated");

  // ablate
  CommonArgs abl_args;
  int abl_folds = 5;
  CLI::App* abl_cmd = app.add_subcommand("ablate", "Component and masked-ladder ablations");
  add_common(abl_cmd, abl_args);
  abl_cmd->add_option("--folds", abl_folds, "Fold rotations per row");

  // export-attn
  CommonArgs attn_args;
  std::string attn_checkpoint;
  std::size_t attn_limit = 0;
  bool attn_images = true;
  CLI::App* attn_cmd = app.add_subcommand("export-attn", "Per-sample interpretability export");
  attn_cmd->add_option("--data", attn_args.data_dir, "Dataset directory")->required();
  attn_cmd->add_option("--checkpoint", attn_checkpoint, "Trained checkpoint file")->required();
  attn_cmd->add_option("--limit", attn_limit, "Export at most this many samples (0 = all)");
  attn_cmd->add_flag("--images,!--no-images", attn_images, "Write heatmap images");
  attn_cmd->add_option("--out", attn_args.runs_root,
                       "Run output root (default $MOSARE_RUNS_DIR, then ./runs)");
  attn_cmd->add_option("--run-dir", attn_args.run_dir, "Exact run directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (synth->parsed()) {
    spec.validate();
    return run_synth(spec, synth_out);
  }
  if (check->parsed()) return run_ingest_check(check_dir);

  if (train_cmd->parsed()) {
    RunConfig cfg = resolve_config(train_args);
    Dataset ds = load_dataset_checked(train_args.data_dir, std::cerr);
    json invocation{{"subcommand", "train"}, {"data", train_args.data_dir}};
    return with_run_dir(train_args, cfg, invocation, [&](const fs::path& run_dir) {
      TrainOptions opts;
      opts.checkpoint_path = (run_dir / "checkpoint.bin").string();
      opts.metrics_path = (run_dir / "metrics.jsonl").string();
      opts.progress = &std::cerr;
      TrainResult r = train(ds, cfg, opts);
      const EpochMetrics& last = r.history.back();
      write_file(run_dir / "summary.json", epoch_metrics_json(last) + "\n");
      std::cout << epoch_metrics_json(last) << '\n';
    });
  }

  if (eval_cmd->parsed()) {
    RunConfig cfg = resolve_config(eval_args);
    Dataset ds = load_dataset_checked(eval_args.data_dir, std::cerr);
    json invocation{{"subcommand", "eval"}, {"data", eval_args.data_dir}, {"folds", eval_folds}};
    return with_run_dir(eval_args, cfg, invocation, [&](const fs::path& run_dir) {
      MetricReport rep = run_cv(ds, cfg, eval_folds, &std::cerr);
      write_file(run_dir / "cv.json", rep.to_json() + "\n");
      write_file(run_dir / "cv.txt", cv_table(rep));
      std::cout << cv_table(rep);
    });
  }

  if (scen_cmd->parsed()) {
    RunConfig cfg = resolve_config(scen_args);
    Dataset ds = load_dataset_checked(scen_args.data_dir, std::cerr);
    const std::vector<double> fractions = parse_fractions(fractions_csv);
    json invocation{{"subcommand", "scenarios"},
                    {"data", scen_args.data_dir},
                    {"folds", scen_folds},
                    {"fractions", fractions}};
    return with_run_dir(scen_args, cfg, invocation, [&](const fs::path& run_dir) {
      std::vector<ScenarioCell> cells = run_scenarios(ds, cfg, fractions, scen_folds, &std::cerr);
      json arr = json::array();
      for (const ScenarioCell& c : cells) arr.push_back(report_json(c.report));
      write_file(run_dir / "scenarios.json", arr.dump(2) + "\n");
      write_file(run_dir / "scenarios.txt", scenario_table(cells));
      std::cout << scenario_table(cells);
    });
  }

  if (abl_cmd->parsed()) {
    RunConfig cfg = resolve_config(abl_args);
    Dataset ds = load_dataset_checked(abl_args.data_dir, std::cerr);
    json invocation{{"subcommand", "ablate"}, {"data", abl_args.data_dir}, {"folds", abl_folds}};
    return with_run_dir(abl_args, cfg, invocation, [&](const fs::path& run_dir) {
      AblationReport rep = run_ablation(ds, cfg, abl_folds, &std::cerr);
      json out;
      out["components"] = json::array();
      out["ladder"] = json::array();
      for (const AblationRow& r : rep.components) {
        out["components"].push_back({{"name", r.name},
                                     {"config_hash", r.config_hash},
                                     {"auc_delta", r.auc_delta},
                                     {"report", report_json(r.report)}});
      }
      for (const AblationRow& r : rep.ladder) {
        out["ladder"].push_back({{"name", r.name},
                                 {"config_hash", r.config_hash},
                                 {"auc_delta", r.auc_delta},
                                 {"report", report_json(r.report)}});
      }
      write_file(run_dir / "ablation.json", out.dump(2) + "\n");
      write_file(run_dir / "ablation.txt", ablation_table(rep));
      std::cout << ablation_table(rep);
    });
  }

  if (attn_cmd->parsed()) {
    Checkpoint ck = load_checkpoint(attn_checkpoint);
    auto model = model_from_checkpoint(ck);
    Dataset ds = load_dataset_checked(attn_args.data_dir, std::cerr);
    json invocation{{"subcommand", "export-attn"},
                    {"data", attn_args.data_dir},
                    {"checkpoint", attn_checkpoint},
                    {"limit", attn_limit}};
    return with_run_dir(attn_args, model->config(), invocation, [&](const fs::path& run_dir) {
      std::vector<const SampleRecord*> records;
      for (const SampleRecord& r : ds.records) {
        records.push_back(&r);
        if (attn_limit > 0 && records.size() == attn_limit) break;
      }
      const std::string images = attn_images ? (run_dir / "heatmaps").string() : std::string{};
      export_attention(*model, records, (run_dir / "attention.jsonl").string(), images);
      std::cout << "exported " << records.size() << " samples\n";
    });
  }

  return 1;  // unreachable: a subcommand is required
}

}  // namespace
}  // namespace mosare

int main(int argc, char** argv) {
  try {
    return mosare::dispatch(argc, argv);
  } catch (const mosare::Error& e) {
    std::cerr << "error (" << e.kind() << "): " << e.what() << '\n';
    return e.user_error() ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
