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

#include "mosare/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "mosare/evaluation.hpp"

namespace mosare {
namespace {

using json = nlohmann::json;

constexpr char kCheckpointMagic[8] = {'M', 'O', 'S', 'A', 'R', 'C', 'K', '1'};

MaskPolicy policy_from_name(const std::string& name) {
  if (name == "balanced") return MaskPolicy::Balanced;
  if (name == "independent") return MaskPolicy::Independent;
  throw ConfigError(cat("unknown mask policy: ", name));
}

}  // namespace

ActiveLosses warmup_schedule(int epoch, const RunConfig& cfg) {
  if (epoch < 0) throw ValueError("warmup_schedule: epoch must be non-negative");
  ActiveLosses act;
  act.symcl = epoch >= cfg.warmup_epochs;
  act.mcl = act.symcl;
  return act;
}

ad::Var ce_loss_rows(ad::Var logits, const std::vector<int>& labels) {
  const Eigen::Index b = logits.rows();
  const Eigen::Index nc = logits.cols();
  if (b == 0) throw ValueError("ce_loss_rows: empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != b)
    throw DimensionError(cat("ce_loss_rows: ", labels.size(), " labels for ", b, " rows"));
  Mat onehot = Mat::Zero(b, nc);
  for (Eigen::Index i = 0; i < b; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= nc) throw ValueError(cat("ce_loss_rows: label ", y, " outside [0, ", nc, ")"));
    onehot(i, y) = 1.0;
  }
  ad::Var picked = ad::total_sum(ad::mul(logits, logits.tape->constant(onehot)));
  ad::Var lse = ad::total_sum(ad::logsumexp_rows(logits));
  return ad::scale(ad::sub(lse, picked), 1.0 / static_cast<double>(b));
}

ClsLosses classification_losses(const ForwardBundle& bundle, const std::vector<int>& labels) {
  ClsLosses out;
  ad::Var g = ce_loss_rows(bundle.logits_global[0], labels);
  ad::Var l = ce_loss_rows(bundle.logits_local[0], labels);
  for (int m = 1; m < kNumModalities; ++m) {
    g = ad::add(g, ce_loss_rows(bundle.logits_global[static_cast<std::size_t>(m)], labels));
    l = ad::add(l, ce_loss_rows(bundle.logits_local[static_cast<std::size_t>(m)], labels));
  }
  out.global = ad::scale(g, 1.0 / kNumModalities);
  out.local = ad::scale(l, 1.0 / kNumModalities);
  out.agg = ce_loss_rows(bundle.logits_agg, labels);
  return out;
}

std::string LossBreakdown::describe() const {
  std::ostringstream os;
  os << "total=" << total << " symcl=" << symcl << " mcl=" << mcl << " rec=" << rec
     << " cls_global=" << cls_global << " cls_local=" << cls_local << " cls_agg=" << cls_agg;
  return os.str();
}

LossTerms total_loss(ad::ModelContext& ctx, MosareModel& model, const ForwardBundle& bundle,
                     const EncodedBatch& batch, int epoch) {
  const RunConfig& cfg = model.config();
  const ActiveLosses act = warmup_schedule(epoch, cfg);
  ad::Tape& tape = ctx.tape();
  LossTerms lt;
  std::vector<ad::Var> weighted;

  ClsLosses cls = classification_losses(bundle, batch.labels);
  lt.breakdown.cls_global = cls.global.scalar();
  lt.breakdown.cls_local = cls.local.scalar();
  lt.breakdown.cls_agg = cls.agg.scalar();
  if (cfg.lambda4 != 0.0)
    weighted.push_back(ad::scale(ad::add(ad::add(cls.global, cls.local), cls.agg), cfg.lambda4));

  if (act.symcl && cfg.use_align && cfg.lambda1 != 0.0) {
    ad::Var agg_g = ad::l2_normalize_rows(bundle.agg_global);
    ad::Var agg_l = ad::l2_normalize_rows(bundle.agg_local);
    std::vector<std::pair<ad::Var, ad::Var>> pairs;
    for (int m = 0; m < kNumModalities; ++m)
      pairs.emplace_back(ad::l2_normalize_rows(bundle.cma_global[static_cast<std::size_t>(m)]), agg_g);
    for (int m = 0; m < kNumModalities; ++m)
      pairs.emplace_back(ad::l2_normalize_rows(bundle.cma_local[static_cast<std::size_t>(m)]), agg_l);
    ad::Var symcl = symcl_total(pairs, cfg.tau_symcl, cfg.symcl_tau_multiplies);
    lt.breakdown.symcl = symcl.scalar();
    weighted.push_back(ad::scale(symcl, cfg.lambda1));
  }

  if (act.mcl && cfg.use_align && cfg.lambda2 != 0.0) {
    ad::Var mcl = mcl_loss_rows(ctx, bundle.x_out, batch.labels, model.gmms(), cfg.tau_mcl);
    lt.breakdown.mcl = mcl.scalar();
    weighted.push_back(ad::scale(mcl, cfg.lambda2));
  }

  if (act.rec && cfg.use_rec && cfg.lambda3 != 0.0) {
    std::array<Mat, kNumModalities> include;
    for (int m = 0; m < kNumModalities; ++m) {
      include[static_cast<std::size_t>(m)] =
          cfg.rec_loss_on_masked ? Mat::Ones(batch.size(), 1)
                                 : bundle.presence_cols[static_cast<std::size_t>(m)];
    }
    ad::Var rec = reconstruction_loss_rows(bundle.cma_global, bundle.rec_global,
                                           bundle.cma_local, bundle.rec_local, include);
    lt.breakdown.rec = rec.scalar();
    weighted.push_back(ad::scale(rec, cfg.lambda3));
  }

  if (weighted.empty()) {
    lt.total = tape.constant(Mat::Zero(1, 1));
  } else {
    lt.total = weighted[0];
    for (std::size_t i = 1; i < weighted.size(); ++i) lt.total = ad::add(lt.total, weighted[i]);
  }
  lt.breakdown.total = lt.total.scalar();
  return lt;
}

AdamOptimizer::AdamOptimizer(ad::ParamStore& store, const RunConfig& cfg)
    : store_(&store),
      lr_(cfg.lr),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay),
      clip_(cfg.grad_clip_norm) {}

double AdamOptimizer::step(const std::vector<std::pair<int, Mat>>& grads) {
  double sq = 0.0;
  for (const auto& [id, g] : grads) {
    if (!all_finite(g))
      throw NumericalError(cat("non-finite gradient for parameter ", store_->at(id).name));
    sq += g.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  const double shrink = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [id, g] : grads) {
    ad::Param& p = store_->at(id);
    const Mat gs = g * shrink;
    p.adam_m = beta1_ * p.adam_m + (1.0 - beta1_) * gs;
    p.adam_v = beta2_ * p.adam_v + (1.0 - beta2_) * gs.cwiseProduct(gs);
    if (weight_decay_ != 0.0) p.value -= lr_ * weight_decay_ * p.value;
    p.value.array() -= lr_ * (p.adam_m.array() / bc1) / ((p.adam_v.array() / bc2).sqrt() + eps_);
  }
  return norm;
}

std::string epoch_metrics_json(const EpochMetrics& m) {
  json j;
  j["epoch"] = m.epoch;
  j["split"] = m.split;
  j["loss"] = {{"total", m.loss.total},     {"symcl", m.loss.symcl},
               {"mcl", m.loss.mcl},         {"rec", m.loss.rec},
               {"cls_global", m.loss.cls_global}, {"cls_local", m.loss.cls_local},
               {"cls_agg", m.loss.cls_agg}};
  j["auc"] = m.auc;
  j["f1"] = m.f1;
  j["acc"] = m.acc;
  return j.dump();
}

namespace {

std::vector<const SampleRecord*> as_pointers(const std::vector<SampleRecord>& records) {
  std::vector<const SampleRecord*> out;
  out.reserve(records.size());
  for (const SampleRecord& r : records) out.push_back(&r);
  return out;
}

// Held-out metrics in eval mode; loss components are sample-weighted means
// over the chunks so they match one whole-split pass.
EpochMetrics evaluate_split(MosareModel& model, const std::vector<const SampleRecord*>& records,
                            int epoch, int batch_size) {
  if (records.empty()) throw ValueError("evaluate_split: empty split");
  const Eigen::Index n = static_cast<Eigen::Index>(records.size());
  Mat probs(n, model.n_classes());
  std::vector<int> labels(records.size());
  LossBreakdown sum;
  for (Eigen::Index start = 0; start < n; start += batch_size) {
    const Eigen::Index len = std::min<Eigen::Index>(batch_size, n - start);
    std::vector<const SampleRecord*> chunk(
        records.begin() + start, records.begin() + start + len);
    EncodedBatch b = model.make_batch(chunk);
    ad::Tape tape;
    ad::ModelContext ctx(tape, model.store(), false);
    ForwardBundle fb = model.forward(ctx, b);
    LossTerms lt = total_loss(ctx, model, fb, b, epoch);
    const double w = static_cast<double>(len);
    sum.symcl += w * lt.breakdown.symcl;
    sum.mcl += w * lt.breakdown.mcl;
    sum.rec += w * lt.breakdown.rec;
    sum.cls_global += w * lt.breakdown.cls_global;
    sum.cls_local += w * lt.breakdown.cls_local;
    sum.cls_agg += w * lt.breakdown.cls_agg;
    sum.total += w * lt.breakdown.total;
    probs.middleRows(start, len) = ad::softmax_rows(fb.logits_agg).val();
    for (Eigen::Index i = 0; i < len; ++i)
      labels[static_cast<std::size_t>(start + i)] = b.labels[static_cast<std::size_t>(i)];
  }
  const double inv = 1.0 / static_cast<double>(n);
  EpochMetrics m;
  m.epoch = epoch;
  m.loss.symcl = sum.symcl * inv;
  m.loss.mcl = sum.mcl * inv;
  m.loss.rec = sum.rec * inv;
  m.loss.cls_global = sum.cls_global * inv;
  m.loss.cls_local = sum.cls_local * inv;
  m.loss.cls_agg = sum.cls_agg * inv;
  m.loss.total = sum.total * inv;
  const std::vector<int> preds = argmax_rows(probs);
  m.acc = accuracy(preds, labels);
  m.f1 = macro_f1(preds, labels);
  m.auc = auc_score(probs, labels);
  return m;
}

void init_prototypes(MosareModel& model, const std::vector<const SampleRecord*>& train_ptrs,
                     const RunConfig& cfg) {
  Mat outs = model.collect_outputs(train_ptrs, cfg.batch_size);
  const int nc = model.n_classes();
  std::vector<Eigen::Index> counts(static_cast<std::size_t>(nc), 0);
  for (const SampleRecord* r : train_ptrs) ++counts[static_cast<std::size_t>(r->label)];
  std::vector<Mat> per_class;
  per_class.reserve(static_cast<std::size_t>(nc));
  for (int c = 0; c < nc; ++c)
    per_class.emplace_back(Mat(counts[static_cast<std::size_t>(c)], outs.cols()));
  std::vector<Eigen::Index> fill(static_cast<std::size_t>(nc), 0);
  for (Eigen::Index i = 0; i < outs.rows(); ++i) {
    const auto c = static_cast<std::size_t>(train_ptrs[static_cast<std::size_t>(i)]->label);
    per_class[c].row(fill[c]++) = outs.row(i);
  }
  model.gmms().initialize(per_class, RngStream::derive_seed(cfg.seed, "gmm_init"));
}

}  // namespace

TrainResult train(const Dataset& dataset, const RunConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (dataset.records.empty()) throw ValueError("train: dataset has no samples");
  const ScenarioKind scenario = scenario_from_name(cfg.scenario);
  const MaskPolicy policy = policy_from_name(cfg.mask_policy);
  const bool masking = cfg.mask_fraction > 0.0;
  const std::uint64_t mask_seed = RngStream::derive_seed(cfg.seed, "mask");

  std::map<std::string, int> folds = dataset.manifest.folds;
  if (folds.empty())
    folds = stratified_folds(dataset.records, 5, RngStream::derive_seed(cfg.seed, "folds"));

  // Masked-test scenarios mask before the split so held-out samples are
  // masked too; unmasked-test scenarios mask only the training subset.
  std::vector<SampleRecord> pool = dataset.records;
  if (masking && scenario == ScenarioKind::MaskedTrainMaskedTest)
    pool = apply_mask(pool, cfg.mask_fraction, mask_seed, policy);

  std::vector<SampleRecord> train_records, eval_records;
  for (const SampleRecord& r : pool) {
    auto it = folds.find(r.sample_id);
    if (it == folds.end())
      throw StratificationError(cat("no fold assignment for sample ", r.sample_id));
    (it->second == cfg.eval_fold ? eval_records : train_records).push_back(r);
  }
  if (eval_records.empty())
    throw StratificationError(cat("eval fold ", cfg.eval_fold, " holds no samples"));
  if (train_records.empty())
    throw StratificationError(cat("every sample sits in eval fold ", cfg.eval_fold));

  if (masking && scenario != ScenarioKind::MaskedTrainMaskedTest)
    train_records = apply_mask(train_records, cfg.mask_fraction, mask_seed, policy);
  if (scenario == ScenarioKind::RemovedTrainUnmaskedTest) {
    std::erase_if(train_records, [](const SampleRecord& r) { return !r.complete(); });
    if (train_records.empty())
      throw MaskingError("removed-train scenario leaves no complete training samples");
  }
  {
    std::vector<Eigen::Index> seen(static_cast<std::size_t>(dataset.manifest.n_classes), 0);
    for (const SampleRecord& r : train_records) ++seen[static_cast<std::size_t>(r.label)];
    for (std::size_t c = 0; c < seen.size(); ++c)
      if (seen[c] == 0)
        throw StratificationError(cat("class ", c, " has no training samples left"));
  }

  auto model = std::make_unique<MosareModel>(cfg, dataset.manifest);
  if (cfg.encoder_mode == "raw")
    model->encoders().fit_corpus_centroids(train_records,
                                           RngStream::derive_seed(cfg.seed, "corpus"));

  const std::vector<const SampleRecord*> train_ptrs = as_pointers(train_records);
  const std::vector<const SampleRecord*> eval_ptrs = as_pointers(eval_records);

  RngStream shuffle_rng = RngStream::derive(cfg.seed, "shuffle");
  RngStream dropout_rng = RngStream::derive(cfg.seed, "dropout");
  AdamOptimizer adam(model->store(), cfg);

  std::ofstream metrics_out;
  if (!opts.metrics_path.empty()) {
    metrics_out.open(opts.metrics_path, std::ios::trunc);
    if (!metrics_out) throw IoError(cat("cannot write metrics log: ", opts.metrics_path));
  }

  const bool align_runs = cfg.use_align && cfg.lambda2 != 0.0;
  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const ActiveLosses act = warmup_schedule(epoch, cfg);
    if (align_runs && act.mcl && !model->gmms().initialized())
      init_prototypes(*model, train_ptrs, cfg);

    std::vector<std::size_t> order(train_ptrs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(shuffle_rng.uniform_int(i));
      std::swap(order[i - 1], order[j]);
    }

    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t len =
          std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - start);
      std::vector<const SampleRecord*> chunk(len);
      for (std::size_t i = 0; i < len; ++i) chunk[i] = train_ptrs[order[start + i]];

      EncodedBatch b = model->make_batch(chunk);
      ad::Tape tape;
      ad::ModelContext ctx(tape, model->store(), true);
      ctx.dropout_rng = &dropout_rng;
      ForwardBundle fb = model->forward(ctx, b);
      LossTerms lt = total_loss(ctx, *model, fb, b, epoch);
      if (!std::isfinite(lt.breakdown.total))
        throw NumericalError(cat("non-finite loss at epoch ", epoch, " batch ", batch_index,
                                 ": ", lt.breakdown.describe()));
      tape.backward(lt.total);
      try {
        adam.step(ctx.collect_grads());
      } catch (const NumericalError& e) {
        throw NumericalError(cat("epoch ", epoch, " batch ", batch_index, ": ", e.what()));
      }
      if (align_runs && act.mcl)
        model->gmms().update(fb.x_out.val(), b.labels, cfg.pure_em ? 0.0 : cfg.gmm_momentum,
                             cfg.pure_em ? 0 : cfg.sinkhorn_iters, cfg.sinkhorn_reg);
    }

    EpochMetrics m = evaluate_split(*model, eval_ptrs, epoch, cfg.batch_size);
    if (metrics_out.is_open()) metrics_out << epoch_metrics_json(m) << '\n' << std::flush;
    if (opts.progress)
      *opts.progress << "epoch " << epoch << " loss " << m.loss.total << " auc " << m.auc
                     << " acc " << m.acc << '\n';
    result.history.push_back(std::move(m));
  }

  if (!opts.checkpoint_path.empty()) {
    std::map<std::string, std::string> rng_state{{"shuffle", shuffle_rng.state()},
                                                 {"dropout", dropout_rng.state()}};
    save_checkpoint(opts.checkpoint_path, *model, rng_state);
    // Hand back the model as persisted so a later load reproduces it exactly.
    result.model = model_from_checkpoint(load_checkpoint(opts.checkpoint_path));
  } else {
    result.model = std::move(model);
  }
  return result;
}

namespace {

void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u64(std::ostream& os, std::uint64_t v) { write_bytes(os, &v, sizeof v); }

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  write_bytes(os, s.data(), s.size());
}

void write_mat_f32(std::ostream& os, const Mat& m) {
  write_u64(os, static_cast<std::uint64_t>(m.rows()));
  write_u64(os, static_cast<std::uint64_t>(m.cols()));
  std::vector<float> buf(static_cast<std::size_t>(m.size()));
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) buf[k++] = static_cast<float>(m(i, j));
  write_bytes(os, buf.data(), buf.size() * sizeof(float));
}

void read_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw ParseError("checkpoint truncated");
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  read_bytes(is, &v, sizeof v);
  return v;
}

std::string read_string(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  if (n > (1u << 20)) throw ParseError("checkpoint string length implausible");
  std::string s(static_cast<std::size_t>(n), '\0');
  read_bytes(is, s.data(), s.size());
  return s;
}

Mat read_mat_f32(std::istream& is) {
  const auto rows = static_cast<Eigen::Index>(read_u64(is));
  const auto cols = static_cast<Eigen::Index>(read_u64(is));
  if (rows < 0 || cols < 0 || rows * cols > (1 << 28))
    throw ParseError("checkpoint tensor shape implausible");
  std::vector<float> buf(static_cast<std::size_t>(rows * cols));
  read_bytes(is, buf.data(), buf.size() * sizeof(float));
  Mat m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<double>(buf[k++]);
  return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const MosareModel& model,
                     const std::map<std::string, std::string>& rng_state) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(cat("cannot write checkpoint: ", path));
  write_bytes(os, kCheckpointMagic, sizeof kCheckpointMagic);

  const DatasetManifest& mf = model.manifest();
  json header;
  header["config"] = model.config().to_map();
  header["manifest"] = {{"n_samples", mf.n_samples}, {"n_classes", mf.n_classes},
                        {"D", mf.D},                 {"C", mf.C},
                        {"N_h", mf.N_h},             {"provenance", mf.provenance}};
  write_string(os, header.dump());

  std::vector<std::pair<std::string, const Mat*>> tensors;
  for (const ad::Param& p : model.store().all()) tensors.emplace_back(p.name, &p.value);
  if (model.encoders().wsi_centroids().size() > 0)
    tensors.emplace_back("enc.wsi.centroids", &model.encoders().wsi_centroids());
  if (model.encoders().rpt_centroids().size() > 0)
    tensors.emplace_back("enc.rpt.centroids", &model.encoders().rpt_centroids());
  write_u64(os, tensors.size());
  for (const auto& [name, mat] : tensors) {
    write_string(os, name);
    write_mat_f32(os, *mat);
  }

  const PrototypeGmms& gmms = model.gmms();
  write_u64(os, static_cast<std::uint64_t>(gmms.n_classes()));
  for (int c = 0; c < gmms.n_classes(); ++c) {
    const ClassGmm& g = gmms.gmm(c);
    const std::uint8_t init = g.initialized() ? 1 : 0;
    write_bytes(os, &init, 1);
    if (!init) continue;
    write_mat_f32(os, Mat(g.weights));
    write_mat_f32(os, g.means);
    write_mat_f32(os, g.vars);
  }

  write_u64(os, rng_state.size());
  for (const auto& [k, v] : rng_state) {
    write_string(os, k);
    write_string(os, v);
  }
  if (!os) throw IoError(cat("write failed for checkpoint: ", path));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(cat("cannot open checkpoint: ", path));
  char magic[8];
  read_bytes(is, magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw ParseError(cat("not a checkpoint file: ", path));

  Checkpoint ck;
  json header;
  try {
    header = json::parse(read_string(is));
  } catch (const json::exception& e) {
    throw ParseError(cat("checkpoint header is not valid JSON: ", e.what()));
  }
  if (!header.contains("config") || !header.contains("manifest"))
    throw ParseError("checkpoint header lacks config or manifest");
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : header["config"].items()) kv[k] = v.get<std::string>();
  ck.config = RunConfig::from_map(kv);
  const json& mj = header["manifest"];
  ck.manifest.n_samples = mj.value("n_samples", 0);
  ck.manifest.n_classes = mj.value("n_classes", 0);
  ck.manifest.D = mj.value("D", 0);
  ck.manifest.C = mj.value("C", 16);
  ck.manifest.N_h = mj.value("N_h", 16);
  ck.manifest.provenance = mj.value("provenance", std::string{});

  const std::uint64_t n_tensors = read_u64(is);
  ck.tensors.reserve(n_tensors);
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    std::string name = read_string(is);
    ck.tensors.emplace_back(std::move(name), read_mat_f32(is));
  }

  const std::uint64_t n_classes = read_u64(is);
  bool any_gmm = false;
  std::vector<ClassGmm> gmm_state(static_cast<std::size_t>(n_classes));
  for (std::uint64_t c = 0; c < n_classes; ++c) {
    std::uint8_t init = 0;
    read_bytes(is, &init, 1);
    if (!init) continue;
    any_gmm = true;
    ClassGmm& g = gmm_state[static_cast<std::size_t>(c)];
    g.weights = Vec(read_mat_f32(is));
    g.means = read_mat_f32(is);
    g.vars = read_mat_f32(is);
  }
  if (any_gmm) ck.gmm_state = std::move(gmm_state);

  const std::uint64_t n_rng = read_u64(is);
  for (std::uint64_t i = 0; i < n_rng; ++i) {
    std::string k = read_string(is);
    ck.rng_state[k] = read_string(is);
  }
  is.peek();
  if (!is.eof()) throw ParseError(cat("trailing bytes in checkpoint: ", path));
  return ck;
}

std::unique_ptr<MosareModel> model_from_checkpoint(const Checkpoint& ck) {
  auto model = std::make_unique<MosareModel>(ck.config, ck.manifest);
  Mat wsi_centroids, rpt_centroids;
  std::size_t applied = 0;
  for (const auto& [name, mat] : ck.tensors) {
    if (name == "enc.wsi.centroids") {
      wsi_centroids = mat;
      continue;
    }
    if (name == "enc.rpt.centroids") {
      rpt_centroids = mat;
      continue;
    }
    if (!model->store().has(name))
      throw ParseError(cat("checkpoint tensor ", name, " has no slot in this architecture"));
    ad::Param& p = model->store().at(name);
    if (p.value.rows() != mat.rows() || p.value.cols() != mat.cols())
      throw DimensionError(cat("checkpoint tensor ", name, " is ", mat.rows(), "x", mat.cols(),
                               ", expected ", p.value.rows(), "x", p.value.cols()));
    p.value = mat;
    ++applied;
  }
  if (applied != model->store().size())
    throw ParseError(cat("checkpoint supplies ", applied, " tensors, architecture has ",
                         model->store().size()));
  if (wsi_centroids.size() > 0 || rpt_centroids.size() > 0)
    model->encoders().set_centroids(std::move(wsi_centroids), std::move(rpt_centroids));

  if (!ck.gmm_state.empty()) {
    if (static_cast<int>(ck.gmm_state.size()) != model->gmms().n_classes())
      throw DimensionError(cat("checkpoint mixture state covers ", ck.gmm_state.size(),
                               " classes, architecture has ", model->gmms().n_classes()));
    for (int c = 0; c < model->gmms().n_classes(); ++c) {
      const ClassGmm& g = ck.gmm_state[static_cast<std::size_t>(c)];
      if (!g.initialized()) continue;
      if (g.means.rows() != model->gmms().n_components() ||
          g.means.cols() != model->gmms().dim())
        throw DimensionError(cat("checkpoint mixture for class ", c, " has shape ",
                                 g.means.rows(), "x", g.means.cols()));
      model->gmms().gmm_mutable(c) = g;
    }
  }
  return model;
}

}  // namespace mosare
