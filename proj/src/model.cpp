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

#include "mosare/model.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "mosare/rng.hpp"

namespace mosare {

namespace {

std::vector<ExpertBank> build_local_banks(ad::ParamStore& store, const RunConfig& cfg,
                                          int d, RngStream& init) {
  std::vector<ExpertBank> banks;
  banks.reserve(kNumModalities);
  for (int m = 0; m < static_cast<int>(kNumModalities); ++m)
    banks.emplace_back(store, cat("moe.local.", modality_name(m)), d, d, cfg.n_experts,
                       cfg.top_k, cfg.renormalize_gate, init);
  return banks;
}

std::vector<LocalSelector> build_selectors(ad::ParamStore& store, int d, RngStream& init) {
  std::vector<LocalSelector> sel;
  sel.reserve(kNumModalities);
  for (int m = 0; m < static_cast<int>(kNumModalities); ++m)
    sel.emplace_back(store, cat("sel.", modality_name(m)), d, init);
  return sel;
}

void add_head(ad::ParamStore& store, const std::string& prefix, int d, int n_classes,
              RngStream& init) {
  store.add(prefix + ".w", init.normal_matrix(d, n_classes, 1.0 / std::sqrt(d)));
  store.add(prefix + ".b", Mat::Zero(1, n_classes));
}

// Block-diagonal mean-pooling matrix: row b averages the b-th block of
// `block` consecutive rows.
Mat mean_pool_matrix(Eigen::Index n_blocks, Eigen::Index block) {
  Mat pool = Mat::Zero(n_blocks, n_blocks * block);
  for (Eigen::Index b = 0; b < n_blocks; ++b)
    pool.block(b, b * block, 1, block).setConstant(1.0 / static_cast<double>(block));
  return pool;
}

}  // namespace

MosareModel::MosareModel(const RunConfig& cfg, const DatasetManifest& manifest)
    : cfg_(cfg),
      manifest_(manifest),
      store_(),
      encoders_([&]() -> EncoderSet {
        RngStream enc_init = RngStream::derive(cfg.seed, "init_encoders");
        return EncoderSet(store_, manifest, cfg.resolved_d_attn(manifest.D), cfg.dropout,
                          enc_init);
      }()),
      local_banks_([&]() {
        RngStream init = RngStream::derive(cfg.seed, "init_local_moe");
        return build_local_banks(store_, cfg, manifest.D, init);
      }()),
      selectors_([&]() {
        RngStream init = RngStream::derive(cfg.seed, "init_selectors");
        return build_selectors(store_, manifest.D, init);
      }()),
      final_bank_([&]() -> std::unique_ptr<ExpertBank> {
        if (!cfg.use_moe) return nullptr;
        RngStream init = RngStream::derive(cfg.seed, "init_final_moe");
        const int in_dim = cfg.final_moe_concat ? 6 * manifest.D : manifest.D;
        return std::make_unique<ExpertBank>(store_, "moe.final", in_dim, manifest.D,
                                            cfg.n_experts, cfg.top_k, cfg.renormalize_gate,
                                            init);
      }()),
      decouplers_([&]() -> DecouplerSet {
        RngStream init = RngStream::derive(cfg.seed, "init_decouplers");
        return DecouplerSet(store_, "rec", manifest.D, cfg.rec_share_heads, init);
      }()),
      gmms_(manifest.n_classes, cfg.m_comp, manifest.D, cfg.var_floor) {
  cfg_.validate();
  if (manifest_.n_classes < 2) throw ConfigError("MosareModel: need at least two classes");
  if (cfg_.k_loc > manifest_.C || cfg_.k_loc > manifest_.N_h)
    throw ConfigError("MosareModel: model.k_loc exceeds a modality's local row count");

  RngStream head_init = RngStream::derive(cfg_.seed, "init_heads");
  const int d = manifest_.D, nc = manifest_.n_classes;
  if (cfg_.per_modality_heads) {
    for (int m = 0; m < static_cast<int>(kNumModalities); ++m) {
      add_head(store_, cat("cls.g.", modality_name(m)), d, nc, head_init);
      add_head(store_, cat("cls.l.", modality_name(m)), d, nc, head_init);
    }
  } else {
    add_head(store_, "cls.g", d, nc, head_init);
    add_head(store_, "cls.l", d, nc, head_init);
  }
  add_head(store_, "cls.agg", d, nc, head_init);
}

EncodedBatch MosareModel::make_batch(const std::vector<const SampleRecord*>& records) const {
  if (records.empty()) throw ValueError("make_batch: empty batch");
  const Eigen::Index b = static_cast<Eigen::Index>(records.size());
  EncodedBatch batch;
  batch.presence = Mat::Zero(b, kNumModalities);
  batch.labels.resize(records.size());
  batch.sources = records;

  const bool raw = cfg_.encoder_mode == "raw";
  if (!raw) {
    for (int m = 0; m < static_cast<int>(kNumModalities); ++m) {
      batch.globals[static_cast<std::size_t>(m)] = Mat::Zero(b, manifest_.D);
      batch.locals[static_cast<std::size_t>(m)] =
          Mat::Zero(b * manifest_.local_rows(m), manifest_.D);
    }
  }
  for (Eigen::Index i = 0; i < b; ++i) {
    const SampleRecord& rec = *records[static_cast<std::size_t>(i)];
    batch.labels[static_cast<std::size_t>(i)] = rec.label;
    for (int m = 0; m < static_cast<int>(kNumModalities); ++m)
      batch.presence(i, m) = rec.modality[static_cast<std::size_t>(m)].present ? 1.0 : 0.0;
    if (raw) continue;
    EncodedSample enc = encoders_.encode_precomputed(rec);
    for (int m = 0; m < static_cast<int>(kNumModalities); ++m) {
      const auto mm = static_cast<std::size_t>(m);
      batch.globals[mm].row(i) = enc.global[mm].transpose();
      const Eigen::Index rows = manifest_.local_rows(m);
      batch.locals[mm].block(i * rows, 0, rows, manifest_.D) = enc.local[mm];
    }
  }
  return batch;
}

std::array<ad::Var, kNumModalities> MosareModel::batch_globals(
    ad::ModelContext& ctx, const EncodedBatch& batch,
    std::array<ad::Var, kNumModalities>& locals) {
  std::array<ad::Var, kNumModalities> globals;
  if (cfg_.encoder_mode != "raw") {
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      globals[m] = ctx.tape().constant(batch.globals[m]);
      locals[m] = ctx.tape().constant(batch.locals[m]);
    }
    return globals;
  }
  std::array<std::vector<ad::Var>, kNumModalities> grows, lrows;
  for (const SampleRecord* rec : batch.sources) {
    EncoderSet::VarSample s = encoders_.encode_raw(ctx, *rec);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      grows[m].push_back(s.global[m]);
      lrows[m].push_back(s.local[m]);
    }
  }
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    globals[m] = ad::concat_rows(grows[m]);
    locals[m] = ad::concat_rows(lrows[m]);
  }
  return globals;
}

ad::Var MosareModel::head_logits(ad::ModelContext& ctx, ad::Var x, const std::string& head,
                                 int modality) const {
  const std::string prefix =
      cfg_.per_modality_heads && modality >= 0 ? cat(head, ".", modality_name(modality)) : head;
  return ad::affine(x, ctx.use(prefix + ".w"), ctx.use(prefix + ".b"));
}

ForwardBundle MosareModel::forward(ad::ModelContext& ctx, const EncodedBatch& batch) {
  const Eigen::Index b = batch.size();
  if (b == 0) throw ValueError("forward: empty batch");
  ForwardBundle out;

  std::array<ad::Var, kNumModalities> locals;
  std::array<ad::Var, kNumModalities> globals = batch_globals(ctx, batch, locals);
  for (std::size_t m = 0; m < kNumModalities; ++m)
    out.presence_cols[m] = batch.presence.col(static_cast<Eigen::Index>(m));

  // Local rows to one key vector per sample: expert transform plus hard
  // top-k selection, or a plain mean when the mixture is disabled.
  std::array<ad::Var, kNumModalities> local_vecs;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const int rows = manifest_.local_rows(static_cast<int>(m));
    if (cfg_.use_moe) {
      ExpertBank::Routed routed = local_banks_[m].route(ctx, locals[m]);
      LocalSelector::Selection sel =
          selectors_[m].select_blocks(ctx, routed.out, rows, cfg_.k_loc);
      local_vecs[m] = sel.selected_mean;
    } else {
      local_vecs[m] = ad::matmul_const_left(mean_pool_matrix(b, rows), locals[m]);
    }
  }

  if (cfg_.use_cma) {
    CmaRows g = cma_rows(globals);
    CmaRows l = cma_rows(local_vecs);
    out.cma_global = g.per_modality;
    out.agg_global = g.agg;
    out.cma_local = l.per_modality;
    out.agg_local = l.agg;
  } else {
    out.cma_global = globals;
    out.cma_local = local_vecs;
    out.agg_global = ad::add(ad::add(globals[0], globals[1]), globals[2]);
    out.agg_local = ad::add(ad::add(local_vecs[0], local_vecs[1]), local_vecs[2]);
  }

  if (cfg_.use_rec) {
    DecouplerSet::Decoupled dec = decouplers_.decouple(ctx, out.agg_global, out.agg_local);
    out.rec_global = dec.global;
    out.rec_local = dec.local;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      ad::Var pres = ctx.tape().constant(out.presence_cols[m]);
      ad::Var absent = ctx.tape().constant(Mat::Ones(b, 1) - out.presence_cols[m]);
      out.final_global[m] = ad::add(ad::mul_colvec(out.cma_global[m], pres),
                                    ad::mul_colvec(out.rec_global[m], absent));
      out.final_local[m] = ad::add(ad::mul_colvec(out.cma_local[m], pres),
                                   ad::mul_colvec(out.rec_local[m], absent));
    }
  } else {
    out.final_global = out.cma_global;
    out.final_local = out.cma_local;
  }

  std::array<ad::Var, 6> finals = {out.final_global[0], out.final_global[1],
                                   out.final_global[2], out.final_local[0],
                                   out.final_local[1],  out.final_local[2]};
  if (cfg_.use_moe && cfg_.final_moe_concat) {
    std::vector<ad::Var> parts(finals.begin(), finals.end());
    out.x_out = final_bank_->route(ctx, ad::concat_cols(parts)).out;
  } else if (cfg_.use_moe) {
    ad::Var acc;
    for (const ad::Var& f : finals) {
      ad::Var routed = final_bank_->route(ctx, f).out;
      acc = acc.valid() ? ad::add(acc, routed) : routed;
    }
    out.x_out = acc;
  } else {
    ad::Var acc;
    for (const ad::Var& f : finals) acc = acc.valid() ? ad::add(acc, f) : f;
    out.x_out = ad::scale(acc, 1.0 / 6.0);
  }

  for (std::size_t m = 0; m < kNumModalities; ++m) {
    out.logits_global[m] =
        head_logits(ctx, out.final_global[m], "cls.g", static_cast<int>(m));
    out.logits_local[m] =
        head_logits(ctx, out.final_local[m], "cls.l", static_cast<int>(m));
  }
  out.logits_agg = head_logits(ctx, out.x_out, "cls.agg", -1);
  return out;
}

Mat MosareModel::predict_proba(const std::vector<const SampleRecord*>& records,
                               int batch_size) {
  if (batch_size < 1) throw ConfigError("predict_proba: batch size must be positive");
  Mat probs(static_cast<Eigen::Index>(records.size()), manifest_.n_classes);
  for (std::size_t start = 0; start < records.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(records.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const SampleRecord*> chunk(records.begin() + static_cast<std::ptrdiff_t>(start),
                                           records.begin() + static_cast<std::ptrdiff_t>(stop));
    ad::Tape tape;
    ad::ModelContext ctx(tape, store_, false);
    ForwardBundle bundle = forward(ctx, make_batch(chunk));
    Mat block = ad::softmax_rows(bundle.logits_agg).val();
    probs.block(static_cast<Eigen::Index>(start), 0, block.rows(), block.cols()) = block;
  }
  return probs;
}

Mat MosareModel::collect_outputs(const std::vector<const SampleRecord*>& records,
                                 int batch_size) {
  if (batch_size < 1) throw ConfigError("collect_outputs: batch size must be positive");
  Mat outs(static_cast<Eigen::Index>(records.size()), manifest_.D);
  for (std::size_t start = 0; start < records.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(records.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const SampleRecord*> chunk(records.begin() + static_cast<std::ptrdiff_t>(start),
                                           records.begin() + static_cast<std::ptrdiff_t>(stop));
    ad::Tape tape;
    ad::ModelContext ctx(tape, store_, false);
    ForwardBundle bundle = forward(ctx, make_batch(chunk));
    outs.block(static_cast<Eigen::Index>(start), 0, bundle.x_out.val().rows(),
               manifest_.D) = bundle.x_out.val();
  }
  return outs;
}

SampleExplanation MosareModel::explain(const SampleRecord& record) const {
  SampleExplanation ex;
  EncodedSample enc = cfg_.encoder_mode == "raw"
                          ? encoders_.encode_raw_values(store_, record)
                          : encoders_.encode_precomputed(record);

  if (record.patch_embeddings.rows() > 0)
    ex.wsi_patch_attention = encoders_.wsi_attention(store_, record);

  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const std::size_t p1 = (m + 1) % kNumModalities, p2 = (m + 2) % kNumModalities;
    ex.cma_cross_global[m] = {std::abs(enc.global[m].dot(enc.global[p1])),
                              std::abs(enc.global[m].dot(enc.global[p2]))};
    if (!cfg_.use_moe) {
      const int rows = manifest_.local_rows(static_cast<int>(m));
      ex.local_picks[m].resize(static_cast<std::size_t>(rows));
      for (int r = 0; r < rows; ++r) ex.local_picks[m][static_cast<std::size_t>(r)] = r;
      continue;
    }
    std::vector<int> picked;
    select_local(store_, enc.local[m], selectors_[m], local_banks_[m], cfg_.k_loc, &picked);
    ex.local_picks[m] = std::move(picked);
    for (Eigen::Index r = 0; r < enc.local[m].rows(); ++r) {
      GateDecision gd;
      local_banks_[m].transform_values(store_, enc.local[m].row(r).transpose(), &gd);
      ex.local_experts[m].push_back(std::move(gd));
    }
  }
  return ex;
}

}  // namespace mosare
