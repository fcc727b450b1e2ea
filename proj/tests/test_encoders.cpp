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

#include <cmath>

#include "doctest.h"
#include "mosare/autodiff.hpp"
#include "oracles.hpp"

using namespace mosare;

namespace {

DatasetManifest tiny_manifest(int d = 8, int c = 4, int n_h = 3) {
  DatasetManifest m;
  m.n_samples = 0;
  m.n_classes = 2;
  m.D = d;
  m.C = c;
  m.N_h = n_h;
  m.provenance = "synthetic";
  return m;
}

}  // namespace

TEST_CASE("abmil pooling basics") {
  ad::ParamStore store;
  RngStream init(7);
  AbmilPooler pool(store, "abmil", 8, 2, init);
  RngStream rng(11);

  SUBCASE("identical instances collapse to that instance") {
    Vec v = rng.normal_vector(8);
    Mat bag = v.transpose().replicate(6, 1);
    Vec weights;
    Vec out = pool.pool_values(store, bag, &weights);
    CHECK((out - v).norm() < 1e-12);
    for (int i = 0; i < 6; ++i) CHECK(weights(i) == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
  }

  SUBCASE("singleton bag passes through with weight one") {
    Mat bag = oracle::rand_mat(rng, 1, 8);
    Vec weights;
    Vec out = pool.pool_values(store, bag, &weights);
    CHECK((out - bag.row(0).transpose()).norm() < 1e-14);
    CHECK(weights(0) == doctest::Approx(1.0));
  }

  SUBCASE("output stays inside the per-coordinate hull") {
    Mat bag = oracle::rand_mat(rng, 15, 8);
    Vec out = pool.pool_values(store, bag);
    for (int d = 0; d < 8; ++d) {
      CHECK(out(d) >= bag.col(d).minCoeff() - 1e-12);
      CHECK(out(d) <= bag.col(d).maxCoeff() + 1e-12);
    }
  }

  SUBCASE("weights are a distribution and pooling ignores instance order") {
    Mat bag = oracle::rand_mat(rng, 9, 8);
    Vec weights;
    Vec out = pool.pool_values(store, bag, &weights);
    CHECK(weights.minCoeff() >= 0.0);
    CHECK(weights.sum() == doctest::Approx(1.0).epsilon(1e-12));

    std::vector<int> perm = {4, 0, 8, 2, 6, 1, 7, 3, 5};
    Mat shuffled(9, 8);
    for (int i = 0; i < 9; ++i) shuffled.row(i) = bag.row(perm[static_cast<std::size_t>(i)]);
    Vec out2 = pool.pool_values(store, shuffled);
    CHECK((out - out2).norm() < 1e-6);
  }

  SUBCASE("empty bag is rejected") {
    Mat empty(0, 8);
    CHECK_THROWS_AS(pool.pool_values(store, empty), ValueError);
  }

  SUBCASE("tape forward matches value forward and gradients match finite differences") {
    Mat bag = oracle::rand_mat(rng, 5, 8);
    ad::Tape tape;
    ad::ModelContext ctx(tape, store, false);
    ad::Var bag_var = tape.leaf(bag);
    ad::Var pooled = pool.pool(ctx, bag_var);
    CHECK((pooled.val().row(0).transpose() - pool.pool_values(store, bag)).norm() < 1e-12);

    Mat weighting = oracle::rand_mat(rng, 1, 8);
    auto loss_value = [&](const Mat& b) {
      ad::Tape t2;
      ad::ModelContext c2(t2, store, false);
      ad::Var out = pool.pool(c2, t2.leaf(b));
      return ad::total_sum(ad::mul_const(out, weighting)).val()(0, 0);
    };
    ad::Var loss = ad::total_sum(ad::mul_const(pooled, weighting));
    tape.backward(loss);
    Mat analytic = bag_var.grad();
    Mat probe = bag;
    double err = oracle::fd_max_rel_err([&] { return loss_value(probe); }, probe, analytic);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("corpus k-means recovers separated blobs") {
  RngStream rng(21);
  const int c = 4, d = 5, per = 40;
  Mat truth = 10.0 * oracle::rand_mat(rng, c, d);
  Mat points(c * per, d);
  for (int k = 0; k < c; ++k)
    for (int i = 0; i < per; ++i)
      points.row(k * per + i) = truth.row(k) + 0.05 * rng.normal_vector(d).transpose();

  Mat centroids = fit_corpus_kmeans(points, c, 123);
  CHECK(oracle::best_match_cost(centroids, truth) < 0.1 * 0.05 + 0.05);

  SUBCASE("deterministic under the same seed") {
    Mat again = fit_corpus_kmeans(points, c, 123);
    CHECK((centroids - again).norm() == 0.0);
  }

  SUBCASE("as many clusters as distinct points returns the points") {
    Mat distinct = oracle::rand_mat(rng, 3, d);
    Mat repeated(9, d);
    for (int i = 0; i < 9; ++i) repeated.row(i) = distinct.row(i % 3);
    Mat out = fit_corpus_kmeans(repeated, 3, 5);
    CHECK(oracle::best_match_cost(out, distinct) < 1e-12);
  }

  SUBCASE("degenerate corpora are rejected") {
    Mat repeated = points.row(0).replicate(10, 1);
    CHECK_THROWS_AS(fit_corpus_kmeans(repeated, 2, 0), ValueError);
    Mat few = oracle::rand_mat(rng, 2, d);
    CHECK_THROWS_AS(fit_corpus_kmeans(few, 3, 0), ValueError);
  }
}

TEST_CASE("per-bag mixture fit") {
  RngStream rng(33);
  const int c = 3, d = 4;
  Mat centroids = 8.0 * oracle::rand_mat(rng, c, d);

  SUBCASE("bag pinned at the centroids is a fixed point") {
    Mat bag(c * 20, d);
    for (int k = 0; k < c; ++k)
      for (int i = 0; i < 20; ++i) bag.row(k * 20 + i) = centroids.row(k);
    LocalGmmFit fit = fit_local_gmm(bag, centroids);
    CHECK((fit.means - centroids).cwiseAbs().maxCoeff() < 1e-6);
  }

  SUBCASE("bag smaller than the component count keeps empty components at init") {
    Mat bag(2, d);
    bag.row(0) = centroids.row(0);
    bag.row(1) = centroids.row(1);
    LocalGmmFit fit = fit_local_gmm(bag, centroids);
    CHECK(fit.means.rows() == c);
    CHECK((fit.means.row(2) - centroids.row(2)).norm() < 1e-9);
  }

  SUBCASE("log-likelihood never decreases") {
    Mat bag = oracle::rand_mat(rng, 30, d) + Mat::Ones(30, d);
    LocalGmmFit fit = fit_local_gmm(bag, oracle::rand_mat(rng, c, d));
    REQUIRE(fit.log_likelihoods.size() >= 2);
    for (std::size_t i = 1; i < fit.log_likelihoods.size(); ++i) {
      CHECK(fit.log_likelihoods[i] >= fit.log_likelihoods[i - 1] - 1e-8);
    }
  }

  SUBCASE("empty bag is rejected") {
    Mat empty(0, d);
    CHECK_THROWS_AS(fit_local_gmm(empty, centroids), ValueError);
  }
}

TEST_CASE("global mlp") {
  ad::ParamStore store;
  RngStream init(5);
  GlobalMlp mlp(store, "mlp", 6, 4, 0.2, init);
  RngStream rng(6);

  SUBCASE("zero input with zero biases maps to zero") {
    Mat zero = Mat::Zero(2, 6);
    Mat out = mlp.forward_values(store, zero);
    CHECK(out.cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("eval mode is deterministic and matches the tape") {
    Mat x = oracle::rand_mat(rng, 3, 6);
    Mat a = mlp.forward_values(store, x);
    Mat b = mlp.forward_values(store, x);
    CHECK((a - b).norm() == 0.0);

    ad::Tape tape;
    ad::ModelContext ctx(tape, store, false);
    ad::Var out = mlp.forward(ctx, tape.constant(x));
    CHECK((out.val() - a).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("dropout only perturbs training mode") {
    Mat x = oracle::rand_mat(rng, 2, 6);
    Mat eval_out = mlp.forward_values(store, x);
    RngStream drop(99);
    ad::Tape tape;
    ad::ModelContext ctx(tape, store, true);
    ctx.dropout_rng = &drop;
    Mat train_out = mlp.forward(ctx, tape.constant(x)).val();
    CHECK((train_out - eval_out).cwiseAbs().maxCoeff() > 1e-8);
  }

  SUBCASE("input gradient matches finite differences") {
    Mat x = oracle::rand_mat(rng, 2, 6);
    Mat weighting = oracle::rand_mat(rng, 2, 4);
    auto loss_value = [&](const Mat& in) {
      ad::Tape t;
      ad::ModelContext c(t, store, false);
      return ad::total_sum(ad::mul_const(mlp.forward(c, t.leaf(in)), weighting)).val()(0, 0);
    };
    ad::Tape tape;
    ad::ModelContext ctx(tape, store, false);
    ad::Var xv = tape.leaf(x);
    ad::Var loss = ad::total_sum(ad::mul_const(mlp.forward(ctx, xv), weighting));
    tape.backward(loss);
    Mat analytic = xv.grad();
    Mat probe = x;
    double err = oracle::fd_max_rel_err([&] { return loss_value(probe); }, probe, analytic);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("multi-head local attention") {
  ad::ParamStore store;
  RngStream init(9);
  const int heads = 3, d_tok = 5, d_out = 4;
  MultiHeadLocalAttention attn(store, "attn", heads, d_tok, d_out, 2, init);
  RngStream rng(10);

  SUBCASE("single token bypasses the attention average") {
    Mat t = oracle::rand_mat(rng, 1, d_tok);
    Mat out = attn.forward_values(store, t);
    for (int j = 0; j < heads; ++j) {
      Mat w = store.at("attn.h" + std::to_string(j) + ".W").value;
      CHECK((out.row(j) - t.row(0) * w).norm() < 1e-12);
    }
  }

  SUBCASE("identical tokens behave like a single token") {
    Vec t = rng.normal_vector(d_tok);
    Mat bag = t.transpose().replicate(7, 1);
    Mat out = attn.forward_values(store, bag);
    Mat single = attn.forward_values(store, t.transpose());
    CHECK((out - single).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("per-head weights form distributions") {
    Mat bag = oracle::rand_mat(rng, 6, d_tok);
    Mat alpha = attn.attention_values(store, bag);
    REQUIRE(alpha.rows() == heads);
    for (int j = 0; j < heads; ++j) {
      CHECK(alpha.row(j).minCoeff() >= 0.0);
      CHECK(alpha.row(j).sum() == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  SUBCASE("dropping a token equals renormalizing its weight away") {
    Mat bag = oracle::rand_mat(rng, 5, d_tok);
    Mat alpha = attn.attention_values(store, bag);
    const int drop = 2;
    Mat reduced(4, d_tok);
    int at = 0;
    for (int i = 0; i < 5; ++i) {
      if (i != drop) reduced.row(at++) = bag.row(i);
    }
    Mat got = attn.forward_values(store, reduced);

    // Project each token alone (single-token rows are exactly W_j t).
    Mat expected = Mat::Zero(heads, d_out);
    for (int j = 0; j < heads; ++j) {
      double denom = 0.0;
      for (int i = 0; i < 5; ++i)
        if (i != drop) denom += alpha(j, i);
      for (int i = 0; i < 5; ++i) {
        if (i == drop) continue;
        Mat proj = attn.forward_values(store, bag.row(i));
        expected.row(j) += (alpha(j, i) / denom) * proj.row(j);
      }
    }
    CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-9);
  }

  SUBCASE("tape forward matches values and differentiates cleanly") {
    Mat bag = oracle::rand_mat(rng, 4, d_tok);
    ad::Tape tape;
    ad::ModelContext ctx(tape, store, false);
    ad::Var out = attn.forward(ctx, tape.constant(bag));
    CHECK((out.val() - attn.forward_values(store, bag)).cwiseAbs().maxCoeff() < 1e-12);

    Mat weighting = oracle::rand_mat(rng, heads, d_out);
    auto loss_value = [&](const Mat& in) {
      ad::Tape t;
      ad::ModelContext c(t, store, false);
      return ad::total_sum(ad::mul_const(attn.forward(c, t.leaf(in)), weighting)).val()(0, 0);
    };
    ad::Tape tape2;
    ad::ModelContext ctx2(tape2, store, false);
    ad::Var bag_var = tape2.leaf(bag);
    ad::Var loss = ad::total_sum(ad::mul_const(attn.forward(ctx2, bag_var), weighting));
    tape2.backward(loss);
    Mat analytic = bag_var.grad();
    Mat probe = bag;
    double err = oracle::fd_max_rel_err([&] { return loss_value(probe); }, probe, analytic);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("encoder set end to end") {
  DatasetManifest manifest = tiny_manifest();
  ad::ParamStore store;
  RngStream init(17);
  EncoderSet enc(store, manifest, 2, 0.2, init);
  RngStream rng(18);

  SampleRecord rec;
  rec.sample_id = "s0";
  rec.label = 1;
  for (int m = 0; m < kNumModalities; ++m) {
    rec.modality[m].present = true;
    rec.modality[m].global = rng.normal_vector(manifest.D);
    rec.modality[m].local = oracle::rand_mat(rng, manifest.local_rows(m), manifest.D);
  }

  SUBCASE("precomputed mode normalizes and keeps zero rows zero") {
    EncodedSample es = enc.encode_precomputed(rec);
    for (int m = 0; m < kNumModalities; ++m) {
      CHECK(es.global[m].norm() == doctest::Approx(1.0).epsilon(1e-12));
      Vec expected = rec.modality[m].global / rec.modality[m].global.norm();
      CHECK((es.global[m] - expected).norm() < 1e-12);
      for (Eigen::Index r = 0; r < es.local[m].rows(); ++r) {
        CHECK(es.local[m].row(r).norm() == doctest::Approx(1.0).epsilon(1e-12));
      }
    }

    SampleRecord masked = rec;
    masked.modality[kRna].present = false;
    masked.modality[kRna].global.setZero();
    masked.modality[kRna].local.setZero();
    EncodedSample ms = enc.encode_precomputed(masked);
    CHECK_FALSE(ms.present[kRna]);
    CHECK(ms.global[kRna].norm() == 0.0);
    CHECK(ms.local[kRna].norm() == 0.0);
  }

  SUBCASE("raw mode requires corpus centroids for bag fits") {
    SampleRecord raw = rec;
    raw.patch_embeddings = oracle::rand_mat(rng, 12, manifest.D);
    CHECK_THROWS_AS(enc.encode_raw_values(store, raw), StateError);
  }

  SUBCASE("raw mode: identical patches pool to the normalized patch") {
    std::vector<SampleRecord> corpus;
    for (int i = 0; i < 4; ++i) {
      SampleRecord r = rec;
      r.patch_embeddings = oracle::rand_mat(rng, 20, manifest.D);
      corpus.push_back(r);
    }
    enc.fit_corpus_centroids(corpus, 3);
    CHECK(enc.wsi_centroids().rows() == manifest.C);
    CHECK(enc.rpt_centroids().rows() == manifest.C);

    SampleRecord raw = rec;
    Vec p = rng.normal_vector(manifest.D);
    raw.patch_embeddings = p.transpose().replicate(10, 1);
    EncodedSample es = enc.encode_raw_values(store, raw);
    CHECK((es.global[kWsi] - p / p.norm()).norm() < 1e-9);

    // Tape encoding agrees with the value path in eval mode.
    ad::Tape tape;
    ad::ModelContext ctx(tape, store, false);
    EncoderSet::VarSample vs = enc.encode_raw(ctx, raw);
    for (int m = 0; m < kNumModalities; ++m) {
      CHECK((vs.global[m].val().row(0).transpose() - es.global[m]).norm() < 1e-12);
      CHECK((vs.local[m].val() - es.local[m]).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  SUBCASE("attention export matches pooling weights") {
    SampleRecord raw = rec;
    raw.patch_embeddings = oracle::rand_mat(rng, 8, manifest.D);
    Vec w = enc.wsi_attention(store, raw);
    CHECK(w.size() == 8);
    CHECK(w.sum() == doctest::Approx(1.0).epsilon(1e-9));
  }
}
