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

#include "mosare/alignment.hpp"

#include <cmath>

#include "doctest.h"
#include "mosare/encoders.hpp"
#include "oracles.hpp"

using namespace mosare;

namespace {

Mat unit_rows(RngStream& rng, int rows, int cols) {
  Mat m = rng.normal_matrix(rows, cols);
  normalize_rows_inplace(m);
  return m;
}

// Mixture state set by hand so tests control every parameter exactly.
void set_gmm(PrototypeGmms& gmms, int label, const Mat& means, const Mat& vars,
             const Vec& weights) {
  ClassGmm& g = gmms.gmm_mutable(label);
  g.means = means;
  g.vars = vars;
  g.weights = weights;
}

PrototypeGmms random_gmms(RngStream& rng, int n_classes, int n_comp, int d) {
  PrototypeGmms gmms(n_classes, n_comp, d, 1e-6);
  for (int c = 0; c < n_classes; ++c) {
    Vec w = Vec::Zero(n_comp);
    for (int k = 0; k < n_comp; ++k) w(k) = rng.uniform_pos();
    w /= w.sum();
    Mat vars = (rng.normal_matrix(n_comp, d).array().abs() + 0.2).matrix();
    set_gmm(gmms, c, rng.normal_matrix(n_comp, d, 2.0), vars, w);
  }
  return gmms;
}

}  // namespace

TEST_CASE("symmetric contrastive loss hand cases") {
  SUBCASE("single pair scores zero") {
    Mat a = Mat::Zero(1, 4), b = Mat::Zero(1, 4);
    a(0, 1) = 1.0;
    b(0, 2) = 1.0;
    CHECK(symcl_loss_values(a, b, 10.0) == doctest::Approx(0.0).epsilon(1e-12));
    ad::Tape t;
    CHECK(symcl_loss(t.constant(a), t.constant(b), 10.0).val()(0, 0) ==
          doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("orthonormal identical pair of two") {
    Mat a = Mat::Identity(2, 2);
    const double expected = std::log(1.0 + std::exp(-1.0));
    CHECK(symcl_loss_values(a, a, 1.0) == doctest::Approx(expected).epsilon(1e-12));
  }

  SUBCASE("empty batch is rejected") {
    Mat a(0, 4), b(0, 4);
    CHECK_THROWS_AS(symcl_loss_values(a, b, 10.0), ValueError);
    ad::Tape t;
    CHECK_THROWS_AS(symcl_loss(t.constant(a), t.constant(b), 10.0), ValueError);
  }

  SUBCASE("shape mismatch is rejected") {
    RngStream rng(5);
    CHECK_THROWS_AS(
        symcl_loss_values(unit_rows(rng, 3, 4), unit_rows(rng, 4, 4), 10.0),
        DimensionError);
  }
}

TEST_CASE("symmetric contrastive loss matches a direct transcription") {
  RngStream rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = 1 + static_cast<int>(rng.uniform() * 7);
    const int d = 2 + static_cast<int>(rng.uniform() * 6);
    Mat a = unit_rows(rng, m, d), b = unit_rows(rng, m, d);

    const double expected = oracle::symcl_ref(a, b, 10.0);
    CHECK(symcl_loss_values(a, b, 10.0) == doctest::Approx(expected).epsilon(1e-8));

    ad::Tape t;
    CHECK(symcl_loss(t.constant(a), t.constant(b), 10.0).val()(0, 0) ==
          doctest::Approx(expected).epsilon(1e-8));

    // Dividing by tau equals multiplying by its reciprocal.
    CHECK(symcl_loss_values(a, b, 0.1, false) ==
          doctest::Approx(oracle::symcl_ref(a, b, 10.0)).epsilon(1e-8));

    // Swapping the batches swaps the two directions, leaving the sum.
    CHECK(symcl_loss_values(b, a, 10.0) == doctest::Approx(expected).epsilon(1e-10));

    std::vector<int> perm(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) perm[static_cast<std::size_t>(i)] = i;
    rng.shuffle(perm);
    Mat ap(m, d), bp(m, d);
    for (int i = 0; i < m; ++i) {
      ap.row(i) = a.row(perm[static_cast<std::size_t>(i)]);
      bp.row(i) = b.row(perm[static_cast<std::size_t>(i)]);
    }
    CHECK(symcl_loss_values(ap, bp, 10.0) == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("symmetric contrastive loss gradients pass finite differences") {
  RngStream rng(102);
  Mat av = unit_rows(rng, 5, 6), bv = unit_rows(rng, 5, 6);

  ad::Tape t;
  ad::Var a = t.leaf(av), b = t.leaf(bv);
  t.backward(symcl_loss(a, b, 3.0));

  auto loss = [&]() { return symcl_loss_values(av, bv, 3.0); };
  CHECK(oracle::fd_max_rel_err(loss, av, t.grad(a.id)) < 1e-4);
  CHECK(oracle::fd_max_rel_err(loss, bv, t.grad(b.id)) < 1e-4);
}

TEST_CASE("symmetric contrastive total averages its pairs") {
  RngStream rng(103);
  ad::Tape t;
  std::vector<std::pair<ad::Var, ad::Var>> pairs;
  double by_hand = 0.0;
  for (int p = 0; p < 6; ++p) {
    Mat a = unit_rows(rng, 4, 5), b = unit_rows(rng, 4, 5);
    by_hand += symcl_loss_values(a, b, 10.0);
    pairs.emplace_back(t.constant(a), t.constant(b));
  }
  CHECK(symcl_total(pairs, 10.0).val()(0, 0) ==
        doctest::Approx(by_hand / 6.0).epsilon(1e-12));
  CHECK_THROWS_AS(symcl_total({}, 10.0), ValueError);
}

TEST_CASE("mixture posteriors") {
  SUBCASE("single component is certain") {
    ClassGmm g;
    g.means = Mat::Zero(1, 3);
    g.vars = Mat::Ones(1, 3);
    g.weights = Vec::Ones(1);
    Vec p = gmm_posterior(Vec::Constant(3, 0.7), g);
    REQUIRE(p.size() == 1);
    CHECK(p(0) == 1.0);
  }

  SUBCASE("point at a distant mean claims that component") {
    ClassGmm g;
    g.means = Mat::Zero(2, 4);
    g.means.row(1).setConstant(10.0);
    g.vars = Mat::Ones(2, 4);
    g.weights = Vec::Constant(2, 0.5);
    Vec p = gmm_posterior(Vec::Constant(4, 10.0), g);
    CHECK(p(1) > 0.99);
    CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-8));
  }

  SUBCASE("log-space evaluation survives underflowing densities") {
    ClassGmm g;
    g.means = Mat::Zero(2, 4);
    g.means.row(1).setConstant(1e3);
    g.vars = Mat::Ones(2, 4);
    g.weights = Vec::Constant(2, 0.5);
    Vec p = gmm_posterior(Vec::Constant(4, 1e3), g);
    CHECK(all_finite(p));
    CHECK(p(1) > 0.99);
    CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-8));
  }

  SUBCASE("random posteriors match direct densities and sum to one") {
    RngStream rng(104);
    for (int trial = 0; trial < 10; ++trial) {
      const int m = 2 + static_cast<int>(rng.uniform() * 3);
      const int d = 3;
      ClassGmm g;
      g.means = rng.normal_matrix(m, d, 2.0);
      g.vars = (rng.normal_matrix(m, d).array().abs() + 0.3).matrix();
      g.weights = Vec::Zero(m);
      for (int k = 0; k < m; ++k) g.weights(k) = rng.uniform_pos();
      g.weights /= g.weights.sum();

      Vec x = rng.normal_vector(d, 2.0);
      Vec p = gmm_posterior(x, g);
      CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-8));
      CHECK(p.minCoeff() >= 0.0);

      Vec direct(m);
      for (int k = 0; k < m; ++k)
        direct(k) = g.weights(k) * std::exp(oracle::diag_gaussian_logpdf_ref(
                                       x, g.means.row(k).transpose(),
                                       g.vars.row(k).transpose()));
      direct /= direct.sum();
      CHECK((p - direct).cwiseAbs().maxCoeff() < 1e-10);
    }
  }

  SUBCASE("overflowing distances raise instead of returning garbage") {
    ClassGmm g;
    g.means = Mat::Zero(2, 3);
    g.vars = Mat::Ones(2, 3);
    g.weights = Vec::Constant(2, 0.5);
    CHECK_THROWS_AS(gmm_posterior(Vec::Constant(3, 1e200), g), NumericalError);
  }
}

TEST_CASE("sinkhorn balancing") {
  RngStream rng(105);

  SUBCASE("balanced marginals on random responsibilities") {
    for (int trial = 0; trial < 8; ++trial) {
      const int n = 2 + static_cast<int>(rng.uniform() * 14);
      const int m = 2 + static_cast<int>(rng.uniform() * 3);
      Mat log_r = rng.normal_matrix(n, m, 2.0);
      Mat r = sinkhorn_balance(log_r, 10);
      CHECK(r.minCoeff() >= 0.0);
      const double col_target = static_cast<double>(n) / static_cast<double>(m);
      for (int i = 0; i < n; ++i)
        CHECK(r.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
      for (int j = 0; j < m; ++j)
        CHECK(r.col(j).sum() == doctest::Approx(col_target).epsilon(1e-6));
    }
  }

  SUBCASE("fewer rows than columns still balances") {
    Mat log_r = rng.normal_matrix(2, 3);
    Mat r = sinkhorn_balance(log_r, 10);
    for (int i = 0; i < 2; ++i)
      CHECK(r.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
    for (int j = 0; j < 3; ++j)
      CHECK(r.col(j).sum() == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
  }

  SUBCASE("zero iterations degrade to row-normalized posteriors") {
    Mat log_r = rng.normal_matrix(5, 3, 2.0);
    Mat r = sinkhorn_balance(log_r, 0);
    for (int i = 0; i < 5; ++i) {
      Vec row = log_r.row(i).transpose();
      Vec p = (row.array() - row.maxCoeff()).exp();
      p /= p.sum();
      CHECK((r.row(i).transpose() - p).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  SUBCASE("strong regularization flattens assignments to the product measure") {
    Mat log_r = rng.normal_matrix(6, 3, 2.0);
    Mat r = sinkhorn_balance(log_r, 10, 1e6);
    CHECK((r.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-5);
    CHECK_THROWS_AS(sinkhorn_balance(log_r, 10, 0.0), ConfigError);
  }

  SUBCASE("non-finite input is rejected") {
    Mat log_r = Mat::Zero(3, 2);
    log_r(1, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(sinkhorn_balance(log_r, 10), NumericalError);
    CHECK_THROWS_AS(sinkhorn_balance(Mat(0, 2), 10), ValueError);
  }
}

TEST_CASE("prototype mixtures") {
  const int d = 4;

  SUBCASE("initialization recovers separated per-class clusters") {
    RngStream rng(106);
    std::vector<Mat> per_class;
    std::vector<Mat> truth;
    for (int c = 0; c < 2; ++c) {
      Mat centers = Mat::Zero(3, d);
      for (int k = 0; k < 3; ++k) centers(k, k % d) = 20.0 * (c + 1) + 8.0 * k;
      truth.push_back(centers);
      Mat rows(60, d);
      for (int i = 0; i < 60; ++i)
        rows.row(i) = centers.row(i % 3) + 0.05 * rng.normal_vector(d).transpose();
      per_class.push_back(rows);
    }

    PrototypeGmms gmms(2, 3, d, 1e-6);
    CHECK_FALSE(gmms.initialized());
    gmms.initialize(per_class, 7);
    CHECK(gmms.initialized());
    for (int c = 0; c < 2; ++c) {
      CHECK(oracle::best_match_cost(gmms.gmm(c).means, truth[static_cast<std::size_t>(c)]) < 0.1);
      CHECK(gmms.gmm(c).weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(gmms.gmm(c).vars.minCoeff() == doctest::Approx(1.0));
    }
  }

  SUBCASE("momentum one freezes every parameter") {
    RngStream rng(107);
    PrototypeGmms gmms = random_gmms(rng, 2, 3, d);
    Mat feats = rng.normal_matrix(12, d, 2.0);
    std::vector<int> labels(12);
    for (int i = 0; i < 12; ++i) labels[static_cast<std::size_t>(i)] = i % 2;

    Mat m0 = gmms.gmm(0).means, v0 = gmms.gmm(0).vars;
    Vec w0 = gmms.gmm(0).weights;
    gmms.update(feats, labels, 1.0, 10);
    CHECK((gmms.gmm(0).means - m0).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((gmms.gmm(0).vars - v0).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((gmms.gmm(0).weights - w0).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("momentum zero on a batch sitting at the means keeps the means") {
    PrototypeGmms gmms(1, 2, d, 1e-6);
    Mat means = Mat::Zero(2, d);
    means.row(1).setConstant(10.0);
    set_gmm(gmms, 0, means, Mat::Ones(2, d), Vec::Constant(2, 0.5));

    Mat feats(8, d);
    for (int i = 0; i < 8; ++i) feats.row(i) = means.row(i % 2);
    std::vector<int> labels(8, 0);
    gmms.update(feats, labels, 0.0, 10);
    CHECK((gmms.gmm(0).means - means).cwiseAbs().maxCoeff() < 1e-6);
  }

  SUBCASE("classes absent from the batch keep their state") {
    RngStream rng(108);
    PrototypeGmms gmms = random_gmms(rng, 3, 2, d);
    Mat before_m = gmms.gmm(2).means;
    Mat before_v = gmms.gmm(2).vars;
    Vec before_w = gmms.gmm(2).weights;

    Mat feats = rng.normal_matrix(10, d);
    std::vector<int> labels(10);
    for (int i = 0; i < 10; ++i) labels[static_cast<std::size_t>(i)] = i % 2;
    gmms.update(feats, labels, 0.5, 10);
    CHECK((gmms.gmm(2).means - before_m).cwiseAbs().maxCoeff() == 0.0);
    CHECK((gmms.gmm(2).vars - before_v).cwiseAbs().maxCoeff() == 0.0);
    CHECK((gmms.gmm(2).weights - before_w).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("degenerate batches hit the variance floor exactly") {
    PrototypeGmms gmms(1, 2, d, 1e-6);
    Mat means = Mat::Zero(2, d);
    means.row(1).setConstant(6.0);
    set_gmm(gmms, 0, means, Mat::Ones(2, d), Vec::Constant(2, 0.5));

    Mat feats(6, d);
    for (int i = 0; i < 6; ++i) feats.row(i) = means.row(i % 2);
    gmms.update(feats, std::vector<int>(6, 0), 0.0, 10);
    CHECK(gmms.gmm(0).vars.minCoeff() == 1e-6);
    CHECK(gmms.gmm(0).vars.maxCoeff() == doctest::Approx(1e-6).epsilon(1e-6));
  }

  SUBCASE("weights stay on the simplex across many noisy updates") {
    RngStream rng(109);
    PrototypeGmms gmms = random_gmms(rng, 2, 3, d);
    for (int step = 0; step < 150; ++step) {
      const int b = 6 + static_cast<int>(rng.uniform() * 10);
      Mat feats = rng.normal_matrix(b, d, 2.0);
      std::vector<int> labels(static_cast<std::size_t>(b));
      for (int i = 0; i < b; ++i)
        labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform() * 2.0);
      gmms.update(feats, labels, 0.9, 10);
      for (int c = 0; c < 2; ++c) {
        CHECK(gmms.gmm(c).weights.sum() == doctest::Approx(1.0).epsilon(1e-8));
        CHECK(gmms.gmm(c).weights.minCoeff() >= 0.0);
        CHECK(gmms.gmm(c).vars.minCoeff() >= 1e-6);
      }
    }
  }

  SUBCASE("updating an uninitialized class is an error") {
    PrototypeGmms gmms(2, 2, d, 1e-6);
    Mat feats = Mat::Ones(4, d);
    CHECK_THROWS_AS(gmms.update(feats, std::vector<int>(4, 0), 0.9, 10), StateError);
  }
}

TEST_CASE("pure EM updates never lower the batch likelihood") {
  RngStream rng(110);
  const int d = 3;
  Mat centers(3, d);
  centers << 0, 0, 0, 6, 0, 0, 0, 6, 0;
  Mat feats(90, d);
  for (int i = 0; i < 90; ++i)
    feats.row(i) = centers.row(i % 3) + rng.normal_vector(d, 0.8).transpose();

  // A deliberately poor start: all components near one cluster.
  PrototypeGmms gmms(1, 3, d, 1e-6);
  Mat means0 = centers.row(0).replicate(3, 1);
  means0 += 0.3 * rng.normal_matrix(3, d);
  set_gmm(gmms, 0, means0, Mat::Ones(3, d), Vec::Constant(3, 1.0 / 3.0));

  std::vector<int> labels(90, 0);
  double prev = gmm_log_likelihood(feats, gmms.gmm(0));
  for (int step = 0; step < 30; ++step) {
    gmms.update(feats, labels, 0.0, 0);
    double cur = gmm_log_likelihood(feats, gmms.gmm(0));
    CHECK(cur >= prev - 1e-9);
    prev = cur;
  }
}

TEST_CASE("prototype contrast hand cases") {
  const double tau = 1.0;

  SUBCASE("two classes with equal logits cost log two") {
    PrototypeGmms gmms(2, 1, 2, 1e-6);
    set_gmm(gmms, 0, Mat::Identity(1, 2), Mat::Ones(1, 2), Vec::Ones(1));
    Mat m1 = Mat::Zero(1, 2);
    m1(0, 1) = 1.0;
    set_gmm(gmms, 1, m1, Mat::Ones(1, 2), Vec::Ones(1));
    Vec x = Vec::Ones(2);
    CHECK(mcl_loss(x, 0, gmms, tau) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("three classes with logits two zero zero") {
    PrototypeGmms gmms(3, 1, 3, 1e-6);
    for (int c = 0; c < 3; ++c) {
      Mat m = Mat::Zero(1, 3);
      m(0, c) = 1.0;
      set_gmm(gmms, c, m, Mat::Ones(1, 3), Vec::Ones(1));
    }
    Vec x = Vec::Zero(3);
    x(0) = 2.0;
    const double expected = std::log(std::exp(2.0) + 2.0) - 2.0;
    CHECK(expected == doctest::Approx(0.2395).epsilon(1e-3));
    CHECK(mcl_loss(x, 0, gmms, tau) == doctest::Approx(expected).epsilon(1e-12));
  }

  SUBCASE("a dominant positive saturates to zero") {
    PrototypeGmms gmms(2, 1, 2, 1e-6);
    set_gmm(gmms, 0, Mat::Identity(1, 2), Mat::Ones(1, 2), Vec::Ones(1));
    Mat m1 = Mat::Zero(1, 2);
    m1(0, 1) = 1.0;
    set_gmm(gmms, 1, m1, Mat::Ones(1, 2), Vec::Ones(1));
    Vec x = Vec::Zero(2);
    x(0) = 50.0;
    CHECK(mcl_loss(x, 0, gmms, tau) == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("loss strictly decreases as the positive similarity grows") {
    PrototypeGmms gmms(2, 1, 2, 1e-6);
    set_gmm(gmms, 0, Mat::Identity(1, 2), Mat::Ones(1, 2), Vec::Ones(1));
    Mat m1 = Mat::Zero(1, 2);
    m1(0, 1) = 1.0;
    set_gmm(gmms, 1, m1, Mat::Ones(1, 2), Vec::Ones(1));
    double prev = std::numeric_limits<double>::infinity();
    for (double t : {0.5, 1.0, 2.0}) {
      Vec x(2);
      x << t, 1.0;
      double cur = mcl_loss(x, 0, gmms, tau);
      CHECK(cur < prev);
      prev = cur;
    }
  }

  SUBCASE("uninitialized mixtures and bad labels are rejected") {
    PrototypeGmms fresh(2, 1, 2, 1e-6);
    CHECK_THROWS_AS(mcl_loss(Vec::Ones(2), 0, fresh, tau), StateError);
    PrototypeGmms gmms(2, 1, 2, 1e-6);
    set_gmm(gmms, 0, Mat::Identity(1, 2), Mat::Ones(1, 2), Vec::Ones(1));
    set_gmm(gmms, 1, Mat::Identity(1, 2), Mat::Ones(1, 2), Vec::Ones(1));
    CHECK_THROWS_AS(mcl_loss(Vec::Ones(2), 5, gmms, tau), ValueError);
    CHECK_THROWS_AS(mcl_loss(Vec::Ones(2), 0, gmms, 0.0), ConfigError);
  }
}

TEST_CASE("prototype contrast matches an independent transcription") {
  RngStream rng(111);
  const int d = 5;
  for (int trial = 0; trial < 10; ++trial) {
    PrototypeGmms gmms = random_gmms(rng, 3, 2, d);
    Vec x = rng.normal_vector(d, 2.0);
    const int label = static_cast<int>(rng.uniform() * 3.0);

    // Pick prototypes by direct density evaluation, independent of the
    // implementation's argmax path.
    auto pick = [&](int c) {
      const ClassGmm& g = gmms.gmm(c);
      double best = -std::numeric_limits<double>::infinity();
      int arg = 0;
      for (int k = 0; k < g.n_components(); ++k) {
        double lp = std::log(g.weights(k)) +
                    oracle::diag_gaussian_logpdf_ref(x, g.means.row(k).transpose(),
                                                     g.vars.row(k).transpose());
        if (lp > best) {
          best = lp;
          arg = k;
        }
      }
      return Vec(g.means.row(arg).transpose());
    };

    Vec q_pos = pick(label);
    std::vector<Vec> q_negs;
    for (int c = 0; c < 3; ++c)
      if (c != label) q_negs.push_back(pick(c));
    CHECK(mcl_loss(x, label, gmms, 0.1) ==
          doctest::Approx(oracle::mcl_ref(x, q_pos, q_negs, 0.1)).epsilon(1e-10));
  }
}

TEST_CASE("batched prototype contrast") {
  RngStream rng(112);
  const int d = 6, b = 7;
  PrototypeGmms gmms = random_gmms(rng, 3, 2, d);
  Mat xv = rng.normal_matrix(b, d, 1.5);
  std::vector<int> labels(b);
  for (int i = 0; i < b; ++i) labels[static_cast<std::size_t>(i)] = i % 3;

  SUBCASE("batch loss is the mean of per-sample losses") {
    ad::ParamStore store;
    ad::Tape t;
    ad::ModelContext ctx(t, store, true);
    ad::Var loss = mcl_loss_rows(ctx, t.constant(xv), labels, gmms, 0.1);
    double by_hand = 0.0;
    for (int i = 0; i < b; ++i)
      by_hand += mcl_loss(xv.row(i).transpose(), labels[static_cast<std::size_t>(i)], gmms, 0.1);
    CHECK(loss.val()(0, 0) == doctest::Approx(by_hand / b).epsilon(1e-12));
  }

  SUBCASE("input gradient passes finite differences with picks frozen") {
    ad::ParamStore store;
    ad::RoutingTrace trace(ad::RoutingTrace::Mode::Record);

    ad::Tape t;
    ad::ModelContext ctx(t, store, true);
    ctx.trace = &trace;
    ad::Var x = t.leaf(xv);
    t.backward(mcl_loss_rows(ctx, x, labels, gmms, 0.5));
    Mat analytic = t.grad(x.id);

    trace.set_mode(ad::RoutingTrace::Mode::Replay);
    auto f = [&]() {
      trace.rewind();
      ad::Tape ft;
      ad::ModelContext fctx(ft, store, true);
      fctx.trace = &trace;
      return mcl_loss_rows(fctx, ft.constant(xv), labels, gmms, 0.5).val()(0, 0);
    };
    Mat probe = xv;
    CHECK(oracle::fd_max_rel_err(f, xv, analytic) < 1e-4);
    CHECK((xv - probe).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("uninitialized mixtures are rejected with direction to warm up") {
    PrototypeGmms fresh(3, 2, d, 1e-6);
    ad::ParamStore store;
    ad::Tape t;
    ad::ModelContext ctx(t, store, true);
    CHECK_THROWS_AS(mcl_loss_rows(ctx, t.constant(xv), labels, fresh, 0.1), StateError);
  }
}
