# Copyright 2026 The MoSARe Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""End-to-end smoke tests for the Python module, checked against plain
numpy transcriptions rather than the library's own outputs."""

import numpy as np
import pytest

import mosare

FAST = {
    "train.epochs": 4,
    "train.warmup_epochs": 1,
    "train.batch_size": 12,
    "train.lr": 3e-3,
}


def small_dataset(seed=7):
    return mosare.synth(classes=3, per_class=10, dim=16, c=4, nh=4, separation=4.0, seed=seed)


def test_synth_shape_and_labels():
    ds = small_dataset()
    assert ds.n_samples == 30
    assert ds.n_classes == 3
    assert ds.dim == 16
    assert sorted(set(ds.labels)) == [0, 1, 2]


def test_dataset_roundtrip(tmp_path):
    ds = small_dataset()
    ds.save(str(tmp_path / "ds"))
    back = mosare.Dataset.load(str(tmp_path / "ds"))
    assert back.n_samples == ds.n_samples
    assert back.labels == ds.labels


def test_train_predict_and_checkpoint(tmp_path):
    ds = small_dataset()
    model, history = mosare.train(ds, FAST)
    assert len(history) == 4
    assert all(np.isfinite(h["loss"]["total"]) for h in history)

    probs = model.predict_proba(ds)
    assert probs.shape == (30, 3)
    np.testing.assert_allclose(probs.sum(axis=1), np.ones(30), atol=1e-9)

    path = str(tmp_path / "model.ck")
    model.save(path)
    again = mosare.Model.load(path)
    np.testing.assert_array_equal(again.predict_proba(ds), probs)
    assert again.config["train.epochs"] == "4"


def test_train_determinism():
    ds = small_dataset()
    _, h1 = mosare.train(ds, FAST)
    _, h2 = mosare.train(ds, FAST)
    assert [h["loss"]["total"] for h in h1] == [h["loss"]["total"] for h in h2]
    assert [h["auc"] for h in h1] == [h["auc"] for h in h2]


def test_unknown_config_key_rejected():
    ds = small_dataset()
    with pytest.raises(ValueError, match="unknown config key"):
        mosare.train(ds, {"train.nope": 1})


def test_run_cv_report():
    ds = small_dataset()
    report = mosare.run_cv(ds, FAST, folds=2)
    assert len(report["folds"]) == 2
    assert report["applicable"]
    assert 0.0 <= report["auc_mean"] <= 1.0
    per_fold = [f["auc"] for f in report["folds"]]
    np.testing.assert_allclose(report["auc_mean"], np.mean(per_fold), atol=1e-12)


def test_cma_matches_numpy():
    rng = np.random.default_rng(0)
    a, b, c = (0.3 * rng.standard_normal((5, 8)) for _ in range(3))

    def pair(x, y):
        return x + (x * y).sum(axis=1, keepdims=True) * y

    want = [
        0.5 * (pair(a, b) + pair(a, c)),
        0.5 * (pair(b, a) + pair(b, c)),
        0.5 * (pair(c, a) + pair(c, b)),
    ]
    per, agg = mosare.cma(a, b, c)
    for got, ref in zip(per, want):
        np.testing.assert_allclose(got, ref, atol=1e-12)
    np.testing.assert_allclose(agg, sum(want), atol=1e-12)


def test_route_gate_matches_numpy():
    rng = np.random.default_rng(1)
    for _ in range(50):
        logits = rng.standard_normal(6)
        probs = np.exp(logits) / np.exp(logits).sum()
        picks, weights = mosare.route_gate(probs, top_k=2, renormalize=True)
        assert picks == sorted(np.argsort(-probs, kind="stable")[:2].tolist())
        np.testing.assert_allclose(np.sum(weights), 1.0, atol=1e-12)
        kept = probs[picks]
        np.testing.assert_allclose(weights, kept / kept.sum(), atol=1e-12)


def test_sinkhorn_marginals():
    rng = np.random.default_rng(2)
    log_r = rng.standard_normal((40, 5)) * 2.0
    p = mosare.sinkhorn_balance(log_r, iters=30)
    np.testing.assert_allclose(p.sum(axis=1), np.ones(40), atol=1e-8)
    np.testing.assert_allclose(p.sum(axis=0), np.full(5, 8.0), atol=1e-6)


def test_symcl_matches_numpy():
    rng = np.random.default_rng(3)
    a = 0.3 * rng.standard_normal((6, 8))
    b = 0.3 * rng.standard_normal((6, 8))
    tau = 5.0
    sims = tau * a @ b.T
    fwd = -np.mean(np.diag(sims) - np.log(np.exp(sims).sum(axis=1)))
    bwd = -np.mean(np.diag(sims) - np.log(np.exp(sims).sum(axis=0)))
    np.testing.assert_allclose(mosare.symcl(a, b, tau), 0.5 * (fwd + bwd), atol=1e-10)
