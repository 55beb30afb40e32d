"""Acceptance suite: one test per release criterion, at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one pass line
per criterion. The heavier replication tests train real (tiny) models
and take a couple of minutes combined.
"""

import dataclasses
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from klink import align as A
from klink import knowledge as K
from klink import metrics as M
from klink import signal as S
from klink import training as TR
from klink.data import SyntheticSpec, make_synthetic, read_turbofan_raw, ingest_rul_corpus, last_window_samples, minmax_normalize, NormalizationStats, DatasetSplit, split_by_subject
from klink.tensor import Tensor, finite_difference_check

GOLDEN = json.loads((Path(__file__).parent / "golden" / "synthetic_acceptance.json").read_text())

SWEEP_EPS_NOTE = "interior optimum asserted per seed over the published weight grid"


def report(name: str, detail: str) -> None:
    print(f"[ACCEPTANCE] {name}: PASS ({detail})")


# ---------------------------------------------------------------------------
# shared synthetic setup (the spec-default corpus)


@pytest.fixture(scope="module")
def corpus():
    return make_synthetic(SyntheticSpec())


@pytest.fixture(scope="module")
def table(corpus):
    n_patches = corpus.split.train[0].length // 8
    return K.group_consistent_table(
        corpus.sensor_names,
        corpus.groups,
        n_patches,
        corpus.class_names,
        "signal class",
        seed=7,
        group_spread=0.05,
        time_spread=0.2,
    )


def acceptance_config(corpus, seed, epochs=60, **overrides):
    base = dict(
        task="classification",
        n_classes=3,
        class_names=corpus.class_names,
        encoder=S.SensorEncoderConfig([1, 8], 2, 8, []),
        patch_size=8,
        window=2,
        epochs=epochs,
        batch_size=16,
        learning_rate=5e-3,
        seed=seed,
        category="signal class",
        loss=A.LossWeights(tau=0.1, lambda_s=1e-4, lambda_l=1e-2, lambda_e=1e-3),
    )
    base.update(overrides)
    return TR.TrainConfig(**base)


# ---------------------------------------------------------------------------
# 1. gradient suite


def test_gradient_suite_full_combined_loss():
    start = time.time()
    loss_fn, params = TR.gradcheck_setup(n_sensors=3, n_patches=2, batch=2, hidden_dim=4)
    check = finite_difference_check(loss_fn, params, eps=3e-4, tol=1e-4)
    elapsed = time.time() - start
    assert check.passed, check.summary()
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
    n_entries = sum(p.size for p in params.values())
    report("gradient suite", f"max rel err {check.max_rel_error:.2e} over {n_entries} entries in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. loss oracles on random small instances


def nce_brute(anchors, candidates, tau):
    n = len(anchors)
    total = 0.0
    for i in range(n):
        pos = math.exp(float(np.dot(anchors[i], candidates[i])) / tau)
        den = sum(math.exp(float(np.dot(anchors[i], candidates[v])) / tau) for v in range(n) if v != i)
        total += math.log(pos / den)
    return -total / n


def edge_brute(e_s, e_k):
    n = e_s.shape[0]
    return sum((e_s[i, j] - e_k[i, j]) ** 2 for i in range(n) for j in range(n)) / n**2


def test_loss_oracles_fifty_random_instances():
    g = np.random.default_rng(123)
    worst = 0.0
    for trial in range(50):
        nodes = int(g.integers(2, 13))
        d = int(g.integers(2, 5))
        batch = int(g.integers(2, 7))
        tau = float(g.uniform(0.2, 2.0))
        proj = A.AlignmentProjection.create(d, np.random.default_rng(trial))

        z, k = g.normal(size=(nodes, d)), g.normal(size=(nodes, d))
        got = A.sensor_level_loss(Tensor(z), Tensor(k), proj, tau).item()
        want = nce_brute(z @ proj.w_m.data, k, tau)
        worst = max(worst, abs(got - want))

        zs = g.normal(size=(batch, nodes, d))
        zk = g.normal(size=(batch, nodes, 2 * d))
        got = A.label_level_loss(Tensor(zs), Tensor(zk), proj, tau).item()
        want = nce_brute(zs.reshape(batch, -1), (zk @ proj.w_r.data).reshape(batch, -1), tau)
        worst = max(worst, abs(got - want))

        e_s = g.dirichlet(np.ones(nodes), size=nodes)
        e_k = g.dirichlet(np.ones(nodes), size=nodes)
        got = A.edge_loss(Tensor(e_s), Tensor(e_k)).item()
        worst = max(worst, abs(got - edge_brute(e_s, e_k)))
        assert worst < 1e-10, f"trial {trial}: worst abs diff {worst:.2e}"
    report("loss oracles", f"50 instances, worst abs diff {worst:.2e} < 1e-10")


# ---------------------------------------------------------------------------
# 3. analytic fixed points


def test_analytic_fixed_points():
    d = 3
    eye_proj = A.AlignmentProjection(
        Tensor(np.eye(d), requires_grad=True),
        Tensor(np.vstack([np.eye(d), np.zeros((d, d))]), requires_grad=True),
    )
    z140 = Tensor(np.tile(np.ones(d), (140, 1)))
    sensor_uniform = A.sensor_level_loss(z140, z140, eye_proj, tau=0.1).item()
    assert abs(sensor_uniform - math.log(139)) < 1e-9
    assert abs(sensor_uniform - 4.9345) < 1e-3

    zs = Tensor(np.tile(np.ones((4, d)), (300, 1, 1)))
    zk = Tensor(np.tile(np.ones((4, 2 * d)), (300, 1, 1)))
    label_uniform = A.label_level_loss(zs, zk, eye_proj, tau=0.1).item()
    assert abs(label_uniform - math.log(299)) < 1e-9

    e = np.random.default_rng(5).dirichlet(np.ones(6), size=6)
    assert A.edge_loss(Tensor(e), Tensor(e.copy())).item() == 0.0
    report(
        "analytic fixed points",
        f"log(139)={sensor_uniform:.4f}, log(299)={label_uniform:.4f}, identical-edge loss 0",
    )


# ---------------------------------------------------------------------------
# 4. graph invariants


def test_edge_rows_stochastic_over_random_configs():
    g = np.random.default_rng(31)
    checked = 0
    for _ in range(100):
        n = int(g.integers(2, 6))
        lhat = int(g.integers(2, 7))
        d = int(g.integers(2, 7))
        m = int(g.integers(1, lhat + 1))
        z = Tensor(g.normal(size=(n * lhat, d)) * g.uniform(0.5, 4.0))
        graph = S.construct_graph(z, Tensor(g.normal(size=(d, d))), n, lhat)
        assert np.all(np.abs(graph.edges.data.sum(axis=-1) - 1.0) < 1e-6)
        for sub in S.window_edges(graph, m):
            assert np.all(np.abs(sub.data.sum(axis=-1) - 1.0) < 1e-6)
        checked += 1
    report("graph row-stochasticity", f"{checked} random configs, global and per-window rows sum to 1")


def test_full_window_matches_whole_graph_pass():
    g = np.random.default_rng(32)
    worst = 0.0
    for _ in range(10):
        n, lhat, d = int(g.integers(2, 5)), int(g.integers(2, 6)), int(g.integers(2, 6))
        z = Tensor(g.normal(size=(n * lhat, d)))
        graph = S.construct_graph(z, Tensor(g.normal(size=(d, d))), n, lhat)
        w_g, b_g = Tensor(g.normal(size=(d, d))), Tensor(g.normal(size=d))
        windowed = S.mpnn_forward(graph, lhat, w_g, b_g).node_updated.data
        from klink import tensor as T

        edges = T.softmax_rows(graph.edge_logits)
        direct = T.relu(T.add(T.matmul(T.matmul(edges, graph.node_features), w_g), b_g)).data
        worst = max(worst, float(np.max(np.abs(windowed - direct))))
        assert worst < 1e-12
    report("degenerate windowing", f"M = patch-count equals whole-graph pass, worst diff {worst:.1e}")


# ---------------------------------------------------------------------------
# 5. metric oracles


def test_metric_oracles_and_score_branches():
    g = np.random.default_rng(77)
    worst = 0.0
    for _ in range(20):
        n = int(g.integers(3, 40))
        y = g.uniform(0, 130, size=n)
        p = y + g.normal(scale=12, size=n)
        worst = max(worst, abs(M.rmse(y, p) - math.sqrt(sum((b - a) ** 2 for a, b in zip(y, p)) / n)))
        brute_score = sum(
            math.exp(-(b - a) / 13.0) - 1.0 if b < a else math.exp((b - a) / 10.0) - 1.0
            for a, b in zip(y, p)
        ) / n
        worst = max(worst, abs(M.rul_score(y, p) - brute_score))
        classes = int(g.integers(2, 6))
        yc, pc = g.integers(0, classes, size=n), g.integers(0, classes, size=n)
        worst = max(worst, abs(M.accuracy(yc, pc) - sum(int(a == b) for a, b in zip(yc, pc)) / n))
        brute_f1 = []
        for c in range(classes):
            tp = sum(1 for a, b in zip(yc, pc) if a == c and b == c)
            fp = sum(1 for a, b in zip(yc, pc) if a != c and b == c)
            fn = sum(1 for a, b in zip(yc, pc) if a == c and b != c)
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            brute_f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        worst = max(worst, abs(M.macro_f1(yc, pc, classes) - sum(brute_f1) / classes))
        assert worst < 1e-12

    late = M.rul_score([100.0], [110.0])
    early = M.rul_score([100.0], [90.0])
    assert abs(late - (math.e - 1.0)) < 1e-12
    assert abs(early - (math.exp(10.0 / 13.0) - 1.0)) < 1e-12
    report(
        "metric oracles",
        f"20 random pairs < 1e-12; late(+10)={late:.4f}, early(-10)={early:.4f}",
    )


# ---------------------------------------------------------------------------
# 6. directional knowledge-transfer replication


def test_directional_knowledge_transfer(corpus, table):
    start = time.time()
    n_patches = corpus.split.train[0].length // 8
    results = {}
    for variant in ("full", "no_knowledge"):
        accs, masses = [], []
        for seed in range(5):
            cfg = acceptance_config(corpus, seed)
            if variant == "no_knowledge":
                cfg = dataclasses.replace(cfg, ablation=TR.AblationSwitches(no_knowledge=True))
            result = TR.train(cfg, corpus.split, table)
            accs.append(TR.evaluate(result.checkpoint, corpus.split.test, cfg).per_seed[seed]["accuracy"])
            model = TR.KLinkModel(cfg, 6, n_patches)
            model.load_state(result.checkpoint.tensors)
            masses.append(TR.mean_within_group_mass(model, corpus.split.test, corpus.groups))
        results[variant] = (float(np.mean(accs)), float(np.mean(masses)), accs, masses)
    elapsed = time.time() - start

    full_acc, full_mass, full_accs, _ = results["full"]
    base_acc, base_mass, base_accs, _ = results["no_knowledge"]
    golden = GOLDEN["directional"]
    assert np.allclose(full_accs, golden["full"]["accuracies"], rtol=1e-9), "recorded run drifted"
    assert np.allclose(base_accs, golden["no_knowledge"]["accuracies"], rtol=1e-9), "recorded run drifted"
    assert full_acc >= base_acc, f"full {full_acc:.4f} < baseline {base_acc:.4f}"
    assert full_mass > base_mass, f"within-group mass {full_mass:.4f} <= baseline {base_mass:.4f}"
    assert elapsed < 15 * 60, f"directional replication took {elapsed:.0f}s"
    report(
        "directional knowledge transfer",
        f"accuracy {full_acc:.4f} vs {base_acc:.4f}, group mass {full_mass:.4f} vs {base_mass:.4f}, {elapsed:.0f}s",
    )


def test_linear_baseline_loses_to_trained_model(corpus, table):
    def feats(samples):
        return np.stack([np.concatenate([s.signal.mean(axis=1), [1.0]]) for s in samples])

    def onehot(samples):
        y = np.zeros((len(samples), 3))
        for i, s in enumerate(samples):
            y[i, int(s.label)] = 1.0
        return y

    weights, *_ = np.linalg.lstsq(feats(corpus.split.train), onehot(corpus.split.train), rcond=None)
    predictions = feats(corpus.split.test) @ weights
    labels = np.array([int(s.label) for s in corpus.split.test])
    linear_acc = float(np.mean(predictions.argmax(axis=1) == labels))
    assert abs(linear_acc - GOLDEN["linear_baseline_accuracy"]) < 1e-9

    cfg = acceptance_config(corpus, 0)
    result = TR.train(cfg, corpus.split, table)
    model_acc = TR.evaluate(result.checkpoint, corpus.split.test, cfg).per_seed[0]["accuracy"]
    assert abs(model_acc - GOLDEN["klink_seed0_accuracy"]) < 1e-9
    assert linear_acc < model_acc
    report("raw-mean linear baseline", f"linear {linear_acc:.4f} < trained {model_acc:.4f}")


def test_two_epoch_loss_decrease(corpus, table):
    cfg = acceptance_config(corpus, 7, epochs=2)
    result = TR.train(cfg, corpus.split, table)
    assert np.allclose(result.epoch_losses, GOLDEN["two_epoch_losses_seed7"], rtol=1e-9)
    assert result.epoch_losses[1] < result.epoch_losses[0]
    report("early training progress", f"epoch losses {result.epoch_losses[0]:.4f} -> {result.epoch_losses[1]:.4f}")


# ---------------------------------------------------------------------------
# 7. sweep shape


def test_lambda_s_sweep_interior_optimum(corpus, table):
    start = time.time()
    values = list(TR.SWEEP_VALUES)
    best_indices = []
    for seed in range(5):
        row = []
        for value in values:
            cfg = acceptance_config(corpus, seed)
            cfg = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, lambda_s=value))
            result = TR.train(cfg, corpus.split, table)
            row.append(TR.evaluate(result.checkpoint, corpus.split.test, cfg).per_seed[seed]["accuracy"])
        best_indices.append(int(np.argmax(row)))
    interior = sum(1 for b in best_indices if b not in (0, len(values) - 1))
    elapsed = time.time() - start
    assert interior >= 3, f"interior optimum on only {interior}/5 seeds (best indices {best_indices})"
    report(
        "sensor-weight sweep shape",
        f"interior best index on {interior}/5 seeds {best_indices}, {elapsed:.0f}s ({SWEEP_EPS_NOTE})",
    )


# ---------------------------------------------------------------------------
# 8. optional full-scale turbofan run


TURBOFAN_DIR = os.environ.get("KLINK_CMAPSS_DIR", "data/CMAPSS")


@pytest.mark.skipif(
    not Path(TURBOFAN_DIR, "train_FD002.txt").exists(),
    reason=f"turbofan corpus not present under {TURBOFAN_DIR}",
)
def test_optional_turbofan_fd002_rmse():
    root = Path(TURBOFAN_DIR)
    units, names = read_turbofan_raw(root / "train_FD002.txt")
    samples, _ = ingest_rul_corpus(units, names, window=50, stride=1, cap=125)
    split = split_by_subject(samples, lambda s: s.sample_id.split(":")[0], (0.8, 0.2, 0.0), seed=0)
    stats = NormalizationStats.fit(split.train)
    test_units, _ = read_turbofan_raw(root / "test_FD002.txt")
    rul = np.loadtxt(root / "RUL_FD002.txt").reshape(-1)
    test_samples, _ = last_window_samples(
        test_units, names, 50, {str(i + 1): float(v) for i, v in enumerate(rul)}, cap=125
    )
    data = DatasetSplit(
        minmax_normalize(split.train, stats),
        minmax_normalize(split.validation, stats),
        minmax_normalize(test_samples, stats),
        (0.8, 0.2, 0.0),
        0,
    )
    cfg = TR.TrainConfig(
        task="regression",
        encoder=S.SensorEncoderConfig([1, 64, 48], 2, 56, [112, 112, 56]),
        patch_size=5,
        window=2,
        epochs=50,
        batch_size=300,
        learning_rate=1e-3,
        seed=0,
        precision="float32",
        category="remaining useful life of a machine",
        loss=A.LossWeights(tau=0.1, lambda_s=1e-4, lambda_l=1e-2, lambda_e=1e-3, downstream="mse_regression"),
    )
    result = TR.train(cfg, data, None)
    rmse = TR.evaluate(result.checkpoint, data.test, cfg).per_seed[0]["rmse"]
    assert rmse <= 16.0, f"test RMSE {rmse:.2f} > 16"
    report("turbofan FD002", f"test RMSE {rmse:.2f} <= 16")
