"""Acceptance criteria, one test per criterion.

Each test prints a single pass/fail line (also repeated in the pytest
terminal summary) and then asserts.
"""

import csv
import functools
import io
import json
import math
import time

import numpy as np
import pytest
from oracles import brute_auc, central_difference, relative_error, sorted_coupling_cost

from fairsink.cli import main
from fairsink.dataspace import split_dataset
from fairsink.fairmetrics import auc, deodds, dpd, es_auc
from fairsink.harness.experiment import ExperimentConfig, ModelSpec, distance_report, median_group_distance, run_experiment
from fairsink.harness.synthetic import SyntheticConfig, generate_synthetic
from fairsink.harness.tables import aggregate, emit_tables
from fairsink.objective import (
    OFFICIAL_MODE,
    PAIRED_MODE,
    Batch,
    LossConfig,
    clip_loss,
    fair_regularizer,
    fairplus_regularizer,
    l2_normalize,
    similarity_scores,
    total_loss,
)
from fairsink.trainer import TrainConfig, train
from fairsink.transport import DistanceConfig, distance, distance_gradient, mmd, sinkhorn_divergence, sinkhorn_plan

# (source, row, overall AUC, group AUCs, reported ES-AUC), all in percentage points.
# Sources name the setting: probe = linear probing, zs = zero-shot, cross = models
# tuned on one attribute and scored on another, faces = face-attribute benchmark.
ES_AUC_ROWS = [
    ("probe-L14", "CLIP race", 76.48, [80.11, 73.38, 76.85], 71.42),
    ("probe-L14", "CLIP gender", 76.48, [73.47, 80.11], 71.72),
    ("probe-L14", "BLIP-2 race", 73.21, [76.31, 69.22, 73.45], 68.21),
    ("probe-L14", "BLIP-2-FT race", 78.81, [82.83, 74.05, 79.62], 71.91),
    ("probe-L14", "CLIP-FT gender", 78.96, [76.44, 81.95], 74.83),
    ("probe-L14", "CLIP ethnicity", 76.48, [76.69, 69.25], 71.19),
    ("probe-L14", "CLIP language", 76.48, [76.38, 81.82, 75.36], 71.77),
    ("probe-L14", "BLIP-2 language", 73.21, [72.74, 73.77, 76.65], 70.08),
    ("zs-B16", "CLIP-FT gender", 70.14, [67.17, 74.05], 65.62),
    ("zs-B16", "FairCLIP gender", 65.69, [63.21, 69.00], 62.10),
    ("zs-B16", "CLIP-FT ethnicity", 70.14, [70.49, 59.84], 63.39),
    ("zs-B16", "FairCLIP+ ethnicity", 67.78, [67.64, 73.23], 64.19),
    ("zs-B16", "FairCLIP language", 64.23, [64.37, 50.85, 56.22], 52.87),
    ("cross-B16", "FairCLIP ethnicity, race", 65.33, [69.70, 67.61, 63.88], 60.43),
    ("cross-B16", "FairCLIP race, gender", 66.34, [63.78, 69.67], 62.65),
    ("faces", "CLIP-FT race", 98.12, [98.44, 98.20, 94.97, 98.81, 99.34, 97.71, 98.63], 92.22),
    ("faces", "FairCLIP+ race", 98.15, [98.46, 98.29, 95.07, 98.79, 99.36, 97.79, 98.65], 92.39),
    ("faces", "CLIP-FT age", 98.12, [88.50, 91.53, 94.19, 99.07, 99.48, 99.47, 99.18, 98.11, 97.09], 77.92),
    ("faces", "FairCLIP race, age", 98.17, [88.07, 91.74, 94.36, 99.06, 99.46, 99.45, 99.21, 98.01, 97.34], 78.02),
    ("zs-L14", "CLIP-FT gender", 66.96, [64.25, 70.40], 63.08),
    ("zs-L14", "FairCLIP ethnicity", 67.13, [67.41, 59.57], 62.25),
    ("cross-L14", "FairCLIP language, ethnicity", 68.53, [68.86, 59.09], 62.44),
]

BIASED_DATA = SyntheticConfig(n_samples=2000, bias_magnitude={"ethnicity": {"Hispanic": 4.0}}, noise_sigma=0.3, seed=0)


def criterion_1_rows():
    out = []
    for source, name, overall, groups, reported in ES_AUC_ROWS:
        value = 100 * es_auc(overall / 100, [g / 100 for g in groups])
        out.append((source, name, value, reported, abs(value - reported)))
    return out


def test_criterion_01_es_auc_recomputation(verdict):
    start = time.perf_counter()
    rows = criterion_1_rows()
    elapsed = time.perf_counter() - start
    sources = {r[0] for r in rows}
    worst = max(r[4] for r in rows)
    ok = len(rows) >= 10 and worst <= 0.03 and len(sources) == 6 and elapsed < 1.0
    verdict(1, "ES-AUC recomputation", ok, f"{len(rows)} rows from {len(sources)} sources, worst |diff| {worst:.3f} pp")
    assert ok, [r for r in rows if r[4] > 0.03]
    anchors = {r[1]: r[2] for r in rows if r[0] == "probe-L14"}
    assert anchors["CLIP race"] == pytest.approx(71.42, abs=0.03)
    assert anchors["CLIP gender"] == pytest.approx(71.72, abs=0.03)


def _mmd_closed_form(x, y, k):
    """Hand-expanded kernel sums for at most two points per side."""
    n, m = len(x), len(y)
    kxx = sum(k(a, b) for a in x for b in x) / n**2
    kyy = sum(k(a, b) for a in y for b in y) / m**2
    kxy = sum(k(a, b) for a in x for b in y) / (n * m)
    return kxx + kyy - 2 * kxy


def test_criterion_02_transport_oracles(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(20240601)
    cfg = DistanceConfig(epsilon=1e-3, max_iterations=200_000, tolerance=1e-9)
    worst = 0.0
    for _ in range(200):
        n, m = rng.integers(1, 7, size=2)
        x, y = rng.uniform(-1, 1, n), rng.uniform(-1, 1, m)
        _, plan = sinkhorn_plan(x, y, cfg)
        cost = float(np.sum(plan.matrix * np.subtract.outer(x, y) ** 2))
        exact = sorted_coupling_cost(x, y)
        worst = max(worst, abs(cost - exact) / exact)
    gauss = lambda a, b: math.exp(-((a - b) ** 2) / 2)  # noqa: E731
    lap = lambda a, b: math.exp(-abs(a - b))  # noqa: E731
    fixtures = [([0.0], [1.0]), ([0.0], [0.0]), ([0.5], [-1.5]), ([0.0, 1.0], [0.5]),
                ([-0.3, 0.9], [0.2, 0.4]), ([1.0, 1.0], [1.0, 2.0]), ([2.0], [0.0, -2.0])]
    mmd_err = 0.0
    for x, y in fixtures:
        mmd_err = max(mmd_err, abs(mmd(x, y, DistanceConfig(kind="mmd_gaussian")) - _mmd_closed_form(x, y, gauss)))
        mmd_err = max(mmd_err, abs(mmd(x, y, DistanceConfig(kind="mmd_laplacian")) - _mmd_closed_form(x, y, lap)))
    elapsed = time.perf_counter() - start
    ok = worst <= 0.02 and mmd_err <= 1e-12 and elapsed < 30
    verdict(2, "transport oracles", ok,
            f"worst Sinkhorn cost rel. err {worst:.2e} over 200, worst MMD err {mmd_err:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_03_debiasing(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    self_max, asym_max = 0.0, 0.0
    for _ in range(1000):
        n, m = rng.integers(1, 33, size=2)
        x, y = rng.normal(size=n), rng.normal(rng.normal(), rng.uniform(0.2, 2), size=m)
        self_max = max(self_max, sinkhorn_divergence(x, x))
        asym_max = max(asym_max, abs(sinkhorn_divergence(x, y) - sinkhorn_divergence(y, x)))
    elapsed = time.perf_counter() - start
    ok = self_max <= 1e-9 and asym_max <= 1e-10 and elapsed < 30
    verdict(3, "debiasing", ok, f"max S(p,p) {self_max:.1e}, max |S(p,q)-S(q,p)| {asym_max:.1e}, {elapsed:.1f}s")
    assert ok


def _rand_batch(rng, n, d, groups_per_attr=(3, 2)):
    I = l2_normalize(rng.standard_normal((n, d)))
    T = l2_normalize(rng.standard_normal((n, d)))
    group_rows = {}
    for k, g in enumerate(groups_per_attr):
        labels = np.arange(n) % g
        rng.shuffle(labels)
        group_rows[f"a{k}"] = {f"g{j}": np.flatnonzero(labels == j) for j in range(g)}
    return Batch(I, T, rng.integers(0, 2, n), group_rows, validate=False)


def test_criterion_04_gradients(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = {}
    for kind in ("sinkhorn", "mmd_gaussian", "mmd_laplacian"):
        cfg = DistanceConfig(kind=kind)
        errs = []
        for _ in range(100):
            n, m = rng.integers(2, 9, size=2)
            x, y = rng.normal(size=n), rng.normal(rng.normal(), 1.0, size=m)
            errs.append(relative_error(distance_gradient(x, y, cfg), central_difference(lambda z: distance(z, y, cfg), x)))
        worst[kind] = max(errs)

    errs = []
    for _ in range(100):
        b = _rand_batch(rng, int(rng.integers(2, 9)), int(rng.integers(2, 6)))
        tau = float(rng.uniform(0.05, 1.0))
        _, g = clip_loss(b, tau)
        f = lambda I, T, t: clip_loss(Batch(I, T, b.labels, {}, validate=False), t)[0]  # noqa: E731
        num_i = central_difference(lambda z: f(z, b.text_features, tau), b.image_features)
        num_t = central_difference(lambda z: f(b.image_features, z, tau), b.text_features)
        num_tau = (f(b.image_features, b.text_features, tau + 1e-6) - f(b.image_features, b.text_features, tau - 1e-6)) / 2e-6
        errs.append(max(relative_error(g.image, num_i), relative_error(g.text, num_t), relative_error(g.temperature, num_tau)))
    worst["clip_loss"] = max(errs)

    errs = []
    for k in range(100):
        b = _rand_batch(rng, int(rng.integers(4, 11)), int(rng.integers(2, 5)))
        score_mode = PAIRED_MODE if k % 2 == 0 else OFFICIAL_MODE
        mode = "fairclip:a0" if k % 3 else "fairclip_plus"
        cfg = LossConfig(lam=float(rng.uniform(0.1, 2.0)), score_mode=score_mode, group_sample_size=4,
                         weights={"a0": 0.5, "a1": 0.5})
        seed = int(rng.integers(1000))
        _, g, _ = total_loss(b, cfg, mode, 0.2, seed=seed)
        f = lambda I, T: total_loss(Batch(I, T, b.labels, b.group_rows, validate=False), cfg, mode, 0.2, seed=seed)[0]  # noqa: E731
        num_i = central_difference(lambda z: f(z, b.text_features), b.image_features)
        num_t = central_difference(lambda z: f(b.image_features, z), b.text_features)
        errs.append(max(relative_error(g.image, num_i), relative_error(g.text, num_t)))
    worst["total_loss"] = max(errs)
    elapsed = time.perf_counter() - start
    ok = all(v <= 1e-4 for v in worst.values()) and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s"
    verdict(4, "gradient validation", ok, detail)
    assert ok


@functools.cache
def _median_ethnicity_distance(seed, lam):
    """Median per-group Sinkhorn distance on the test split after 20 epochs (lam 0 means clip_only)."""
    ds = generate_synthetic(BIASED_DATA)
    tr, va, te = split_dataset(ds, (0.7, 0.1, 0.2), seed)
    mode = "clip_only" if lam == 0 else "fairclip:ethnicity"
    cfg = TrainConfig(epochs=20, learning_rate=1e-3, seed=seed, mode=mode, loss=LossConfig(lam=lam))
    _, history = train(tr, va, None, cfg)
    rows = distance_report(history[-1].params, te, (DistanceConfig(max_iterations=2000),))
    return median_group_distance(rows, "ethnicity")


def _efficacy_ratios(lam):
    return [_median_ethnicity_distance(s, lam) / _median_ethnicity_distance(s, 0.0) for s in (1, 2, 3)]


def test_criterion_05_regularizer_efficacy(verdict):
    start = time.perf_counter()
    dominant = np.mean(generate_synthetic(BIASED_DATA).group_labels("ethnicity") == "Non-Hispanic")
    ratios = _efficacy_ratios(100.0)
    elapsed = time.perf_counter() - start
    ok = all(r <= 0.2 for r in ratios) and elapsed < 300
    verdict(5, "regularizer efficacy", ok,
            f"lambda 100, median ethnicity distance ratios {', '.join(f'{r:.3f}' for r in ratios)}, "
            f"dominant share {dominant:.3f}, {elapsed:.0f}s")
    assert ok


@pytest.mark.xfail(strict=True, reason="at lambda 1e-2 the regularizer gradient is swamped by the contrastive loss")
def test_criterion_05_smallest_lambda(verdict):
    ratios = _efficacy_ratios(1e-2)
    ok = all(r <= 0.2 for r in ratios)
    verdict(5, "regularizer efficacy at lambda 1e-2 (expected to miss)", ok,
            f"ratios {', '.join(f'{r:.3f}' for r in ratios)}")
    assert ok


def test_criterion_06_decoupled_columns(verdict, tmp_path):
    cfg = ExperimentConfig(
        dataset=SyntheticConfig(n_samples=400, bias_magnitude={"ethnicity": {"Hispanic": 4.0}}, seed=0),
        train=TrainConfig(epochs=2),
        models=(ModelSpec("CLIP-FT", "clip_only"), ModelSpec("FairCLIP", "fairclip:ethnicity", lam=100.0)),
        repeats=2,
        output_dir=str(tmp_path),
    )
    results = run_experiment(cfg)
    rows = list(csv.DictReader(io.StringIO((tmp_path / "report.csv").read_text())))
    filled = all(r["ES-AUC"] and r["Sinkhorn"] for r in rows)
    # both columns come from the same run records
    same_runs = all(r["status"] == "ok" and r["median_distance"]["ethnicity"] is not None for r in results)
    table = aggregate(results)
    counted = all(row["es_auc"]["n"] == row["sinkhorn"]["n"] == 2 for row in table["rows"])
    ok = bool(rows) and filled and same_runs and counted
    verdict(6, "distance and ES-AUC reported side by side", ok, f"{len(rows)} report rows, both columns filled")
    assert ok


def test_criterion_07_mode_discrepancy(verdict):
    start = time.perf_counter()
    T = l2_normalize(np.array([[1.0, 0.0], [1.0, 1.0]]))
    b = Batch(np.eye(2), T, [0, 1], {})
    paired, official = similarity_scores(b, PAIRED_MODE), similarity_scores(b, OFFICIAL_MODE)
    scores_ok = np.allclose(paired, [1.0, 1 / math.sqrt(2)], atol=1e-12) and np.allclose(official, [1.5, 0.5], atol=1e-12)

    ds = generate_synthetic(SyntheticConfig(n_samples=600, bias_magnitude={"ethnicity": {"Hispanic": 4.0}}, seed=0))
    tr, va, _ = split_dataset(ds, (0.7, 0.1, 0.2), 1)
    params = {}
    for name, score_mode in (("paired", PAIRED_MODE), ("official", OFFICIAL_MODE)):
        cfg = TrainConfig(epochs=3, seed=1, mode="fairclip:ethnicity", loss=LossConfig(lam=1.0, score_mode=score_mode))
        best, _ = train(tr, va, None, cfg)
        params[name] = best.params.image_projection
    diff = float(np.max(np.abs(params["paired"] - params["official"])))
    elapsed = time.perf_counter() - start
    ok = scores_ok and diff > 0 and elapsed < 120
    verdict(7, "mode discrepancy", ok, f"paired {np.round(paired, 4).tolist()} vs official {np.round(official, 4).tolist()}, "
                                       f"max checkpoint difference {diff:.2e}")
    assert ok


def test_criterion_08_fairplus_degeneration(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    same = True
    for k in range(20):
        b = _rand_batch(rng, 16, 4)
        for attr, other in (("a0", "a1"), ("a1", "a0")):
            cfg = LossConfig(weights={attr: 1.0, other: 0.0}, group_sample_size=8)
            v1, g1 = fairplus_regularizer(b, cfg, seed=k)
            v2, g2 = fair_regularizer(b, attr, cfg, seed=k)
            same &= v1 == v2 and np.array_equal(g1, g2)

    ds = generate_synthetic(SyntheticConfig(n_samples=400, weights={"race": 0.0, "gender": 0.0, "ethnicity": 1.0, "language": 0.0}, seed=0))
    tr, va, _ = split_dataset(ds, (0.7, 0.1, 0.2), 2)
    loss = LossConfig(lam=1.0, weights=ds.schema.weights)
    _, h_plus = train(tr, va, None, TrainConfig(epochs=2, seed=2, mode="fairclip_plus", loss=loss))
    _, h_one = train(tr, va, None, TrainConfig(epochs=2, seed=2, mode="fairclip:ethnicity", loss=loss))
    runs_same = all(
        np.array_equal(a.params.image_projection, b.params.image_projection)
        and np.array_equal(a.params.text_projection, b.params.text_projection)
        and a.train_loss == b.train_loss and a.regularizer_value == b.regularizer_value
        for a, b in zip(h_plus, h_one)
    )
    elapsed = time.perf_counter() - start
    ok = same and runs_same and elapsed < 60
    verdict(8, "weighted regularizer degenerates bit-exactly", ok, "40 batches and a 2-epoch training run compared")
    assert ok


def test_criterion_09_determinism(verdict, tmp_path):
    start = time.perf_counter()
    (tmp_path / "synth.json").write_text(json.dumps({"n_samples": 400, "bias_magnitude": {"ethnicity": {"Hispanic": 4.0}}}))
    assert main(["generate", "--config", str(tmp_path / "synth.json"), "--out", str(tmp_path / "data.jsonl")]) == 0
    doc = {
        "name": "det",
        "dataset": {"path": "data.jsonl", "schema": "data.schema.json"},
        "train": {"epochs": 2, "loss": {"lambda": 1.0}},
        "models": [{"name": "CLIP-FT", "mode": "clip_only"}, {"name": "FairCLIP", "mode": "fairclip:ethnicity"}],
        "repeats": 2,
    }
    texts = []
    for k in (1, 2):
        (tmp_path / "cfg.json").write_text(json.dumps(dict(doc, output_dir=f"out{k}")))
        assert main(["train", "--config", str(tmp_path / "cfg.json")]) == 0
        out = tmp_path / f"out{k}"
        assert main(["report", "--runs", str(out / "runs"), "--format", "csv", "--out", str(out / "cli_report.csv")]) == 0
        texts.append(((out / "report.csv").read_bytes(), (out / "cli_report.csv").read_bytes()))
    elapsed = time.perf_counter() - start
    ok = texts[0] == texts[1] and texts[0][0] == texts[0][1] and elapsed < 300
    verdict(9, "determinism", ok, f"two train+report invocations, byte-identical CSVs, {elapsed:.1f}s")
    assert ok


def test_criterion_10_metric_oracles(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        # integer scores force plenty of ties
        scores = rng.integers(0, 10, n) if rng.random() < 0.5 else rng.normal(size=n)
        worst = max(worst, abs(auc(scores, labels) - brute_auc(scores, labels)))
    fixtures = [
        dpd([1, 1, 0, 0, 1, 0, 0, 0], list("AAAABBBB")) == 0.25,
        dpd([1, 0, 1, 0], list("AABB")) == 0.0,
        dpd([1, 0, 1], list("AAA")) == 0.0,
        deodds([1, 1, 0, 0, 1, 0, 1, 0], [1, 1, 0, 0, 1, 1, 0, 0], list("AAAABBBB")) == 0.5,
        deodds([1, 0, 1, 0], [1, 0, 1, 0], list("AABB")) == 0.0,
        deodds([0] * 6, [1, 0, 1, 0, 1, 0], list("AABBCC")) == 0.0,
        auc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75,
    ]
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and all(fixtures) and elapsed < 30
    verdict(10, "metric oracles", ok, f"worst AUC err {worst:.1e} over 500 sets, {sum(fixtures)}/{len(fixtures)} fixtures")
    assert ok
