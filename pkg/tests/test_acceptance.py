"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""

import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from urbanst import numeric as nc
from urbanst.cli import main
from urbanst.dataset import (
    SpatioTemporalTensor,
    clip_outliers,
    precomplete,
    remove_static_nodes,
    resample,
)
from urbanst.errors import EmptyDatasetError
from urbanst.evaluation import (
    FoundationModel,
    HistoricalAverage,
    MeanImputer,
    ProtocolSpec,
    compute_metrics,
    run_protocol,
)
from urbanst.gradcheck import run_suite
from urbanst.masks import block_missing_mask, point_missing_mask
from urbanst.model import ModelConfig, init_model
from urbanst.synthetic import ring_sinusoids
from urbanst.tokenizer import INVALID, build_clusters, cluster_dataset, locality_score, random_plan
from urbanst.trainer import TrainConfig, TrainingSet, evaluate_loss, train, validation_batches

SMALL = ModelConfig(d_model=16, n_heads=2, n_temporal_layers=1, n_spatial_layers=1, ffn_mult=2, S_p=16, T_p=24)


@pytest.fixture
def verdict(capsys):
    def report(number: int, title: str, ok: bool, detail: str = ""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, detail

    return report


def small_train_config(seed: int, **kw) -> TrainConfig:
    base = dict(epochs=5, steps_per_epoch=20, batch_size=8, seed=seed, patience=100, learning_rate=3e-3)
    base.update(kw)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# 1. gradients


def test_gradient_suite(verdict):
    start = time.perf_counter()
    reports = run_suite(seed=0, tol=1e-4)
    elapsed = time.perf_counter() - start
    failed = [r.name for r in reports if not r.passed]
    names = {r.name for r in reports}
    required = {"matmul", "softmax", "attention", "rope_attention", "revin", "forward+masked_mae"}
    ok = not failed and required <= names and elapsed < 60
    verdict(1, "gradient suite at 1e-4 in float64", ok, f"{len(reports)} ops, {elapsed:.1f}s, failed={failed}")


# --------------------------------------------------------------------------
# 2. RoPE


def test_rope_shift_invariance(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for d in (4, 8, 16, 32):
        for _ in range(1000):
            q, k = rng.normal(size=(1, d)), rng.normal(size=(1, d))
            m, n = rng.integers(0, 512, size=2)
            s = int(rng.integers(-256, 256))
            a = nc.rope_apply(q, [m]) @ nc.rope_apply(k, [n]).T
            b = nc.rope_apply(q, [m + s]) @ nc.rope_apply(k, [n + s]).T
            worst = max(worst, abs((a - b).item()))
    verdict(2, "RoPE shift invariance", worst <= 1e-6, f"max |diff| {worst:.2e} over 4x1000 draws")


# --------------------------------------------------------------------------
# 3. clustering


def _invariant_violations(pts, cap, mode) -> list[str]:
    n = len(pts)
    plan = build_clusters(pts, cap, mode)
    again = build_clusters(pts, cap, mode)
    bad = []
    if plan.index.shape != (max(1, math.ceil(n / cap)), cap):
        bad.append("capacity")
    if not (np.array_equal(plan.index, again.index) and np.array_equal(plan.valid, again.valid)):
        bad.append("determinism")
    members = plan.index[plan.valid]
    if set(members.tolist()) != set(range(n)):
        bad.append("coverage")
    if mode == "binary_mask" and (sorted(members.tolist()) != list(range(n))
                                  or np.any(plan.index[~plan.valid] != INVALID)):
        bad.append("binary_mask partition")
    if mode == "neighbor_fill" and not plan.valid.all():
        bad.append("neighbor_fill padding")
    return bad


def _edge_case_failures() -> list[str]:
    failures = []
    line = np.arange(7, dtype=float)[:, None] * [1.0, 0.0]
    for mode in ("binary_mask", "neighbor_fill"):
        plan = build_clusters(line, 7, mode)
        if plan.n_clusters != 1 or sorted(plan.index[0].tolist()) != list(range(7)) or not plan.valid.all():
            failures.append(f"S_p=N {mode}")
    for n, cap in [(3, 5), (4, 9), (5, 16), (1, 4)]:
        pts = line[:n]
        full, rem = divmod(cap, n)
        fill = build_clusters(pts, cap, "neighbor_fill").index[0]
        head = fill[:n]
        expected = np.concatenate([np.tile(head, full), head[:rem]])
        if sorted(head.tolist()) != list(range(n)) or not np.array_equal(fill, expected):
            failures.append(f"repeat-fill n={n} S_p={cap}")
        pad = build_clusters(pts, cap, "binary_mask")
        if pad.valid[0].sum() != n or np.any(pad.index[0, n:] != INVALID):
            failures.append(f"pad n={n} S_p={cap}")
    pts = line[:5]
    short = build_clusters(pts, 2, "binary_mask")
    if short.index[-1].tolist() != [4, INVALID] or short.valid[-1].tolist() != [True, False]:
        failures.append("short last cluster binary_mask")
    topped = build_clusters(pts, 2, "neighbor_fill")
    if topped.index.tolist() != [[0, 1], [2, 3], [4, 3]] or not topped.valid.all():
        failures.append("short last cluster neighbor_fill")
    return failures


def test_clustering(verdict):
    rng = np.random.default_rng(3)
    violations = []
    for trial in range(200):
        n = int(rng.integers(1, 501))
        cap = int(rng.choice([1, 4, 16, 64]))
        pts = rng.uniform(0, 100, size=(n, 2))
        for mode in ("binary_mask", "neighbor_fill"):
            violations += [f"trial {trial} {mode}: {v}" for v in _invariant_violations(pts, cap, mode)]
    edge = _edge_case_failures()
    wins = 0
    for trial in range(100):
        pts = rng.uniform(0, 100, size=(200, 2))
        kd = locality_score(build_clusters(pts, 16), pts)
        wins += kd <= locality_score(random_plan(200, 16, rng), pts)
    ok = not violations and not edge and wins >= 95
    verdict(3, "clustering invariants, edge cases and locality", ok,
            f"violations={violations[:3]}, edge={edge}, KD wins {wins}/100")


# --------------------------------------------------------------------------
# 4. pipeline


def _tensor(values) -> SpatioTemporalTensor:
    n = values.shape[0]
    coords = np.stack([np.linspace(10, 11, n), np.linspace(20, 21, n)], 1)
    return SpatioTemporalTensor(values, "sensor", coords, 5, 0, "case")


def _clip_case(rng) -> bool:
    n, t, c = rng.integers(1, 6), rng.integers(2, 60), rng.integers(1, 3)
    v = rng.normal(size=(n, t, c)) * rng.uniform(0.1, 10)
    v[rng.random(v.shape) < 0.05] *= 50
    mask = rng.random(v.shape) < 0.8 if rng.random() < 0.5 else None
    out = clip_outliers(_tensor(v), mask).values
    obs = np.ones(v.shape, bool) if mask is None else mask
    for i in range(n):
        for j in range(c):
            sel = obs[i, :, j]
            if not sel.any():
                continue
            mu, sd = v[i, sel, j].mean(), v[i, sel, j].std()
            vals = out[i, sel, j]
            tol = 1e-9 * max(1.0, abs(mu) + 3 * sd)
            if vals.min() < mu - 3 * sd - tol or vals.max() > mu + 3 * sd + tol:
                return False
    return bool(np.array_equal(out[~obs], v[~obs]))


def _static_case(rng) -> bool:
    n, t = rng.integers(1, 8), rng.integers(2, 40)
    v = rng.normal(size=(n, t, 1)) * rng.uniform(0.001, 2, size=(n, 1, 1))
    v[rng.random(n) < 0.3] = rng.normal()
    variances = v.var(axis=1).max(axis=1)
    eps = float(variances[rng.integers(n)]) if rng.random() < 0.5 else 1e-8
    expected = [i for i in range(n) if variances[i] > eps]
    try:
        _, kept = remove_static_nodes(_tensor(v), eps)
    except EmptyDatasetError:
        return not expected
    return kept == expected


def _precomplete_case(rng) -> bool:
    n, t = rng.integers(1, 5), rng.integers(2, 60)
    v = rng.normal(size=(n, t, 1))
    mask = rng.random(v.shape) < rng.uniform(0.2, 1.0)
    gap = int(rng.integers(1, 8))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out, out_mask = precomplete(_tensor(v), mask, gap)
    if np.any(mask & ~out_mask) or not np.array_equal(out.values[mask], v[mask]):
        return False
    # runs longer than the gap stay missing
    for i in range(n):
        obs = mask[i, :, 0]
        padded = np.concatenate([[True], obs, [True]])
        edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
        for a, b in zip(edges[::2], edges[1::2]):
            if obs.any() and (b - a > gap) == out_mask[i, a:b, 0].any():
                return False
    return True


def _resample_case(rng) -> bool:
    n, t, c = rng.integers(1, 4), rng.integers(1, 50), rng.integers(1, 3)
    v = rng.normal(size=(n, t, c))
    x = _tensor(v)
    if not np.array_equal(resample(x, 5).values, v):
        return False
    k = int(rng.integers(2, 6))
    if t >= k:
        for agg in ("mean", "sum"):
            down = resample(x, 5 * k, agg).values
            if down.shape[1] != t // k:
                return False
            for j in range(t // k):
                window = v[:, j * k:(j + 1) * k]
                ref = window.mean(axis=1) if agg == "mean" else window.sum(axis=1)
                if not np.allclose(down[:, j], ref, atol=1e-12):
                    return False
    up = resample(x, 1).values
    if up.shape[1] != (t - 1) * 5 + 1 or not np.array_equal(up[:, ::5], v):
        return False
    return t == 1 or np.allclose(up[:, 2], v[:, 0] + 0.4 * (v[:, 1] - v[:, 0]), atol=1e-12)


@pytest.mark.parametrize("name,case", [("3-sigma bounds", _clip_case), ("static-node strictness", _static_case),
                                       ("precomplete monotonicity", _precomplete_case),
                                       ("resample identity and arithmetic", _resample_case)])
def test_pipeline_invariants(verdict, name, case):
    rng = np.random.default_rng(4)
    failures = sum(not case(rng) for _ in range(1000))
    verdict(4, f"pipeline {name}", failures == 0, f"{failures}/1000 failing")


# --------------------------------------------------------------------------
# 5. metrics


def _loop_metrics(y, yhat, sel):
    n = abs_sum = sq_sum = y_sum = pct_sum = 0.0
    n_pct = 0
    for a, b, s in zip(y.ravel(), yhat.ravel(), sel.ravel()):
        if not s:
            continue
        e = abs(a - b)
        n += 1
        abs_sum += e
        sq_sum += e * e
        y_sum += abs(a)
        if abs(a) > 1e-6:
            pct_sum += e / abs(a)
            n_pct += 1
    return abs_sum / n, math.sqrt(sq_sum / n), abs_sum / y_sum, 100 * pct_sum / n_pct


def test_metrics(verdict):
    rng = np.random.default_rng(5)
    worst, ordered = 0.0, True
    for _ in range(100):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        y = rng.normal(size=shape) * 5
        y[rng.random(shape) < 0.1] = 0.0
        y.flat[0] = 1.5
        yhat = y + rng.normal(size=shape)
        sel = rng.random(shape) < 0.8
        sel.flat[0] = True
        r = compute_metrics(y, yhat, sel)
        ref = _loop_metrics(y, yhat, sel)
        got = (r.mae, r.rmse, r.mre, r.mape_percent)
        worst = max(worst, max(abs(a - b) / max(1.0, abs(b)) for a, b in zip(got, ref)))
        ordered &= r.rmse >= r.mae
    w = compute_metrics(np.array([2.0, 4.0]), np.array([1.0, 5.0]))
    worked = (w.mae, w.rmse, w.mre, w.mape_percent) == (1.0, 1.0, 1 / 3, 37.5)
    verdict(5, "metric oracle", worst <= 1e-9 and ordered and worked,
            f"max rel diff {worst:.1e}, rmse>=mae {ordered}, worked example {worked}")


# --------------------------------------------------------------------------
# 6. masks


def test_mask_calibration(verdict):
    shape = (300, 2000, 1)
    point = 1 - point_missing_mask(shape, 0.25, seed=6).mean()
    block = 1 - block_missing_mask(shape, 0.05, seed=6).mean()
    ok = abs(point - 0.25) <= 0.02 * 0.25 and abs(block - 0.05) <= 0.01
    verdict(6, "mask calibration", ok, f"point {point:.4f}, block {block:.4f}")


# --------------------------------------------------------------------------
# 7. desk-scale learning


def test_desk_scale_learning(verdict):
    start = time.perf_counter()
    x, mask = ring_sinusoids(32, 4000, seed=0)
    cfg = ModelConfig()
    plan = cluster_dataset(x, cfg.S_p)
    state, _ = train(init_model(cfg, 0), TrainingSet.from_tensor(x, mask, plan),
                     TrainConfig(steps_per_epoch=20, batch_size=8, seed=0))
    model = FoundationModel(state, plan)
    fc = run_protocol(model, x, mask, ProtocolSpec.named("forecast_short"))
    ha = run_protocol(HistoricalAverage(), x, mask, ProtocolSpec.named("forecast_short"))
    im = run_protocol(model, x, mask, ProtocolSpec.named("impute_point"))
    mean = run_protocol(MeanImputer(), x, mask, ProtocolSpec.named("impute_point"))
    elapsed = time.perf_counter() - start
    ok = fc.mae <= 0.7 * ha.mae and im.mae <= 0.8 * mean.mae and elapsed < 600
    verdict(7, "desk-scale learning", ok,
            f"forecast {fc.mae:.4f} vs HA {ha.mae:.4f}, impute {im.mae:.4f} vs Mean {mean.mae:.4f}, "
            f"{elapsed:.0f}s")


# --------------------------------------------------------------------------
# 8. few-shot


def test_fewshot_improves(verdict):
    wins, detail = 0, []
    for seed in range(5):
        x, mask = ring_sinusoids(32, 2000, seed=seed)
        state, _ = train(init_model(SMALL, seed), TrainingSet.from_tensor(x, mask, cluster_dataset(x, 16)),
                         small_train_config(seed))
        y, ymask = ring_sinusoids(24, 2000, periods=(36.0, 120.0), offset=(5.0, 8.0), seed=100 + seed,
                                  name="shifted")
        model = FoundationModel(state, cluster_dataset(y, 16))
        zero = run_protocol(model, y, ymask, ProtocolSpec.named("forecast_short", "zero"), seed)
        few = run_protocol(model, y, ymask, ProtocolSpec.named("forecast_short", "few"), seed,
                           small_train_config(seed))
        wins += few.mae < zero.mae
        detail.append(f"{zero.mae:.3f}->{few.mae:.3f}")
    verdict(8, "few-shot beats zero-shot", wins >= 4, f"{wins}/5 seeds: {', '.join(detail)}")


# --------------------------------------------------------------------------
# 9. scaling


CORPUS_PERIODS = [(24.0, 168.0), (12.0, 60.0), (36.0, 96.0), (18.0, 144.0), (48.0, 120.0)]


def test_scaling_direction(verdict):
    wins, detail = 0, []
    for seed in range(5):
        corpus = []
        for i in range(10):
            x, mask = ring_sinusoids(16, 1000, periods=CORPUS_PERIODS[i % 5], offset=(1.0 + i, 3.0 + i),
                                     seed=1000 * seed + i)
            corpus.append(TrainingSet.from_tensor(x, mask, cluster_dataset(x, 16)))
        val = [b for d in corpus for b in validation_batches(d, TrainConfig(), SMALL.T_p)]
        # equal step counts: 10 sets x 2 steps against 1 set x 20 steps per epoch
        full, _ = train(init_model(SMALL, seed), corpus, small_train_config(seed, epochs=10, steps_per_epoch=2))
        part, _ = train(init_model(SMALL, seed), corpus[:1], small_train_config(seed, epochs=10))
        a, b = evaluate_loss(full, val), evaluate_loss(part, val)
        wins += a <= b
        detail.append(f"{a:.4f}<={b:.4f}")
    verdict(9, "more pre-training data helps", wins >= 4, f"{wins}/5 seeds: {', '.join(detail)}")


# --------------------------------------------------------------------------
# 10. reproducibility

TINY_CONFIG = """\
d_model = 8
n_heads = 2
n_temporal_layers = 1
n_spatial_layers = 1
ffn_mult = 2
S_p = 4
T_p = 24
epochs = 2
steps_per_epoch = 2
batch_size = 4
"""


def _write_csv(root: Path) -> None:
    rng = np.random.default_rng(10)
    rows = ["time,a,b,c,d"]
    for t in range(120):
        cells = [f"{v:.4f}" for v in rng.normal(size=4)]
        if t % 17 == 3:
            cells[1] = ""
        rows.append(",".join([str(60 * t)] + cells))
    (root / "raw.csv").write_text("\n".join(rows) + "\n")
    (root / "coords.csv").write_text("node,lat,lon\na,1.0,2.0\nb,1.1,2.0\nc,1.2,2.1\nd,1.3,2.2\n")


def _workflows(root: Path) -> list[list[str]]:
    r = str(root)
    return [
        ["synth", "--kind", "sinusoid", "--nodes", "8", "--steps", "400", "--seed", "3", "--out", f"{r}/ring"],
        ["synth", "--kind", "grid", "--width", "3", "--height", "3", "--steps", "300", "--out", f"{r}/grid"],
        ["synth", "--kind", "random_walk", "--nodes", "5", "--steps", "300", "--out", f"{r}/walk"],
        ["ingest", "--csv", f"{r}/raw.csv", "--coords", f"{r}/coords.csv", "--target-dt", "5", "--out", f"{r}/ing"],
        ["graph", "--dataset", f"{r}/ring", "--kind", "gaussian", "--out", f"{r}/g_ring"],
        ["graph", "--dataset", f"{r}/grid", "--kind", "moore", "--out", f"{r}/g_grid"],
        ["cluster", "--dataset", f"{r}/ring", "--sp", "4", "--fill-mode", "neighbor_fill", "--out", f"{r}/plan"],
        ["pretrain", "--dataset", f"{r}/ring", "--dataset", f"{r}/walk", "--config", f"{r}/cfg.txt",
         "--seed", "2", "--out", f"{r}/pt"],
        ["finetune", "--checkpoint", f"{r}/pt/checkpoint", "--dataset", f"{r}/grid", "--fraction", "0.5",
         "--config", f"{r}/cfg.txt", "--out", f"{r}/ft"],
        ["evaluate", "--checkpoint", f"{r}/pt/checkpoint", "--dataset", f"{r}/ring", "--protocol", "impute_block",
         "--out", f"{r}/ev_zero"],
        ["evaluate", "--checkpoint", f"{r}/pt/checkpoint", "--dataset", f"{r}/ring", "--protocol",
         "forecast_short", "--shot", "few", "--config", f"{r}/cfg.txt", "--out", f"{r}/ev_few"],
        ["evaluate", "--baseline", "ha", "--dataset", f"{r}/ring", "--protocol", "forecast_long", "--out", f"{r}/ev_ha"],
        ["evaluate", "--baseline", "knn", "--adjacency", f"{r}/g_grid", "--dataset", f"{r}/grid",
         "--protocol", "impute_point", "--out", f"{r}/ev_knn"],
        ["gradcheck", "--out", f"{r}/gc"],
    ]


def _outputs(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def test_cli_reproducibility(verdict, tmp_path):
    runs = []
    for name in ("first", "second"):
        root = tmp_path / name
        root.mkdir()
        (root / "cfg.txt").write_text(TINY_CONFIG)
        _write_csv(root)
        codes = [main(argv) for argv in _workflows(root)]
        assert codes == [0] * len(codes), codes
        runs.append(_outputs(root))
    differing = sorted(k for k in runs[0] if runs[0][k] != runs[1].get(k))
    ok = not differing and runs[0].keys() == runs[1].keys()
    verdict(10, "CLI reruns are byte-identical", ok, f"{len(runs[0])} files, differing={differing}")
