"""Forecasting and imputation benchmark: metrics, baselines and protocols."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import SpatioTemporalTensor, check_mask
from .errors import EvalError, ImputeError, WindowError
from .graph import AdjacencyMatrix
from .masks import (
    DEFAULT_BLOCK_DROP,
    DEFAULT_BLOCK_LENGTHS,
    DEFAULT_POINT_RATIO,
    block_missing_mask,
    point_missing_mask,
)
from .model import ModelState, forecast, impute
from .tokenizer import ClusterPlan
from .trainer import TrainConfig, TrainingSet, chronological_split, finetune_fewshot

MAPE_FLOOR = 1e-6
TASKS = ("forecast_short", "forecast_long", "impute_point", "impute_block")
SHOTS = ("zero", "few", "full")


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    mre: float | None
    mape_percent: float | None
    n_evaluated: int
    protocol: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = dict(self.protocol)
        out.update(
            mae=self.mae,
            rmse=self.rmse,
            mre=self.mre,
            mape_percent=self.mape_percent,
            n_evaluated=self.n_evaluated,
        )
        return out


def compute_metrics(
    y: np.ndarray,
    yhat: np.ndarray,
    eval_mask: np.ndarray | None = None,
    mape_floor: float = MAPE_FLOOR,
) -> MetricsReport:
    """MAE, RMSE, MRE and MAPE (percent) over the entries selected by ``eval_mask``.

    MAPE skips targets with ``|y| <= mape_floor``; MRE and MAPE are ``None``
    when undefined.
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise EvalError(f"shape mismatch {y.shape} vs {yhat.shape}")
    sel = np.ones(y.shape, dtype=bool) if eval_mask is None else np.asarray(eval_mask, dtype=bool)
    if sel.shape != y.shape:
        raise EvalError("eval_mask shape differs from the targets")
    yt, yp = y[sel], yhat[sel]
    n = yt.size
    if n == 0:
        raise EvalError("evaluation mask selects no entries")
    err = np.abs(yt - yp)
    mae = float(err.mean())
    rmse = float(np.sqrt((err**2).mean()))
    denom = float(np.abs(yt).sum())
    mre = float(err.sum() / denom) if denom > 0 else None
    nz = np.abs(yt) > mape_floor
    mape = float(100.0 * (err[nz] / np.abs(yt[nz])).mean()) if nz.any() else None
    return MetricsReport(mae, rmse, mre, mape, int(n))


# --------------------------------------------------------------------------
# baselines


def baseline_ha(history: np.ndarray, horizon: int) -> np.ndarray:
    """Replay the most recent window; longer horizons tile the history cyclically."""
    history = np.asarray(history)
    t_h = history.shape[1]
    if t_h < 1:
        raise WindowError("history must hold at least one step")
    idx = (t_h - horizon + np.arange(horizon)) % t_h
    return history[:, idx]


def _observed_mean(x: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = mask.astype(np.float64)
    count = w.sum(axis=1)
    return (x * w).sum(axis=1) / np.maximum(count, 1), count


def baseline_mean_impute(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill each missing entry with its node/channel's observed mean."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    mean, count = _observed_mean(x, mask)
    empty = np.argwhere(count == 0)
    if len(empty):
        raise ImputeError([tuple(e) for e in empty.tolist()])
    return np.where(mask, x, mean[:, None, :])


def knn_neighbours(adjacency: AdjacencyMatrix, k: int) -> list[np.ndarray]:
    """Up to ``k`` positively weighted neighbours per node, heaviest first, ties to lower index."""
    w = adjacency.weights
    out = []
    for i in range(w.shape[0]):
        cand = np.flatnonzero(w[i] > 0)
        cand = cand[cand != i]
        order = np.lexsort((cand, -w[i, cand]))
        out.append(cand[order][:k])
    return out


def baseline_knn_impute(
    x: np.ndarray, mask: np.ndarray, adjacency: AdjacencyMatrix, k: int = 10
) -> np.ndarray:
    """Average the observed values of the ``k`` heaviest graph neighbours.

    Entries whose neighbours are all missing at that step fall back to the
    node's observed mean.
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if adjacency.n_nodes != x.shape[0]:
        raise EvalError(f"adjacency has {adjacency.n_nodes} nodes, data has {x.shape[0]}")
    if k < 1:
        raise ValueError("k must be >= 1")
    mean, _ = _observed_mean(x, mask)
    filled = np.where(mask, x, mean[:, None, :])
    w = mask.astype(np.float64)
    for i, nb in enumerate(knn_neighbours(adjacency, k)):
        if len(nb) == 0:
            continue
        total = (x[nb] * w[nb]).sum(axis=0)
        count = w[nb].sum(axis=0)
        use = ~mask[i] & (count > 0)
        filled[i][use] = total[use] / count[use]
    return filled


# --------------------------------------------------------------------------
# subjects: anything with forecast() and/or impute()


class HistoricalAverage:
    name = "HA"

    def forecast(self, history, history_mask, horizon):
        return baseline_ha(history, horizon)


class MeanImputer:
    name = "Mean"

    def impute(self, x, mask):
        return baseline_mean_impute(x, mask)


class KNNImputer:
    name = "KNN"

    def __init__(self, adjacency: AdjacencyMatrix, k: int = 10):
        self.adjacency = adjacency
        self.k = k

    def impute(self, x, mask):
        return baseline_knn_impute(x, mask, self.adjacency, self.k)


class FoundationModel:
    """Wraps a trained :class:`ModelState` and a cluster plan for the protocols."""

    name = "UrbanFM"

    def __init__(self, state: ModelState, plan: ClusterPlan):
        self.state = state
        self.plan = plan

    def forecast(self, history, history_mask, horizon):
        return forecast(history, horizon, self.state, self.plan, history_mask)

    def impute(self, x, mask):
        return impute(x, mask, self.state, self.plan)

    def finetune(self, x: SpatioTemporalTensor, mask: np.ndarray, config: TrainConfig, fraction: float):
        data = TrainingSet.from_tensor(x, mask, self.plan)
        tuned, _ = finetune_fewshot(self.state, data, config, fraction)
        return FoundationModel(tuned, self.plan)


# --------------------------------------------------------------------------
# protocols


@dataclass
class ProtocolSpec:
    task: str = "forecast_short"
    history: int = 12
    horizon: int = 12
    point_ratio: float = DEFAULT_POINT_RATIO
    block_drop: float = DEFAULT_BLOCK_DROP
    block_len_range: tuple = DEFAULT_BLOCK_LENGTHS
    shot: str = "zero"
    fewshot_fraction: float = 0.10

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.shot not in SHOTS:
            raise ValueError(f"shot must be one of {SHOTS}")
        if self.task == "forecast_short" and self.horizon > 12:
            raise ValueError("short-term forecasting horizons are at most 12 steps")
        if self.task == "forecast_long" and self.horizon <= 12:
            raise ValueError("long-term forecasting horizons exceed 12 steps")

    @classmethod
    def named(cls, task: str, shot: str = "zero") -> "ProtocolSpec":
        if task == "forecast_long":
            return cls(task, 24, 24, shot=shot)
        return cls(task, 12, 12, shot=shot)

    @property
    def is_forecast(self) -> bool:
        return self.task.startswith("forecast")


def forecast_windows(test_range: tuple[int, int], history: int, horizon: int) -> list[int]:
    """Start steps of disjoint (history + horizon) windows inside the test range."""
    lo, hi = test_range
    span = history + horizon
    return list(range(lo, hi - span + 1, span))


def _protocol_record(spec: ProtocolSpec, x: SpatioTemporalTensor, seed: int, subject) -> dict:
    pattern = {"impute_point": "point", "impute_block": "block"}.get(spec.task, "none")
    return {
        "dataset": x.name,
        "subject": getattr(subject, "name", type(subject).__name__),
        "task": spec.task,
        "horizon": spec.horizon if spec.is_forecast else 0,
        "shot": spec.shot,
        "missing_pattern": pattern,
        "seed": seed,
    }


def run_protocol(
    subject,
    x: SpatioTemporalTensor,
    mask: np.ndarray | None,
    spec: ProtocolSpec,
    seed: int = 0,
    train_config: TrainConfig | None = None,
) -> MetricsReport:
    """Evaluate ``subject`` on the test split of ``x`` under ``spec``.

    Few-shot fine-tunes on the earliest ``fewshot_fraction`` of the train
    split first, full-shot on all of it. Forecasting averages metrics over
    every horizon step of every disjoint window; imputation scores only
    artificially hidden entries that were observed in the original data.
    """
    mask = np.ones(x.shape, dtype=bool) if mask is None else check_mask(x, mask)
    split = chronological_split(x.n_steps)
    if spec.shot != "zero" and hasattr(subject, "finetune"):
        cfg = train_config or TrainConfig(seed=seed)
        fraction = spec.fewshot_fraction if spec.shot == "few" else 1.0
        subject = subject.finetune(x, mask, cfg, fraction)

    lo, hi = split.test
    if spec.is_forecast:
        starts = forecast_windows(split.test, spec.history, spec.horizon)
        if not starts:
            raise WindowError(f"test range of {hi - lo} steps cannot hold one forecast window")
        ys, preds, sel = [], [], []
        for s in starts:
            hist = slice(s, s + spec.history)
            fut = slice(s + spec.history, s + spec.history + spec.horizon)
            pred = subject.forecast(x.values[:, hist], mask[:, hist], spec.horizon)
            ys.append(x.values[:, fut])
            preds.append(np.asarray(pred, dtype=np.float64))
            sel.append(mask[:, fut])
        report = compute_metrics(np.stack(ys), np.stack(preds), np.stack(sel))
    else:
        y = x.values[:, lo:hi]
        orig = mask[:, lo:hi]
        if spec.task == "impute_point":
            kept = point_missing_mask(y.shape, spec.point_ratio, seed)
        else:
            kept = block_missing_mask(y.shape, spec.block_drop, spec.block_len_range, seed)
        visible = orig & kept
        eval_mask = orig & ~kept
        filled = subject.impute(np.where(visible, y, 0.0), visible)
        report = compute_metrics(y, np.asarray(filled, dtype=np.float64), eval_mask)
    report.protocol = _protocol_record(spec, x, seed, subject)
    return report


# --------------------------------------------------------------------------
# report output

REPORT_COLUMNS = (
    "dataset", "subject", "task", "horizon", "shot", "missing_pattern", "seed",
    "mae", "rmse", "mre", "mape_percent", "n_evaluated",
)


def _fmt(value) -> str:
    if value is None:
        return "undefined"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_reports_csv(path: str | Path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            row = r.row()
            writer.writerow([_fmt(row.get(c)) for c in REPORT_COLUMNS])


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned text table, one row per (dataset, task, horizon) and metrics as columns."""
    header = ["Dataset", "Subject", "Task", "Horizon", "Shot", "MAE", "RMSE", "MAPE%"]
    rows = [header]
    for r in reports:
        p = r.protocol
        rows.append([
            str(p.get("dataset", "")), str(p.get("subject", "")), str(p.get("task", "")),
            str(p.get("horizon", "")), str(p.get("shot", "")),
            f"{r.mae:.4f}", f"{r.rmse:.4f}",
            "undefined" if r.mape_percent is None else f"{r.mape_percent:.2f}",
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def relative_improvement(model: MetricsReport, baseline: MetricsReport) -> float:
    """Fractional MAE reduction of ``model`` relative to ``baseline``."""
    if baseline.mae == 0:
        return 0.0 if model.mae == 0 else -math.inf
    return 1.0 - model.mae / baseline.mae
