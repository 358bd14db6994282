"""Masked-reconstruction pre-training, few-shot fine-tuning and early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import SpatioTemporalTensor, check_mask, read_descriptor
from .errors import ConfigError, DivergenceError, SplitError, WindowError
from .masks import block_missing_mask
from .model import ModelState, loss_and_grads, loss_weight, forward
from .numeric import masked_mae_vjp
from .tokenizer import ClusterPlan, PatchBatch, gather_patches

logger = logging.getLogger(__name__)

OBJECTIVES = ("future", "point", "block")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    seed: int = 0
    objective_mix: dict = field(default_factory=lambda: {"future": 0.6, "point": 0.2, "block": 0.2})
    history_steps: tuple = (12, 24, 36)
    steps_per_epoch: int = 0  # 0: one pass worth of non-overlapping patches
    point_ratio: float = 0.25
    block_drop: float = 0.05
    block_len_range: tuple = (4, 12)
    context_noise: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs, batch_size and patience must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        unknown = set(self.objective_mix) - set(OBJECTIVES)
        if unknown:
            raise ConfigError(f"unknown objectives {sorted(unknown)}")
        weights = list(self.objective_mix.values())
        if any(w < 0 for w in weights) or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
            raise ConfigError("objective_mix weights must be non-negative and sum to 1")
        self.history_steps = tuple(int(h) for h in self.history_steps)
        self.block_len_range = tuple(int(b) for b in self.block_len_range)

    @property
    def float_dtype(self):
        return np.dtype(self.dtype)

    def history_choices(self, patch_steps: int) -> list[int]:
        valid = [h for h in self.history_steps if 1 <= h < patch_steps]
        return valid or [max(1, patch_steps // 2)]


def _parse_mix(text: str) -> dict:
    mix = {}
    for part in text.split(","):
        key, _, value = part.partition(":")
        mix[key.strip()] = float(value)
    return mix


def parse_config_entries(entries: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name not in entries:
            continue
        raw = entries[f.name]
        if f.name == "objective_mix":
            kwargs[f.name] = _parse_mix(raw)
        elif f.name in ("history_steps", "block_len_range"):
            kwargs[f.name] = tuple(int(v) for v in raw.split(","))
        elif f.name == "dtype":
            kwargs[f.name] = raw
        elif f.type == "float":
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    return TrainConfig(**kwargs)


def load_train_config(path: str | Path) -> TrainConfig:
    """Read ``key = value`` lines; keys that are not training fields are ignored."""
    return parse_config_entries(read_descriptor(Path(path)))


# --------------------------------------------------------------------------
# splits and sampling


@dataclass(frozen=True)
class SplitIndex:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]


def chronological_split(n_steps: int) -> SplitIndex:
    """6:2:2 split by time, boundaries rounded down."""
    if n_steps < 5:
        raise SplitError(f"{n_steps} steps cannot be split 6:2:2")
    a = (6 * n_steps) // 10
    b = (8 * n_steps) // 10
    split = SplitIndex((0, a), (a, b), (b, n_steps))
    if min(a, b - a, n_steps - b) <= 0:
        raise SplitError(f"empty split for T={n_steps}")
    return split


@dataclass
class TrainingSet:
    """One dataset prepared for training: tensor, mask, cluster plan and time ranges."""

    x: SpatioTemporalTensor
    mask: np.ndarray
    plan: ClusterPlan
    split: SplitIndex
    sample_range: tuple[int, int] | None = None

    @classmethod
    def from_tensor(cls, x: SpatioTemporalTensor, mask: np.ndarray, plan: ClusterPlan) -> "TrainingSet":
        return cls(x, check_mask(x, mask), plan, chronological_split(x.n_steps))

    @property
    def train_range(self) -> tuple[int, int]:
        return self.sample_range or self.split.train

    def restricted(self, fraction: float) -> "TrainingSet":
        """Same set, sampling limited to the first ``ceil(fraction * train_len)`` train steps."""
        if not 0 < fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        lo, hi = self.split.train
        length = math.ceil(fraction * (hi - lo))
        return TrainingSet(self.x, self.mask, self.plan, self.split, (lo, lo + length))


def _objective_for(kind: str, shape, history: int, config: TrainConfig, rng) -> np.ndarray:
    s, t, c = shape
    if kind == "future":
        obj = np.zeros(shape, dtype=bool)
        obj[:, history:] = True
        return obj
    if kind == "point":
        return rng.random(shape) < config.point_ratio
    return ~block_missing_mask((s, t, c), config.block_drop, config.block_len_range, rng)


def _drop_starved_slots(batch: PatchBatch, objective: np.ndarray) -> None:
    """Demote slots left without any context step to padding, in place."""
    context = batch.value_mask & ~objective
    starved = batch.slot_mask & ~context.any(axis=2).all(axis=-1)
    if starved.any():
        batch.slot_mask &= ~starved
        keep = batch.slot_mask[:, :, None, None]
        batch.data = np.where(keep, batch.data, 0.0)
        batch.value_mask &= keep
        objective &= keep


def sample_training_batch(
    data: TrainingSet,
    config: TrainConfig,
    patch_steps: int,
    rng: np.random.Generator,
    batch_size: int | None = None,
) -> tuple[PatchBatch, np.ndarray]:
    """Random (cluster, window) patches from the sampling range plus one objective each."""
    lo, hi = data.train_range
    if hi - lo < patch_steps:
        raise WindowError(f"sampling range of {hi - lo} steps is shorter than T_p={patch_steps}")
    b = batch_size or config.batch_size
    cluster_ids = rng.integers(data.plan.n_clusters, size=b)
    starts = rng.integers(lo, hi - patch_steps + 1, size=b)
    batch = gather_patches(data.x.values, data.mask, data.plan, cluster_ids, starts, patch_steps)
    names = list(config.objective_mix)
    probs = np.array([config.objective_mix[k] for k in names], dtype=np.float64)
    kinds = rng.choice(len(names), size=b, p=probs / probs.sum())
    histories = config.history_choices(patch_steps)
    objective = np.zeros(batch.data.shape, dtype=bool)
    patch_shape = batch.data.shape[1:]
    for i in range(b):
        h = histories[rng.integers(len(histories))]
        objective[i] = _objective_for(names[kinds[i]], patch_shape, h, config, rng)
    objective &= batch.value_mask
    _drop_starved_slots(batch, objective)
    return batch, objective


def validation_batches(
    data: TrainingSet, config: TrainConfig, patch_steps: int, history: int | None = None
) -> list[tuple[PatchBatch, np.ndarray]]:
    """Deterministic future-mask batches tiling the validation range."""
    lo, hi = data.split.val
    if hi - lo < patch_steps:
        return []
    history = history or config.history_choices(patch_steps)[0]
    starts = np.arange(lo, hi - patch_steps + 1, patch_steps)
    k = data.plan.n_clusters
    cluster_ids = np.repeat(np.arange(k), len(starts))
    all_starts = np.tile(starts, k)
    out = []
    for i in range(0, len(cluster_ids), config.batch_size):
        batch = gather_patches(
            data.x.values, data.mask, data.plan,
            cluster_ids[i:i + config.batch_size], all_starts[i:i + config.batch_size], patch_steps,
        )
        objective = np.zeros(batch.data.shape, dtype=bool)
        objective[:, :, history:] = True
        objective &= batch.value_mask
        _drop_starved_slots(batch, objective)
        if batch.slot_mask.any(axis=1).all():
            out.append((batch, objective))
    return out


def evaluate_loss(state: ModelState, batches: Sequence[tuple[PatchBatch, np.ndarray]]) -> float:
    """Masked MAE pooled over every target position of the given batches."""
    total = 0.0
    count = 0.0
    for batch, objective in batches:
        recon = forward(state, batch, objective)
        w = loss_weight(batch, objective)
        n = float(w.sum())
        if n == 0:
            continue
        loss, _ = masked_mae_vjp(recon, batch.data.astype(recon.dtype), w)
        total += float(loss) * n
        count += n
    return total / count if count else float("nan")


# --------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, g in grads.items():
            g = g.astype(params[name].dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[name] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[name].dtype)


class EarlyStopping:
    """Signals a stop once ``patience`` epochs pass without a new best value."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.wait = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


@dataclass
class TrainHistory:
    epochs: list[tuple[int, float, float]] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    initial_val_loss: float = math.nan
    best_epoch: int = 0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for epoch, tr, va in self.epochs:
                writer.writerow([epoch, f"{tr:.8g}", f"{va:.8g}"])


def _auto_steps(data: TrainingSet, patch_steps: int, batch_size: int) -> int:
    lo, hi = data.train_range
    patches = max(1, (hi - lo) // patch_steps) * data.plan.n_clusters
    return max(1, math.ceil(patches / batch_size))


def train(
    state: ModelState,
    data: TrainingSet | Sequence[TrainingSet],
    config: TrainConfig,
) -> tuple[ModelState, TrainHistory]:
    """Adam on masked MAE; returns the parameters with the best validation loss.

    The starting parameters are scored too, so the result never validates
    worse than the input. Each epoch visits the datasets in a shuffled order,
    taking ``steps_per_epoch`` batches from each.
    """
    sets = [data] if isinstance(data, TrainingSet) else list(data)
    cfg = state.config
    state = state.astype(config.float_dtype)
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(state.params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    val_sets = [validation_batches(s, config, cfg.T_p) for s in sets]
    val_batches = [b for vs in val_sets for b in vs]

    history = TrainHistory()
    history.initial_val_loss = evaluate_loss(state, val_batches) if val_batches else math.nan
    best_loss = history.initial_val_loss if val_batches else math.inf
    best_params = {k: v.copy() for k, v in state.params.items()}
    stopper = EarlyStopping(config.patience)
    step = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for di in rng.permutation(len(sets)):
            ds = sets[di]
            n_steps = config.steps_per_epoch or _auto_steps(ds, cfg.T_p, config.batch_size)
            for _ in range(n_steps):
                batch, objective = sample_training_batch(ds, config, cfg.T_p, rng)
                loss, grads = loss_and_grads(state, batch, objective, config.context_noise, rng)
                if not math.isfinite(loss):
                    raise DivergenceError(step)
                optimizer.step(state.params, grads)
                losses.append(loss)
                history.step_losses.append(loss)
                step += 1
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(state, val_batches) if val_batches else train_loss
        history.epochs.append((epoch, train_loss, val_loss))
        logger.info("epoch %d: train %.5f val %.5f", epoch, train_loss, val_loss)
        if not (val_loss >= best_loss):  # also true when best_loss is nan
            best_loss = val_loss
            best_params = {k: v.copy() for k, v in state.params.items()}
            history.best_epoch = epoch
        if stopper.update(val_loss):
            break
    return ModelState(cfg, best_params), history


def finetune_fewshot(
    state: ModelState,
    data: TrainingSet,
    config: TrainConfig,
    fraction: float = 0.10,
) -> tuple[ModelState, TrainHistory]:
    """Ten epochs of full-parameter training on the earliest ``fraction`` of the train split."""
    subset = data.restricted(fraction)
    lo, hi = subset.train_range
    if hi - lo < state.config.T_p:
        raise WindowError(f"few-shot range of {hi - lo} steps is shorter than T_p={state.config.T_p}")
    tuned = TrainConfig(**{f.name: getattr(config, f.name) for f in fields(TrainConfig)})
    tuned.epochs = 10
    return train(state, subset, tuned)
