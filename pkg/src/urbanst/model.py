"""UrbanFM backbone: factorized spatio-temporal attention with rotary positions.

A patch ``[S_p, T_p, C]`` is instance-normalised per (slot, channel) over its
context steps, masked positions are replaced by a constant token, and the
result runs through alternating temporal blocks (attention along time, one
slot at a time) and spatial blocks (attention across slots, one step at a
time). The head maps back to ``C`` channels and the normalisation is undone,
so the same network both forecasts (masked future) and imputes (masked gaps).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numeric as nc
from .dataset import read_descriptor, write_descriptor
from .errors import ConfigError, FormatError, RevinError, ShapeError, WindowError
from .tokenizer import INVALID, ClusterPlan, PatchBatch

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 8
    n_temporal_layers: int = 4
    n_spatial_layers: int = 4
    ffn_mult: int = 4
    rope_base: float = 10000.0
    S_p: int = 16
    T_p: int = 48
    C: int = 1
    mask_value: float = 0.0
    temporal_rope: bool = True
    spatial_rope: bool = True

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0:
            raise ConfigError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head dimension {self.head_dim} must be even for rotary encoding")
        if min(self.S_p, self.T_p, self.C, self.ffn_mult) < 1:
            raise ConfigError("S_p, T_p, C and ffn_mult must be positive")
        if self.n_temporal_layers < 0 or self.n_spatial_layers < 0:
            raise ConfigError("layer counts must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def block_kinds(self) -> list[str]:
        """Temporal-first interleaving, leftover blocks of the longer kind appended."""
        paired = min(self.n_temporal_layers, self.n_spatial_layers)
        kinds = ["temporal", "spatial"] * paired
        kinds += ["temporal"] * (self.n_temporal_layers - paired)
        kinds += ["spatial"] * (self.n_spatial_layers - paired)
        return kinds

    @classmethod
    def from_dict(cls, entries: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in entries:
                continue
            raw = entries[f.name]
            if f.type in ("bool", bool):
                kwargs[f.name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "ModelState":
        return ModelState(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class RevinStats:
    mean: np.ndarray  # [B, S_p, 1, C]
    std: np.ndarray   # [B, S_p, 1, C]


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelState:
    """Scaled-uniform projections; attention and feed-forward output projections start at zero."""
    rng = np.random.default_rng(seed)
    d, c = config.d_model, config.C
    hidden = d * config.ffn_mult
    p: dict[str, np.ndarray] = {
        "input.w": _xavier(rng, c, d),
        "input.b": np.zeros(d),
    }
    for i, _ in enumerate(config.block_kinds()):
        pre = f"block{i}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for name in ("q", "k", "v"):
            p[pre + f"attn.w{name}"] = _xavier(rng, d, d)
            p[pre + f"attn.b{name}"] = np.zeros(d)
        p[pre + "attn.wo"] = np.zeros((d, d))
        p[pre + "attn.bo"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "ffn.w1"] = _xavier(rng, d, hidden)
        p[pre + "ffn.b1"] = np.zeros(hidden)
        p[pre + "ffn.w2"] = np.zeros((hidden, d))
        p[pre + "ffn.b2"] = np.zeros(d)
    p["final_ln.g"] = np.ones(d)
    p["final_ln.b"] = np.zeros(d)
    p["output.w"] = _xavier(rng, d, c)
    p["output.b"] = np.zeros(c)
    return ModelState(config, {k: v.astype(dtype) for k, v in p.items()})


# --------------------------------------------------------------------------
# reversible instance normalisation


def revin_normalize(
    batch: PatchBatch, context_mask: np.ndarray, eps: float = nc.STD_FLOOR
) -> tuple[PatchBatch, RevinStats]:
    """Normalise each (patch, slot, channel) with mean/std of its context steps.

    Every step, target or not, is normalised with the context statistics.
    Padding slots get mean 0 and std 0.
    """
    context = context_mask & batch.slot_mask[:, :, None, None]
    starved = batch.slot_mask[:, :, None] & ~context.any(axis=2)
    if starved.any():
        raise RevinError(f"{int(starved.sum())} valid (slot, channel) pairs have no context step")
    (z, mean, std), _ = nc.instance_norm_vjp(batch.data, context, axis=2, eps=eps)
    normed = PatchBatch(
        z, batch.slot_mask, batch.value_mask, batch.slot_index, batch.cluster_id, batch.start
    )
    return normed, RevinStats(mean, std)


def revin_denormalize(y: np.ndarray, stats: RevinStats, eps: float = nc.STD_FLOOR) -> np.ndarray:
    return y * (stats.std + eps) + stats.mean


# --------------------------------------------------------------------------
# blocks


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    m, l, d = x.shape
    return x.reshape(m, l, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    m, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(m, l, h * dh)


def _attention_layer_vjp(
    a: np.ndarray,
    params: dict,
    pre: str,
    heads: int,
    positions: range | None,
    base: float,
    key_mask: np.ndarray | None,
):
    """Multi-head self-attention over axis 1 of ``a[M, L, D]``."""
    q, bq = nc.linear_vjp(a, params[pre + "attn.wq"], params[pre + "attn.bq"])
    k, bk = nc.linear_vjp(a, params[pre + "attn.wk"], params[pre + "attn.bk"])
    v, bv = nc.linear_vjp(a, params[pre + "attn.wv"], params[pre + "attn.bv"])
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    rq = rk = None
    if positions is not None:
        qh, rq = nc.rope_vjp(qh, positions, base)
        kh, rk = nc.rope_vjp(kh, positions, base)
    oh, battn = nc.attention_vjp(qh, kh, vh, key_mask)
    out, bo = nc.linear_vjp(_merge_heads(oh), params[pre + "attn.wo"], params[pre + "attn.bo"])

    def backward(dout):
        grads = {}
        do, grads[pre + "attn.wo"], grads[pre + "attn.bo"] = bo(dout)
        dqh, dkh, dvh = battn(_split_heads(do, heads))
        if positions is not None:
            (dqh,) = rq(dqh)
            (dkh,) = rk(dkh)
        da_q, grads[pre + "attn.wq"], grads[pre + "attn.bq"] = bq(_merge_heads(dqh))
        da_k, grads[pre + "attn.wk"], grads[pre + "attn.bk"] = bk(_merge_heads(dkh))
        da_v, grads[pre + "attn.wv"], grads[pre + "attn.bv"] = bv(_merge_heads(dvh))
        return da_q + da_k + da_v, grads

    return out, backward


def _residual_block_vjp(
    h: np.ndarray,
    params: dict,
    pre: str,
    heads: int,
    positions: range | None,
    base: float,
    key_mask: np.ndarray | None,
):
    """Pre-norm attention + feed-forward residual block on ``h[M, L, D]``."""
    a, bln1 = nc.layer_norm_vjp(h, params[pre + "ln1.g"], params[pre + "ln1.b"])
    att, batt = _attention_layer_vjp(a, params, pre, heads, positions, base, key_mask)
    h1 = h + att
    b, bln2 = nc.layer_norm_vjp(h1, params[pre + "ln2.g"], params[pre + "ln2.b"])
    f1, bf1 = nc.linear_vjp(b, params[pre + "ffn.w1"], params[pre + "ffn.b1"])
    g, bg = nc.gelu_vjp(f1)
    f2, bf2 = nc.linear_vjp(g, params[pre + "ffn.w2"], params[pre + "ffn.b2"])
    out = h1 + f2

    def backward(dout):
        grads = {}
        dg, grads[pre + "ffn.w2"], grads[pre + "ffn.b2"] = bf2(dout)
        (df1,) = bg(dg)
        db, grads[pre + "ffn.w1"], grads[pre + "ffn.b1"] = bf1(df1)
        dh1_ln, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = bln2(db)
        dh1 = dout + dh1_ln
        da, agrads = batt(dh1)
        grads.update(agrads)
        dh_ln, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = bln1(da)
        return dh1 + dh_ln, grads

    return out, backward


def temporal_block_vjp(h: np.ndarray, slot_mask: np.ndarray, params: dict, pre: str, config: ModelConfig):
    """Attention along time within each slot of ``h[B, S, T, D]``; padding slots stay zero."""
    bsz, s, t, d = h.shape
    positions = range(t) if config.temporal_rope else None
    keep = slot_mask[:, :, None, None].astype(h.dtype)
    out, back = _residual_block_vjp(
        h.reshape(bsz * s, t, d), params, pre, config.n_heads, positions, config.rope_base, None
    )
    out = out.reshape(bsz, s, t, d) * keep

    def backward(dout):
        dh, grads = back((dout * keep).reshape(bsz * s, t, d))
        return dh.reshape(bsz, s, t, d), grads

    return out, backward


def spatial_block_vjp(h: np.ndarray, slot_mask: np.ndarray, params: dict, pre: str, config: ModelConfig):
    """Attention across slots at each step of ``h[B, S, T, D]``; padding slots are masked keys."""
    bsz, s, t, d = h.shape
    positions = range(s) if config.spatial_rope else None
    keep = slot_mask[:, :, None, None].astype(h.dtype)
    key_mask = np.broadcast_to(slot_mask[:, None, None, None, :], (bsz, t, 1, 1, s)).reshape(bsz * t, 1, 1, s)
    seq = h.transpose(0, 2, 1, 3).reshape(bsz * t, s, d)
    out, back = _residual_block_vjp(
        seq, params, pre, config.n_heads, positions, config.rope_base, key_mask
    )
    out = out.reshape(bsz, t, s, d).transpose(0, 2, 1, 3) * keep

    def backward(dout):
        dseq = (dout * keep).transpose(0, 2, 1, 3).reshape(bsz * t, s, d)
        dh, grads = back(dseq)
        return dh.reshape(bsz, t, s, d).transpose(0, 2, 1, 3), grads

    return out, backward


def temporal_block(h, slot_mask, state: ModelState, index: int) -> np.ndarray:
    return temporal_block_vjp(h, slot_mask, state.params, f"block{index}.", state.config)[0]


def spatial_block(h, slot_mask, state: ModelState, index: int) -> np.ndarray:
    return spatial_block_vjp(h, slot_mask, state.params, f"block{index}.", state.config)[0]


# --------------------------------------------------------------------------
# full model


def _check_batch(config: ModelConfig, batch: PatchBatch, objective_mask: np.ndarray) -> None:
    expected = (config.S_p, config.T_p, config.C)
    if batch.data.shape[1:] != expected:
        raise ShapeError(f"patch shape {batch.data.shape[1:]} != configured {expected}")
    if objective_mask.shape != batch.data.shape:
        raise ShapeError("objective mask must match the batch data shape")


def forward_vjp(
    params: dict,
    config: ModelConfig,
    batch: PatchBatch,
    objective_mask: np.ndarray,
    context_noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, Callable]:
    """Reconstruction ``[B, S_p, T_p, C]`` and a backward mapping d_recon to parameter grads."""
    _check_batch(config, batch, objective_mask)
    dtype = params["input.w"].dtype
    slot_mask = batch.slot_mask
    context = batch.value_mask & ~objective_mask & slot_mask[:, :, None, None]
    normed, stats = revin_normalize(
        PatchBatch(batch.data.astype(dtype), slot_mask, batch.value_mask,
                   batch.slot_index, batch.cluster_id, batch.start),
        context,
    )
    z = normed.data
    if context_noise > 0:
        rng = rng or np.random.default_rng()
        z = z + context_noise * rng.standard_normal(z.shape).astype(dtype)
    inp = np.where(context, z, dtype.type(config.mask_value))
    keep = slot_mask[:, :, None, None].astype(dtype)

    h, b_in = nc.linear_vjp(inp, params["input.w"], params["input.b"])
    h = h * keep
    backs = []
    for i, kind in enumerate(config.block_kinds()):
        block = temporal_block_vjp if kind == "temporal" else spatial_block_vjp
        h, back = block(h, slot_mask, params, f"block{i}.", config)
        backs.append(back)
    hn, b_ln = nc.layer_norm_vjp(h, params["final_ln.g"], params["final_ln.b"])
    y, b_out = nc.linear_vjp(hn, params["output.w"], params["output.b"])
    scale = (stats.std + nc.STD_FLOOR) * keep
    recon = revin_denormalize(y, stats) * keep

    def backward(d_recon):
        grads = {}
        dy = d_recon * scale
        dhn, grads["output.w"], grads["output.b"] = b_out(dy)
        dh, grads["final_ln.g"], grads["final_ln.b"] = b_ln(dhn)
        for back in reversed(backs):
            dh, g = back(dh)
            grads.update(g)
        _, grads["input.w"], grads["input.b"] = b_in(dh * keep)
        return grads

    return recon, backward


def forward(state: ModelState, batch: PatchBatch, objective_mask: np.ndarray) -> np.ndarray:
    return forward_vjp(state.params, state.config, batch, objective_mask)[0]


def loss_weight(batch: PatchBatch, objective_mask: np.ndarray) -> np.ndarray:
    """Positions that count towards the loss: hidden from the model and actually observed."""
    return objective_mask & batch.value_mask & batch.slot_mask[:, :, None, None]


def loss_and_grads(
    state: ModelState,
    batch: PatchBatch,
    objective_mask: np.ndarray,
    context_noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    recon, back = forward_vjp(state.params, state.config, batch, objective_mask, context_noise, rng)
    target = batch.data.astype(recon.dtype)
    loss, lback = nc.masked_mae_vjp(recon, target, loss_weight(batch, objective_mask))
    (d_recon,) = lback(1.0)
    return float(loss), back(d_recon.astype(recon.dtype))


def masked_loss(state: ModelState, batch: PatchBatch, objective_mask: np.ndarray) -> float:
    recon = forward(state, batch, objective_mask)
    loss, _ = nc.masked_mae_vjp(recon, batch.data.astype(recon.dtype), loss_weight(batch, objective_mask))
    return float(loss)


def model_grad_check(state: ModelState, batch: PatchBatch, objective_mask: np.ndarray,
                     tol: float = 1e-4, names: list[str] | None = None) -> nc.GradCheckReport:
    """Finite-difference check of d(masked MAE)/d(parameter) for the named parameters."""
    state = state.astype(np.float64)
    names = names or sorted(state.params)

    def fn(*arrays):
        params = dict(state.params)
        params.update(zip(names, arrays))
        recon, back = forward_vjp(params, state.config, batch, objective_mask)
        loss, lback = nc.masked_mae_vjp(recon, batch.data, loss_weight(batch, objective_mask))

        def backward(g):
            (d_recon,) = lback(float(g))
            grads = back(d_recon)
            return tuple(grads[n] for n in names)

        return loss, backward

    return nc.grad_check(fn, [state.params[n] for n in names], tol=tol, name="forward+masked_mae")


# --------------------------------------------------------------------------
# inference on full tensors


def _scatter_mean(
    recon: np.ndarray, slot_index: np.ndarray, slot_mask: np.ndarray, n_nodes: int
) -> tuple[np.ndarray, np.ndarray]:
    """Average per-node predictions over every valid slot holding that node."""
    b, s, t, c = recon.shape
    total = np.zeros((n_nodes, t, c))
    count = np.zeros(n_nodes)
    for bi in range(b):
        for si in range(s):
            if slot_mask[bi, si]:
                total[slot_index[bi, si]] += recon[bi, si]
                count[slot_index[bi, si]] += 1
    return total, count


def _cluster_patches(values: np.ndarray, observed: np.ndarray, plan: ClusterPlan) -> PatchBatch:
    """One patch per cluster from ``values[N, T_p, C]``."""
    slot_mask = plan.valid.copy()
    nodes = np.where(slot_mask, plan.index, 0)
    keep = slot_mask[:, :, None, None]
    return PatchBatch(
        data=np.where(keep, values[nodes], 0.0),
        slot_mask=slot_mask,
        value_mask=observed[nodes] & keep,
        slot_index=np.where(slot_mask, plan.index, INVALID),
        cluster_id=np.arange(plan.n_clusters),
        start=np.zeros(plan.n_clusters, dtype=np.int64),
    )


def _demote_starved(batch: PatchBatch) -> PatchBatch | None:
    """Turn slots with no observed step into padding and drop patches left empty."""
    batch.slot_mask &= batch.value_mask.any(axis=2).all(axis=-1)
    rows = batch.slot_mask.any(axis=1)
    if not rows.any():
        return None
    if not rows.all():
        batch = PatchBatch(*(getattr(batch, f)[rows] for f in
                             ("data", "slot_mask", "value_mask", "slot_index", "cluster_id", "start")))
    keep = batch.slot_mask[:, :, None, None]
    batch.value_mask &= keep
    batch.data = np.where(keep, batch.data, 0.0)
    return batch


def forecast(
    history: np.ndarray,
    horizon: int,
    state: ModelState,
    plan: ClusterPlan,
    history_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Predict ``horizon`` steps after ``history[N, T_h, C]``.

    The history fills the first ``T_h`` steps of a ``T_p`` patch and the rest
    is masked; if the horizon is longer than one pass yields, predictions are
    fed back as context and the model is rolled forward.
    """
    cfg = state.config
    history = np.asarray(history, dtype=np.float64)
    n, t_h, c = history.shape
    if t_h < 1:
        raise WindowError("history must hold at least one step")
    if t_h >= cfg.T_p:
        raise WindowError(f"history of {t_h} steps leaves no room in a {cfg.T_p}-step patch")
    if horizon <= 0:
        return np.zeros((n, 0, c))
    obs = np.ones_like(history, dtype=bool) if history_mask is None else np.asarray(history_mask, bool)
    step = cfg.T_p - t_h
    context, context_obs = history, obs
    preds = []
    produced = 0
    while produced < horizon:
        values = np.zeros((n, cfg.T_p, c))
        observed = np.zeros((n, cfg.T_p, c), dtype=bool)
        values[:, :t_h] = context
        observed[:, :t_h] = context_obs
        batch = _demote_starved(_cluster_patches(values, observed, plan))
        if batch is None:
            total, count = np.zeros((n, cfg.T_p, c)), np.zeros(n)
        else:
            objective = np.zeros_like(batch.value_mask)
            objective[:, :, t_h:] = batch.slot_mask[:, :, None, None]
            recon = forward(state, batch, objective)
            total, count = _scatter_mean(recon, batch.slot_index, batch.slot_mask, n)
        out = total[:, t_h:] / np.maximum(count, 1)[:, None, None]
        if not (count > 0).all():
            # nodes without any observed context: persist their observed mean (0 if none)
            w = context_obs.astype(np.float64)
            fallback = (context * w).sum(axis=1) / np.maximum(w.sum(axis=1), 1)
            out[count == 0] = fallback[count == 0][:, None, :]
        take = min(step, horizon - produced)
        preds.append(out[:, :take])
        produced += take
        if produced < horizon:
            rolled = np.concatenate([context, out], axis=1)
            rolled_obs = np.concatenate([context_obs, np.ones_like(out, dtype=bool)], axis=1)
            context, context_obs = rolled[:, -t_h:], rolled_obs[:, -t_h:]
    return np.concatenate(preds, axis=1)


def impute(values: np.ndarray, mask: np.ndarray, state: ModelState, plan: ClusterPlan) -> np.ndarray:
    """Fill every unobserved entry of ``values[N, T, C]`` by masked reconstruction.

    Windows of ``T_p`` steps tile the series (the last one aligned to the end).
    A slot with no observed step inside a window cannot be normalised; such
    entries fall back to the node's observed mean.
    """
    cfg = state.config
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n, t, c = values.shape
    if t < cfg.T_p:
        raise WindowError(f"{t} steps cannot hold a {cfg.T_p}-step window")
    starts = list(range(0, t - cfg.T_p + 1, cfg.T_p))
    if starts[-1] + cfg.T_p < t:
        starts.append(t - cfg.T_p)
    filled = values.copy()
    done = mask.copy()
    for start in starts:
        window = slice(start, start + cfg.T_p)
        batch = _demote_starved(_cluster_patches(values[:, window], mask[:, window], plan))
        if batch is None:
            continue
        objective = ~batch.value_mask & batch.slot_mask[:, :, None, None]
        recon = forward(state, batch, objective)
        total, count = _scatter_mean(recon, batch.slot_index, batch.slot_mask, n)
        got = count > 0
        block = filled[:, window]
        fill_here = ~mask[:, window] & got[:, None, None]
        block[fill_here] = (total / np.maximum(count, 1)[:, None, None])[fill_here]
        done[:, window] |= fill_here
    if not done.all():
        w = mask.astype(np.float64)
        node_mean = (values * w).sum(axis=1) / np.maximum(w.sum(axis=1), 1)
        filled = np.where(done, filled, node_mean[:, None, :])
    return filled


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, state: ModelState) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries: dict = {"version": CHECKPOINT_VERSION}
    entries.update(asdict(state.config))
    for name, value in state.params.items():
        entries[f"param.{name}"] = "x".join(str(s) for s in value.shape)
        value.astype("<f4").tofile(path / f"{name}.f32le")
    write_descriptor(path / "checkpoint.txt", entries)
    return path


def load_checkpoint(path: str | Path, dtype=np.float32) -> ModelState:
    path = Path(path)
    entries = read_descriptor(path / "checkpoint.txt")
    if int(entries.get("version", -1)) != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {entries.get('version')}")
    config = ModelConfig.from_dict(entries)
    params = {}
    for key, shape_text in entries.items():
        if not key.startswith("param."):
            continue
        name = key[len("param."):]
        shape = tuple(int(s) for s in shape_text.split("x")) if shape_text else ()
        raw = np.fromfile(path / f"{name}.f32le", dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise FormatError(f"parameter {name}: blob size {raw.size} != shape {shape}")
        params[name] = raw.reshape(shape).astype(dtype)
    expected = init_model(config, 0, dtype)
    if set(params) != set(expected.params):
        raise FormatError("checkpoint parameters do not match its configuration")
    for name, value in expected.params.items():
        if params[name].shape != value.shape:
            raise FormatError(f"parameter {name} has shape {params[name].shape}, expected {value.shape}")
    return ModelState(config, params)
