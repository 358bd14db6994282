"""Dense numpy operations with hand-written backward passes.

Every differentiable operation ``op`` has an ``op_vjp`` twin returning
``(output, backward)`` where ``backward(d_output)`` yields a tuple of
gradients, one per differentiable input. Operations keep the dtype of their
inputs: float64 for gradient checks, float32 for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import AttentionMaskError, ConfigError, ShapeError

MASK_BIAS = -1e9
STD_FLOOR = 1e-5
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0


# --------------------------------------------------------------------------
# primitives


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_vjp(a: np.ndarray, b: np.ndarray):
    out = matmul(a, b)

    def backward(dout):
        return dout @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ dout

    return out, backward


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def softmax_vjp(x: np.ndarray, axis: int = -1):
    y = softmax(x, axis)
    return y, lambda dy: (softmax_backward(dy, y, axis),)


def linear_vjp(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None):
    """``x @ w + b`` over any leading dimensions of ``x``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} != weight rows {w.shape[0]}")
    out = x @ w
    if b is not None:
        out = out + b

    def backward(dout):
        flat_x = x.reshape(-1, x.shape[-1])
        flat_d = dout.reshape(-1, dout.shape[-1])
        dw = flat_x.T @ flat_d
        dx = dout @ w.T
        if b is None:
            return dx, dw
        return dx, dw, flat_d.sum(axis=0)

    return out, backward


def gelu_vjp(x: np.ndarray):
    """Tanh-approximated GELU."""
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1 + 0.044715 * x2))
    half_1pt = 0.5 * (1 + t)
    out = x * half_1pt

    def backward(dout):
        slope = half_1pt + 0.5 * x * (1 - t * t) * (_GELU_C * (1 + 3 * 0.044715 * x2))
        return (dout * slope,)

    return out, backward


def layer_norm_vjp(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain + bias

    def backward(dout):
        dxhat = dout * gain
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat = dout.reshape(-1, dout.shape[-1])
        return dx, (flat * xhat.reshape(flat.shape)).sum(axis=0), flat.sum(axis=0)

    return out, backward


# --------------------------------------------------------------------------
# rotary position encoding


@lru_cache(maxsize=64)
def _rope_table(positions: tuple[int, ...], dim: int, base: float):
    freqs = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def rope_vjp(x: np.ndarray, positions: Sequence[int], base: float = 10000.0):
    """Rotate dimension pairs (2i, 2i+1) of ``x[..., L, d]`` by ``position * base**(-2i/d)``."""
    dim = x.shape[-1]
    if dim % 2:
        raise ConfigError(f"rotary encoding needs an even head dimension, got {dim}")
    positions = tuple(int(p) for p in positions)
    if len(positions) != x.shape[-2]:
        raise ShapeError(f"{len(positions)} positions for sequence length {x.shape[-2]}")
    cos, sin = _rope_table(positions, dim, float(base))
    cos = cos.astype(x.dtype, copy=False)
    sin = sin.astype(x.dtype, copy=False)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def backward(dout):
        de, do = dout[..., 0::2], dout[..., 1::2]
        dx = np.empty_like(dout)
        dx[..., 0::2] = de * cos + do * sin
        dx[..., 1::2] = do * cos - de * sin
        return (dx,)

    return out, backward


def rope_apply(x: np.ndarray, positions: Sequence[int], base: float = 10000.0) -> np.ndarray:
    return rope_vjp(x, positions, base)[0]


# --------------------------------------------------------------------------
# attention


def _check_mask(mask: np.ndarray, scores_shape: tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    try:
        allowed = np.broadcast_to(mask, scores_shape[:-2] + mask.shape[-2:]).any(axis=-1)
    except ValueError:
        raise ShapeError(f"mask {mask.shape} does not broadcast to scores {scores_shape}") from None
    if not allowed.all():
        raise AttentionMaskError("a query row has every key masked out")
    return mask


def attention_vjp(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray | None = None):
    """Scaled dot-product attention over the last two axes.

    ``mask`` is boolean, True where a key may be attended, broadcastable to
    ``[..., L, L']``.
    """
    d = q.shape[-1]
    if d == 0 or k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / math.sqrt(d)
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    if mask is not None:
        mask = _check_mask(mask, scores.shape)
        scores = scores + np.where(mask, 0.0, MASK_BIAS).astype(scores.dtype)
    probs = softmax(scores)
    out = probs @ v

    def backward(dout):
        dv = np.swapaxes(probs, -1, -2) @ dout
        dscores = softmax_backward(dout @ np.swapaxes(v, -1, -2), probs) * scale
        dq = dscores @ k
        dk = np.swapaxes(dscores, -1, -2) @ q
        return dq, dk, dv

    return out, backward


def scaled_dot_attention(q, k, v, mask=None) -> np.ndarray:
    return attention_vjp(q, k, v, mask)[0]


# --------------------------------------------------------------------------
# instance statistics


def instance_stats(x: np.ndarray, axis: int = -1, weight: np.ndarray | None = None):
    """Population mean and std along ``axis``, optionally over weighted entries only."""
    if weight is None:
        return x.mean(axis=axis, keepdims=True), x.std(axis=axis, keepdims=True)
    w = weight.astype(x.dtype)
    count = w.sum(axis=axis, keepdims=True)
    safe = np.maximum(count, 1)
    mean = (x * w).sum(axis=axis, keepdims=True) / safe
    var = (((x - mean) ** 2) * w).sum(axis=axis, keepdims=True) / safe
    return mean, np.sqrt(var)


def instance_norm_vjp(x: np.ndarray, weight: np.ndarray, axis: int = -2, eps: float = STD_FLOOR):
    """``(x - mean) / (std + eps)`` with statistics over entries where ``weight`` is set.

    Gradients flow through the statistics as well as the centring.
    """
    w = weight.astype(x.dtype)
    count = np.maximum(w.sum(axis=axis, keepdims=True), 1)
    mean = (x * w).sum(axis=axis, keepdims=True) / count
    xc = x - mean
    var = (xc * xc * w).sum(axis=axis, keepdims=True) / count
    std = np.sqrt(var)
    denom = std + eps
    z = xc / denom

    def backward(dz):
        ddenom = -(dz * xc).sum(axis=axis, keepdims=True) / denom**2
        dvar = ddenom * np.where(std > 0, 0.5 / np.where(std > 0, std, 1), 0)
        dxc = dz / denom + dvar * 2 * xc * w / count
        dx = dxc - (dxc.sum(axis=axis, keepdims=True)) * w / count
        return (dx,)

    return (z, mean, std), backward


def masked_mae_vjp(pred: np.ndarray, target: np.ndarray, weight: np.ndarray):
    """Mean absolute error over entries where ``weight`` is set (0 if there are none)."""
    w = weight.astype(pred.dtype)
    total = w.sum()
    diff = pred - target
    if total == 0:
        return np.zeros((), dtype=pred.dtype), lambda g: (np.zeros_like(pred),)
    loss = (np.abs(diff) * w).sum() / total

    def backward(g=1.0):
        return (np.asarray(g) * np.sign(diff) * w / total,)

    return loss, backward


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    name: str
    passed: bool
    max_rel_error: float
    tol: float
    per_input: list[float]

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.2e} (tol {self.tol:.0e})"


def grad_check(
    fn: Callable,
    inputs: Sequence[np.ndarray],
    tol: float = 1e-4,
    h: float = 1e-5,
    seed: int = 0,
    name: str = "op",
) -> GradCheckReport:
    """Compare ``fn``'s analytic gradients with central finite differences.

    ``fn(*inputs)`` must return ``(output, backward)``; the scalar probed is
    ``sum(output * R)`` for a fixed random ``R``. Errors are
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out, backward = fn(*inputs)
    out = np.asarray(out)
    probe = np.random.default_rng(seed).standard_normal(out.shape)
    analytic = backward(probe)

    def scalar() -> float:
        return float((np.asarray(fn(*inputs)[0]) * probe).sum())

    per_input = []
    for a, g in zip(inputs, analytic):
        g = np.asarray(g, dtype=np.float64).reshape(a.shape)
        worst = 0.0
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = scalar()
            flat[i] = old - h
            down = scalar()
            flat[i] = old
            numeric = (up - down) / (2 * h)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
        per_input.append(worst)
    max_err = max(per_input) if per_input else 0.0
    return GradCheckReport(name, max_err <= tol, max_err, tol, per_input)
