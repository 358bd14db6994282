"""The finite-difference suite covering every hand-written backward pass."""

from __future__ import annotations

import numpy as np

from . import numeric as nc
from .model import ModelConfig, init_model, model_grad_check
from .tokenizer import PatchBatch

SUITE_TOL = 1e-4


def _rope_attention(positions, base):
    def fn(q, k, v):
        qr, bq = nc.rope_vjp(q, positions, base)
        kr, bk = nc.rope_vjp(k, positions, base)
        out, back = nc.attention_vjp(qr, kr, v)

        def backward(d):
            dq, dk, dv = back(d)
            return bq(dq)[0], bk(dk)[0], dv

        return out, backward

    return fn


def _revin_round_trip(weight):
    def fn(x):
        (z, mean, std), back = nc.instance_norm_vjp(x, weight, axis=-2)
        return z, back

    return fn


def tiny_model_case(seed: int = 0):
    """A one-patch batch and a randomised small model for the end-to-end check."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d_model=8, n_heads=2, n_temporal_layers=1, n_spatial_layers=1,
                      ffn_mult=2, S_p=3, T_p=6, C=2)
    state = init_model(cfg, seed, np.float64)
    # zero-initialised output projections would make most gradients vanish
    for name, value in state.params.items():
        state.params[name] = value + 0.3 * rng.standard_normal(value.shape)
    slot_mask = np.array([[True, True, False]])
    data = rng.standard_normal((1, 3, 6, 2)) * slot_mask[:, :, None, None]
    value_mask = np.broadcast_to(slot_mask[:, :, None, None], data.shape).copy()
    value_mask[0, 1, 2, 0] = False
    batch = PatchBatch(data, slot_mask, value_mask, np.array([[0, 1, -1]]), np.array([0]), np.array([0]))
    objective = np.zeros(data.shape, dtype=bool)
    objective[:, :, 4:] = True
    objective[0, 0, 1, 1] = True
    return state, batch, objective & value_mask


def run_suite(seed: int = 0, tol: float = SUITE_TOL) -> list[nc.GradCheckReport]:
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    reports = [
        nc.grad_check(nc.matmul_vjp, [r((3, 4)), r((4, 2))], tol, name="matmul"),
        nc.grad_check(lambda x: nc.softmax_vjp(x, -1), [r((3, 5))], tol, name="softmax"),
        nc.grad_check(nc.linear_vjp, [r((2, 3, 4)), r((4, 5)), r(5)], tol, name="linear"),
        nc.grad_check(nc.gelu_vjp, [r((4, 6))], tol, name="gelu"),
        nc.grad_check(nc.layer_norm_vjp, [r((3, 6)), r(6), r(6)], tol, name="layer_norm"),
        nc.grad_check(lambda x: nc.rope_vjp(x, range(5), 10000.0), [r((2, 5, 8))], tol, name="rope"),
        nc.grad_check(nc.attention_vjp, [r((4, 8)), r((4, 8)), r((4, 8))], tol, name="attention"),
    ]
    mask = rng.random((4, 4)) < 0.6
    mask[:, 0] = True
    reports.append(nc.grad_check(
        lambda q, k, v: nc.attention_vjp(q, k, v, mask), [r((4, 8)), r((4, 8)), r((4, 6))],
        tol, name="masked_attention",
    ))
    reports.append(nc.grad_check(
        _rope_attention(range(3, 9), 10000.0), [r((2, 6, 8)), r((2, 6, 8)), r((2, 6, 4))],
        tol, name="rope_attention",
    ))
    weight = rng.random((3, 7, 2)) < 0.7
    weight[:, 0] = True
    reports.append(nc.grad_check(_revin_round_trip(weight), [r((3, 7, 2))], tol, name="revin"))
    pred, target = r((4, 5)), r((4, 5))
    reports.append(nc.grad_check(
        lambda p: nc.masked_mae_vjp(p, target, np.ones_like(p, dtype=bool)), [pred], tol,
        name="masked_mae",
    ))
    state, batch, objective = tiny_model_case(seed)
    reports.append(model_grad_check(state, batch, objective, tol))
    return reports
