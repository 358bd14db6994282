"""Missing-data simulators. Masks follow the observation convention: True = observed."""

from __future__ import annotations

import numpy as np

DEFAULT_POINT_RATIO = 0.25
DEFAULT_BLOCK_DROP = 0.05
DEFAULT_BLOCK_LENGTHS = (4, 12)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def point_missing_mask(shape, ratio: float = DEFAULT_POINT_RATIO, seed=0) -> np.ndarray:
    """Each entry independently missing with probability ``ratio``."""
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must lie in [0, 1]")
    return _rng(seed).random(shape) >= ratio


def block_missing_mask(
    shape,
    drop_rate: float = DEFAULT_BLOCK_DROP,
    block_len_range: tuple[int, int] = DEFAULT_BLOCK_LENGTHS,
    seed=0,
) -> np.ndarray:
    """Sensor outages: contiguous runs covering every channel of a sensor.

    Outages start at each step with probability ``drop_rate / E[length]`` and
    last a uniformly drawn number of steps in ``block_len_range`` (inclusive).
    Shape is ``[N, T]`` or ``[N, T, C]``.
    """
    lo, hi = block_len_range
    if not 1 <= lo <= hi:
        raise ValueError("block_len_range must satisfy 1 <= low <= high")
    if not 0 <= drop_rate < 1:
        raise ValueError("drop_rate must lie in [0, 1)")
    shape = tuple(shape)
    n, t = shape[0], shape[1]
    rng = _rng(seed)
    p_start = drop_rate / ((lo + hi) / 2)
    starts = rng.random((n, t)) < p_start
    lengths = rng.integers(lo, hi + 1, size=(n, t))
    steps = np.arange(t)[None, :]
    ends = np.where(starts, steps + lengths, 0)
    covered = np.maximum.accumulate(ends, axis=1) > steps
    observed = ~covered
    if len(shape) == 3:
        observed = np.broadcast_to(observed[:, :, None], shape).copy()
    return observed
