"""Seeded synthetic datasets used by tests, the acceptance suite and ``urbanst synth``."""

from __future__ import annotations

import numpy as np

from .dataset import SpatioTemporalTensor, grid_coords

KM_PER_DEG = 111.195


def ring_coords(n_nodes: int, center=(37.77, -122.42), radius_km: float = 5.0) -> np.ndarray:
    angle = 2 * np.pi * np.arange(n_nodes) / n_nodes
    lat = center[0] + radius_km / KM_PER_DEG * np.sin(angle)
    lon = center[1] + radius_km / (KM_PER_DEG * np.cos(np.radians(center[0]))) * np.cos(angle)
    return np.stack([lat, lon], axis=1)


def ring_sinusoids(
    n_nodes: int = 32,
    n_steps: int = 4000,
    periods: tuple[float, ...] = (24.0, 168.0),
    noise: float = 0.1,
    seed: int = 0,
    amplitude: tuple[float, float] = (0.5, 1.5),
    offset: tuple[float, float] = (2.0, 4.0),
    dt_minutes: int = 5,
    name: str = "ring-sinusoid",
) -> tuple[SpatioTemporalTensor, np.ndarray]:
    """Sensors on a circle carrying superposed sinusoids plus Gaussian noise.

    Each period's phase travels once around the ring, so neighbouring sensors
    are strongly correlated; amplitudes and offsets vary per node.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps)[None, :]
    ring_phase = 2 * np.pi * np.arange(n_nodes)[:, None] / n_nodes
    values = rng.uniform(*offset, size=(n_nodes, 1)) + np.zeros((1, n_steps))
    for k, period in enumerate(periods):
        amp = rng.uniform(*amplitude, size=(n_nodes, 1)) / (k + 1)
        jitter = rng.uniform(-0.2, 0.2, size=(n_nodes, 1))
        values = values + amp * np.sin(2 * np.pi * t / period + ring_phase + jitter)
    values = values + noise * rng.standard_normal(values.shape)
    x = SpatioTemporalTensor(
        values[:, :, None], "sensor", ring_coords(n_nodes), dt_minutes, 0, name
    )
    return x, np.ones(x.shape, dtype=bool)


def grid_sinusoids(
    width: int = 8,
    height: int = 4,
    n_steps: int = 4000,
    periods: tuple[float, ...] = (24.0, 168.0),
    noise: float = 0.1,
    seed: int = 0,
    name: str = "grid-sinusoid",
) -> tuple[SpatioTemporalTensor, np.ndarray]:
    """Plane waves on a ``width x height`` lattice."""
    rng = np.random.default_rng(seed)
    coords = grid_coords(width, height)
    t = np.arange(n_steps)[None, :]
    values = rng.uniform(2.0, 4.0, size=(width * height, 1)) + np.zeros((1, n_steps))
    for k, period in enumerate(periods):
        direction = rng.normal(size=2)
        phase = coords @ (direction / np.linalg.norm(direction)) * 0.4
        amp = rng.uniform(0.5, 1.5, size=(width * height, 1)) / (k + 1)
        values = values + amp * np.sin(2 * np.pi * t / period + phase[:, None])
    values = values + noise * rng.standard_normal(values.shape)
    x = SpatioTemporalTensor(values[:, :, None], "grid", None, 5, 0, name, (width, height))
    return x, np.ones(x.shape, dtype=bool)


def random_walks(
    n_nodes: int = 32,
    n_steps: int = 2000,
    step_std: float = 0.1,
    seed: int = 0,
    name: str = "random-walk",
) -> tuple[SpatioTemporalTensor, np.ndarray]:
    """Independent Gaussian random walks on ring-placed sensors."""
    rng = np.random.default_rng(seed)
    steps = step_std * rng.standard_normal((n_nodes, n_steps))
    values = np.cumsum(steps, axis=1) + rng.uniform(-1, 1, size=(n_nodes, 1))
    x = SpatioTemporalTensor(values[:, :, None], "sensor", ring_coords(n_nodes), 5, 0, name)
    return x, np.ones(x.shape, dtype=bool)
