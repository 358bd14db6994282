"""Predefined adjacency matrices for the graph-aware baselines."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import read_descriptor, write_descriptor
from .errors import CoordError, DegenerateGraphError, FormatError

EARTH_RADIUS_KM = 6371.0


@dataclass
class AdjacencyMatrix:
    weights: np.ndarray
    kind: str

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    def degree(self) -> np.ndarray:
        return (self.weights > 0).sum(axis=1)


def _check_latlon(lat, lon) -> None:
    lat = np.asarray(lat)
    lon = np.asarray(lon)
    if np.any(~np.isfinite(lat)) or np.any(np.abs(lat) > 90):
        raise CoordError("latitude outside [-90, 90]")
    if np.any(~np.isfinite(lon)) or np.any(np.abs(lon) > 180):
        raise CoordError("longitude outside [-180, 180]")


def haversine_km(a, b) -> float | np.ndarray:
    """Great-circle distance in km between ``(lat, lon)`` points given in degrees.

    Broadcasts over leading dimensions, so ``a[:, None]`` against ``b[None]``
    gives a full distance matrix.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_latlon(a[..., 0], a[..., 1])
    _check_latlon(b[..., 0], b[..., 1])
    lat1, lon1 = np.radians(a[..., 0]), np.radians(a[..., 1])
    lat2, lon2 = np.radians(b[..., 0]), np.radians(b[..., 1])
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


def pairwise_haversine(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    d = haversine_km(coords[:, None, :], coords[None, :, :])
    np.fill_diagonal(d, 0.0)
    return d


def gaussian_kernel_weights(dist: np.ndarray, r: float = 0.5) -> np.ndarray:
    """Thresholded Gaussian kernel on a symmetric distance matrix.

    The bandwidth is the population std of the upper-triangle distances.
    """
    n = dist.shape[0]
    if n < 2:
        raise DegenerateGraphError("need at least two sensors")
    if not 0 <= r < 1:
        raise ValueError("threshold r must lie in [0, 1)")
    sigma = dist[np.triu_indices(n, k=1)].std()
    if sigma == 0:
        raise DegenerateGraphError("all pairwise distances are zero")
    w = np.exp(-(dist**2) / sigma**2)
    w[w < r] = 0.0
    np.fill_diagonal(w, 0.0)
    return w


def gaussian_threshold_graph(coords: np.ndarray, r: float = 0.5) -> AdjacencyMatrix:
    """Gaussian-kernel adjacency over Haversine distances of ``(lat, lon)`` sensors."""
    return AdjacencyMatrix(gaussian_kernel_weights(pairwise_haversine(coords), r), "gaussian")


def moore_grid_graph(width: int, height: int) -> AdjacencyMatrix:
    """8-connected lattice adjacency, nodes in row-major order."""
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be positive")
    n = np.arange(width * height)
    u, v = n % width, n // width
    near = (np.abs(u[:, None] - u[None, :]) <= 1) & (np.abs(v[:, None] - v[None, :]) <= 1)
    np.fill_diagonal(near, False)
    return AdjacencyMatrix(near.astype(np.float64), "moore")


def save_adjacency(path: str | Path, adj: AdjacencyMatrix) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_descriptor(path / "adjacency.txt", {"kind": adj.kind, "N": adj.n_nodes})
    adj.weights.astype("<f4").tofile(path / "adjacency.f32le")
    return path


def load_adjacency(path: str | Path) -> AdjacencyMatrix:
    path = Path(path)
    entries = read_descriptor(path / "adjacency.txt")
    n = int(entries["N"])
    raw = np.fromfile(path / "adjacency.f32le", dtype="<f4")
    if raw.size != n * n:
        raise FormatError(f"adjacency blob holds {raw.size} floats, expected {n * n}")
    return AdjacencyMatrix(raw.reshape(n, n).astype(np.float64), entries.get("kind", "gaussian"))
