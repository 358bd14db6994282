"""MiniST tokenization: capacity-constrained spatial clustering and patching.

Nodes are grouped greedily into clusters of exactly ``capacity`` slots using
KD-tree neighbour queries, then every (cluster, temporal window) pair becomes
one uniform ``[S_p, T_p, C]`` patch.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import SpatioTemporalTensor, check_mask
from .errors import EmptyDatasetError, FormatError, WindowError
from .graph import EARTH_RADIUS_KM, haversine_km
from .kdtree import KDTree

FILL_MODES = ("binary_mask", "neighbor_fill")
INVALID = -1

DEFAULT_CAPACITY = 16
DEFAULT_PATCH_STEPS = 48


@dataclass
class ClusterPlan:
    """Ordered partition of nodes into clusters of ``capacity`` slots.

    ``index[k, s]`` is the node held by slot ``s`` of cluster ``k`` (``-1`` for
    padding) and ``valid[k, s]`` says whether the slot carries data.
    """

    index: np.ndarray
    valid: np.ndarray
    capacity: int
    fill_mode: str = "binary_mask"

    @property
    def n_clusters(self) -> int:
        return self.index.shape[0]

    def members(self, k: int) -> list[int]:
        return self.index[k][self.valid[k]].tolist()

    @property
    def clusters(self) -> list[list[tuple[int, bool]]]:
        return [
            list(zip(self.index[k].tolist(), self.valid[k].tolist()))
            for k in range(self.n_clusters)
        ]


@dataclass
class PatchBatch:
    data: np.ndarray          # [B, S_p, T_p, C]
    slot_mask: np.ndarray     # [B, S_p]
    value_mask: np.ndarray    # [B, S_p, T_p, C]
    slot_index: np.ndarray    # [B, S_p] node index, -1 for padding
    cluster_id: np.ndarray    # [B]
    start: np.ndarray         # [B] first time step of each window

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def patch_steps(self) -> int:
        return self.data.shape[2]


def sphere_points(latlon: np.ndarray) -> np.ndarray:
    """Embed (lat, lon) degrees on a sphere of Earth radius.

    Chord length is monotone in great-circle distance, so Euclidean neighbour
    order in this embedding equals Haversine neighbour order.
    """
    lat = np.radians(latlon[:, 0])
    lon = np.radians(latlon[:, 1])
    return EARTH_RADIUS_KM * np.stack(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=1
    )


def _search_points(coords: np.ndarray, metric: str) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords[:, None]
    if metric == "haversine":
        return sphere_points(coords)
    if metric == "euclidean":
        return coords
    raise ValueError(f"unknown metric {metric!r}")


def build_clusters(
    coords: np.ndarray,
    capacity: int = DEFAULT_CAPACITY,
    fill_mode: str = "binary_mask",
    metric: str = "euclidean",
) -> ClusterPlan:
    """Greedy capacity-constrained clustering over a KD-tree.

    Seeds are visited in index order; each unassigned seed collects its nearest
    unassigned neighbours (itself included) until ``capacity`` is reached. A
    short final cluster is padded with invalid slots (``binary_mask``) or
    topped up with the nearest already-assigned nodes (``neighbor_fill``).
    When ``capacity`` exceeds the node count, ``neighbor_fill`` repeats the
    whole node list and then its first ``capacity % n`` nodes, while
    ``binary_mask`` lists every node once and pads the rest.
    """
    if fill_mode not in FILL_MODES:
        raise ValueError(f"fill_mode must be one of {FILL_MODES}")
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    points = _search_points(coords, metric)
    n = len(points)
    if n == 0:
        raise EmptyDatasetError("no nodes to cluster")

    if capacity > n:
        if fill_mode == "neighbor_fill":
            full, rem = divmod(capacity, n)
            idx = np.concatenate([np.tile(np.arange(n), full), np.arange(rem)])
            valid = np.ones(capacity, dtype=bool)
        else:
            idx = np.concatenate([np.arange(n), np.full(capacity - n, INVALID)])
            valid = idx != INVALID
        return ClusterPlan(idx[None, :].astype(np.int64), valid[None, :], capacity, fill_mode)

    tree = KDTree(points)
    assigned = np.zeros(n, dtype=bool)
    clusters: list[list[int]] = []
    for i in range(n):
        if assigned[i]:
            continue
        _, near = tree.query(points[i], capacity)
        cluster = [int(j) for j in near if not assigned[j]][:capacity]
        if len(cluster) < capacity:
            _, every = tree.query(points[i], n)
            taken = set(cluster)
            for j in every:
                if not assigned[j] and j not in taken:
                    cluster.append(int(j))
                    taken.add(int(j))
                    if len(cluster) == capacity:
                        break
        assigned[cluster] = True
        clusters.append(cluster)

    index = np.full((len(clusters), capacity), INVALID, dtype=np.int64)
    valid = np.zeros((len(clusters), capacity), dtype=bool)
    for k, cluster in enumerate(clusters):
        index[k, : len(cluster)] = cluster
        valid[k, : len(cluster)] = True

    last = clusters[-1]
    if len(last) < capacity and fill_mode == "neighbor_fill":
        needed = capacity - len(last)
        members = set(last)
        extra: list[int] = []
        for p in last:
            _, every = tree.query(points[p], n)
            for j in every:
                if int(j) not in members:
                    extra.append(int(j))
                    members.add(int(j))
                    needed -= 1
                    if needed == 0:
                        break
            if needed == 0:
                break
        index[-1, len(last):] = extra
        valid[-1, :] = True
    return ClusterPlan(index, valid, capacity, fill_mode)


def cluster_dataset(
    x: SpatioTemporalTensor,
    capacity: int = DEFAULT_CAPACITY,
    fill_mode: str = "binary_mask",
) -> ClusterPlan:
    """Cluster a dataset: Haversine for sensors, Euclidean on lattice indices for grids."""
    metric = "haversine" if x.format == "sensor" else "euclidean"
    return build_clusters(x.coords, capacity, fill_mode, metric)


def random_plan(n: int, capacity: int, rng: np.random.Generator) -> ClusterPlan:
    """Chunk a random permutation of the nodes into clusters (padding the last)."""
    order = rng.permutation(n)
    k = -(-n // capacity)
    index = np.full(k * capacity, INVALID, dtype=np.int64)
    index[:n] = order
    index = index.reshape(k, capacity)
    return ClusterPlan(index, index != INVALID, capacity, "binary_mask")


def window_starts(n_steps: int, patch_steps: int, stride: int, offset: int = 0) -> np.ndarray:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if n_steps < patch_steps:
        raise WindowError(f"{n_steps} steps cannot hold a {patch_steps}-step window")
    return offset + np.arange(0, n_steps - patch_steps + 1, stride)


def gather_patches(
    values: np.ndarray,
    mask: np.ndarray,
    plan: ClusterPlan,
    cluster_ids: np.ndarray,
    starts: np.ndarray,
    patch_steps: int,
) -> PatchBatch:
    """Cut one patch per (cluster id, start) pair out of ``values[N, T, C]``."""
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    slot_index = plan.index[cluster_ids]
    slot_mask = plan.valid[cluster_ids]
    nodes = np.where(slot_mask, slot_index, 0)
    steps = starts[:, None] + np.arange(patch_steps)[None, :]
    data = values[nodes[:, :, None], steps[:, None, :]]
    obs = mask[nodes[:, :, None], steps[:, None, :]]
    keep = slot_mask[:, :, None, None]
    return PatchBatch(
        data=np.where(keep, data, 0.0),
        slot_mask=slot_mask.copy(),
        value_mask=obs & keep,
        slot_index=np.where(slot_mask, slot_index, INVALID),
        cluster_id=cluster_ids,
        start=starts,
    )


def patchify(
    x: SpatioTemporalTensor,
    mask: np.ndarray,
    plan: ClusterPlan,
    patch_steps: int = DEFAULT_PATCH_STEPS,
    stride: int | None = None,
) -> PatchBatch:
    """All (cluster, window) patches, cluster-major; windows at ``0, stride, ...``."""
    mask = check_mask(x, mask)
    stride = patch_steps if stride is None else stride
    starts = window_starts(x.n_steps, patch_steps, stride)
    k = plan.n_clusters
    cluster_ids = np.repeat(np.arange(k), len(starts))
    return gather_patches(x.values, mask, plan, cluster_ids, np.tile(starts, k), patch_steps)


def _pairwise(points: np.ndarray, metric: str) -> np.ndarray:
    if metric == "haversine":
        return haversine_km(points[:, None, :], points[None, :, :])
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def locality_score(plan: ClusterPlan, coords: np.ndarray, metric: str = "euclidean") -> float:
    """Mean over clusters of the mean pairwise distance between distinct valid members."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords[:, None]
    scores = []
    for k in range(plan.n_clusters):
        members = sorted(set(plan.members(k)))
        if len(members) < 2:
            scores.append(0.0)
            continue
        d = _pairwise(coords[members], metric)
        iu = np.triu_indices(len(members), k=1)
        scores.append(float(d[iu].mean()))
    return float(np.mean(scores)) if scores else 0.0


def save_plan(path: str | Path, plan: ClusterPlan) -> Path:
    path = Path(path)
    lines = [
        f"# capacity = {plan.capacity}",
        f"# fill_mode = {plan.fill_mode}",
        "cluster_id, slot, node_index, valid",
    ]
    for k in range(plan.n_clusters):
        for s in range(plan.capacity):
            lines.append(f"{k}, {s}, {plan.index[k, s]}, {int(plan.valid[k, s])}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_plan(path: str | Path) -> ClusterPlan:
    meta: dict[str, str] = {}
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key.strip()] = value.strip()
            continue
        if line.startswith("cluster_id"):
            continue
        rows.append([int(v) for v in line.split(",")])
    if not rows or "capacity" not in meta:
        raise FormatError(f"{path}: not a cluster plan")
    capacity = int(meta["capacity"])
    rows_arr = np.array(rows, dtype=np.int64)
    k = rows_arr[:, 0].max() + 1
    if len(rows_arr) != k * capacity:
        raise FormatError(f"{path}: expected {k * capacity} slot rows, found {len(rows_arr)}")
    index = np.full((k, capacity), INVALID, dtype=np.int64)
    valid = np.zeros((k, capacity), dtype=bool)
    index[rows_arr[:, 0], rows_arr[:, 1]] = rows_arr[:, 2]
    valid[rows_arr[:, 0], rows_arr[:, 1]] = rows_arr[:, 3].astype(bool)
    return ClusterPlan(index, valid, capacity, meta.get("fill_mode", "binary_mask"))
