"""A small KD-tree with deterministic k-nearest-neighbour queries.

Neighbours are ordered by (squared distance, point index), so equidistant
points always come back lowest index first. That ordering is what makes the
greedy clustering reproducible.
"""

from __future__ import annotations

import heapq

import numpy as np


class _Leaf:
    __slots__ = ("index",)

    def __init__(self, index: np.ndarray):
        self.index = index


class _Split:
    __slots__ = ("axis", "value", "left", "right")

    def __init__(self, axis: int, value: float, left, right):
        self.axis = axis
        self.value = value
        self.left = left
        self.right = right


class KDTree:
    def __init__(self, points: np.ndarray, leafsize: int = 8):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or len(points) == 0:
            raise ValueError("points must be a non-empty [n, k] array")
        self.points = points
        self.n, self.k = points.shape
        self.leafsize = max(1, leafsize)
        self.root = self._build(np.arange(self.n), 0)

    def _build(self, index: np.ndarray, depth: int):
        if len(index) <= self.leafsize:
            return _Leaf(index)
        pts = self.points[index]
        spread = pts.max(axis=0) - pts.min(axis=0)
        axis = int(np.argmax(spread)) if spread.max() > 0 else depth % self.k
        if spread[axis] == 0:
            return _Leaf(index)
        mid = len(index) // 2
        order = np.argsort(pts[:, axis], kind="stable")
        index = index[order]
        value = self.points[index[mid], axis]
        left = index[self.points[index, axis] < value]
        right = index[self.points[index, axis] >= value]
        if len(left) == 0 or len(right) == 0:
            return _Leaf(index)
        return _Split(axis, value, self._build(left, depth + 1), self._build(right, depth + 1))

    def query(self, point, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return the ``k`` nearest points as ``(distances, indices)``, nearest first."""
        point = np.asarray(point, dtype=np.float64)
        k = min(k, self.n)
        if k <= 0:
            return np.empty(0), np.empty(0, dtype=np.int64)
        if k == self.n:
            d2 = ((self.points - point) ** 2).sum(axis=1)
            order = np.lexsort((np.arange(self.n), d2))
            return np.sqrt(d2[order]), order

        # max-heap of the best k so far, keyed on (d2, idx) via negation
        heap: list[tuple[float, int]] = []

        def visit(node):
            if isinstance(node, _Leaf):
                d2s = ((self.points[node.index] - point) ** 2).sum(axis=1)
                for d2, idx in zip(d2s.tolist(), node.index.tolist()):
                    if len(heap) < k:
                        heapq.heappush(heap, (-d2, -idx))
                    elif (d2, idx) < (-heap[0][0], -heap[0][1]):
                        heapq.heapreplace(heap, (-d2, -idx))
                return
            diff = point[node.axis] - node.value
            near, far = (node.left, node.right) if diff < 0 else (node.right, node.left)
            visit(near)
            # ties may still hide a lower index on the far side
            if len(heap) < k or diff * diff <= -heap[0][0]:
                visit(far)

        visit(self.root)
        best = sorted((-d2, -idx) for d2, idx in heap)
        return (
            np.sqrt(np.array([b[0] for b in best])),
            np.array([b[1] for b in best], dtype=np.int64),
        )
