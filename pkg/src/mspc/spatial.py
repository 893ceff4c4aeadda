"""k-d tree queries and voxel hashing.

The tree itself is scipy's ``cKDTree`` built with median splits on the axis
of largest spread. This module wraps it so that results are reported in a
canonical order: ascending Euclidean distance, ties broken by lower point
index, with distances recomputed from the coordinates in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from .core import PointCloud

# relative slack when asking scipy for candidate sets; exact filtering follows
_SLACK = 1e-9


def _points(source: Union[PointCloud, np.ndarray]) -> np.ndarray:
    if isinstance(source, PointCloud):
        return source.xyz
    return np.ascontiguousarray(source, dtype=np.float64).reshape(-1, 3)


def _distances(points: np.ndarray, idx: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = points[idx] - query
    return np.sqrt(np.einsum("...i,...i->...", diff, diff))


class KdTree:
    """Immutable 3-D k-d tree over point indices."""

    def __init__(self, points: Union[PointCloud, np.ndarray]):
        self.points = _points(points).copy()
        self.points.flags.writeable = False
        self.n = len(self.points)
        self._tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True) if self.n else None

    def __len__(self) -> int:
        return self.n

    def knn(self, query, k: int) -> list[tuple[int, float]]:
        idx, dist = self._knn_one(np.asarray(query, np.float64).reshape(3), k)
        return list(zip(idx.tolist(), dist.tolist()))

    def _knn_one(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        if k < 1:
            raise ValueError("k must be >= 1")
        m = min(k, self.n)
        if m == 0:
            return np.zeros(0, np.int64), np.zeros(0)
        _, cand = self._tree.query(q, k=m)
        cand = np.atleast_1d(cand)
        d = _distances(self.points, cand, q)
        # every point tied with the k-th distance is a candidate
        radius = d.max() * (1 + _SLACK) + 1e-300
        cand = np.asarray(self._tree.query_ball_point(q, radius), dtype=np.int64)
        d = _distances(self.points, cand, q)
        order = np.lexsort((cand, d))[:m]
        return cand[order], d[order]

    def knn_batch(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized :meth:`knn` returning ``(indices, distances)`` of shape ``(q, min(k, n))``."""
        if k < 1:
            raise ValueError("k must be >= 1")
        queries = np.ascontiguousarray(queries, np.float64).reshape(-1, 3)
        m = min(k, self.n)
        if m == 0 or len(queries) == 0:
            return np.zeros((len(queries), m), np.int64), np.zeros((len(queries), m))
        extra = min(m + 1, self.n)
        _, cand = self._tree.query(queries, k=extra)
        cand = cand.reshape(len(queries), extra).astype(np.int64)
        d = _distances(self.points, cand, queries[:, None, :])
        order = np.lexsort((cand, d), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        if extra > m:
            # a tie across the k-th boundary may hide a lower index further out
            suspicious = d[:, m] <= d[:, m - 1] * (1 + 2 * _SLACK)
        else:
            suspicious = np.zeros(len(queries), bool)
        idx, dist = cand[:, :m].copy(), d[:, :m].copy()
        for r in np.flatnonzero(suspicious):
            idx[r], dist[r] = self._knn_one(queries[r], m)
        return idx, dist

    def radius_query(self, query, radius: float) -> list[tuple[int, float]]:
        idx, dist = self._radius_one(np.asarray(query, np.float64).reshape(3), radius)
        return list(zip(idx.tolist(), dist.tolist()))

    def _radius_one(self, q: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
        if radius < 0:
            raise ValueError("radius must be >= 0")
        if self.n == 0:
            return np.zeros(0, np.int64), np.zeros(0)
        cand = np.asarray(
            self._tree.query_ball_point(q, radius * (1 + _SLACK) + 1e-300), dtype=np.int64
        )
        d = _distances(self.points, cand, q)
        keep = d <= radius
        cand, d = cand[keep], d[keep]
        order = np.lexsort((cand, d))
        return cand[order], d[order]

    def nearest_within(self, queries, radius: float) -> tuple[np.ndarray, np.ndarray]:
        """Nearest point within ``radius`` for each query (``-1`` when none).

        Ties resolve to the lowest index, matching :meth:`knn`.
        """
        queries = np.ascontiguousarray(queries, np.float64).reshape(-1, 3)
        nq = len(queries)
        idx = np.full(nq, -1, np.int64)
        dist = np.full(nq, np.inf)
        if self.n == 0 or nq == 0:
            return idx, dist
        near, cand = self._tree.query(queries, k=min(2, self.n),
                                      distance_upper_bound=radius * (1 + _SLACK) + 1e-300)
        near = near.reshape(nq, -1)
        cand = cand.reshape(nq, -1)
        found = cand[:, 0] < self.n
        rows = np.flatnonzero(found)
        c0 = cand[rows, 0].astype(np.int64)
        d0 = _distances(self.points, c0, queries[rows])
        ok = d0 <= radius
        idx[rows[ok]] = c0[ok]
        dist[rows[ok]] = d0[ok]
        # recheck rows where a second candidate is (nearly) as close
        if cand.shape[1] > 1:
            second = cand[rows, 1] < self.n
            close = second & (near[rows, 1] <= near[rows, 0] * (1 + 4 * _SLACK) + 1e-12)
            edge = np.abs(near[rows, 0] - radius) <= radius * 4 * _SLACK + 1e-12
            for r in rows[close | edge]:
                i, d = self._radius_one(queries[r], radius)
                if len(i):
                    idx[r], dist[r] = i[0], d[0]
                else:
                    idx[r], dist[r] = -1, np.inf
        return idx, dist


def build_kdtree(cloud: Union[PointCloud, np.ndarray]) -> KdTree:
    return KdTree(cloud)


def knn(tree: KdTree, query, k: int) -> list[tuple[int, float]]:
    return tree.knn(query, k)


def radius_query(tree: KdTree, query, radius: float) -> list[tuple[int, float]]:
    return tree.radius_query(query, radius)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Partition of point indices by integer cell key.

    ``keys`` holds the occupied cells in ascending lexicographic order and
    ``cell_of[i]`` is the row of ``keys`` holding point ``i``.
    """

    cell: float
    origin: np.ndarray
    keys: np.ndarray
    cell_of: np.ndarray

    @property
    def num_cells(self) -> int:
        return len(self.keys)

    @cached_property
    def _order(self) -> tuple[np.ndarray, np.ndarray]:
        order = np.argsort(self.cell_of, kind="stable")
        starts = np.searchsorted(self.cell_of[order], np.arange(self.num_cells + 1))
        return order, starts

    def members(self, cell_index: int) -> np.ndarray:
        order, starts = self._order
        return order[starts[cell_index]:starts[cell_index + 1]]

    def cells(self) -> dict[tuple[int, int, int], np.ndarray]:
        return {tuple(k): self.members(i) for i, k in enumerate(self.keys.tolist())}


def voxel_keys(points: np.ndarray, cell: float, origin: np.ndarray) -> np.ndarray:
    return np.floor((points - origin) / cell).astype(np.int64)


def voxelize(
    cloud: Union[PointCloud, np.ndarray],
    cell: float,
    origin: Optional[np.ndarray] = None,
) -> VoxelGrid:
    """Hash points into cubic cells of edge ``cell``.

    ``origin`` defaults to the cloud's minimum corner.
    """
    if not cell > 0:
        raise ValueError(f"voxel cell size must be > 0, got {cell}")
    pts = _points(cloud)
    if origin is None:
        origin = pts.min(axis=0) if len(pts) else np.zeros(3)
    origin = np.asarray(origin, np.float64).reshape(3)
    if len(pts) == 0:
        return VoxelGrid(cell, origin, np.zeros((0, 3), np.int64), np.zeros(0, np.int64))
    k = voxel_keys(pts, cell, origin)
    keys, cell_of = np.unique(k, axis=0, return_inverse=True)
    return VoxelGrid(cell, origin, keys, cell_of.reshape(-1).astype(np.int64))
