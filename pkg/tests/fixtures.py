"""Small deterministic point clouds shared by several test modules."""

from __future__ import annotations

import numpy as np

from mspc.core import PointCloud


def random_cloud(n: int, seed: int = 0, extent: float = 10.0, labels: bool = True) -> PointCloud:
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(0, extent, (n, 3))
    xyz[:, 2] *= 0.2
    nr = rng.integers(1, 4, n)
    rn = np.minimum(rng.integers(1, 4, n), nr)
    return PointCloud.from_xyz(
        xyz,
        intensity=rng.uniform(0, 1, (n, 3)),
        reflectance=rng.normal(-5, 2, (n, 3)),
        amplitude=rng.uniform(5, 30, (n, 3)),
        deviation=rng.uniform(0, 20, (n, 3)),
        return_number=rn,
        number_of_returns=nr,
        label=rng.integers(0, 6, n) if labels else None,
    )


def scanner_cloud(n: int, channel: int, seed: int, extent: float = 5.0) -> PointCloud:
    """Cloud carrying attributes for ``channel`` only (others at the sentinel)."""
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(0, extent, (n, 3))
    cols = {}
    for name in ("intensity", "reflectance", "amplitude", "deviation"):
        a = np.full((n, 3), -1.0, np.float32)
        a[:, channel] = rng.uniform(0, 10, n)
        cols[name] = a
    return PointCloud.from_xyz(xyz, label=rng.integers(0, 6, n), **cols)


def grid_with_outlier(spacing: float = 0.1, side: int = 20) -> tuple[PointCloud, int]:
    """Regular planar grid plus one point far above it; returns (cloud, outlier index)."""
    g = np.arange(side) * spacing
    x, y = np.meshgrid(g, g, indexing="ij")
    xyz = np.stack([x.ravel(), y.ravel(), np.zeros(x.size)], axis=1)
    outlier = np.array([[side * spacing / 2, side * spacing / 2, 50.0]])
    xyz = np.vstack([xyz, outlier])
    return PointCloud.from_xyz(xyz), len(xyz) - 1


def plane_and_box(seed: int = 0, side: float = 30.0, box_height: float = 5.0):
    """Flat terrain with a 6 m square block raised ``box_height`` above it.

    Returns (cloud, is_terrain mask). The block's top carries points; the
    terrain under it is occluded, as in airborne data.
    """
    rng = np.random.default_rng(seed)
    n = int(side * side * 4)
    xy = rng.uniform(0, side, (n, 2))
    box = (np.abs(xy[:, 0] - side / 2) < 3) & (np.abs(xy[:, 1] - side / 2) < 3)
    z = rng.normal(0, 0.02, n) + np.where(box, box_height, 0.0)
    cloud = PointCloud.from_xyz(np.column_stack([xy, z]))
    return cloud, ~box
