"""Per-scanner cleanup: voxel downsampling, statistical outlier removal and
cloth-simulation ground segmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import PointCloud
from .spatial import KdTree, voxelize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SorParams:
    k: int = 10
    multiplier: float = 10.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("SOR k must be >= 1")
        if not self.multiplier > 0:
            raise ValueError("SOR multiplier must be > 0")


@dataclass(frozen=True)
class CsfParams:
    """Cloth simulation settings.

    ``rigidness`` is the number of internal-constraint relaxation passes
    per time step. Gravity moves a free node by ``time_step**2`` per step.
    """

    cloth_resolution: float = 1.0
    distance_threshold: float = 1.5
    time_step: float = 0.65
    rigidness: int = 1
    max_iterations: int = 500
    convergence_eps: float = 0.005

    def __post_init__(self):
        for name in ("cloth_resolution", "distance_threshold", "time_step", "convergence_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.rigidness not in (1, 2, 3):
            raise ValueError("rigidness must be 1, 2 or 3")


def downsample(cloud: PointCloud, cell: float = 0.02) -> PointCloud:
    """Keep one original point per occupied voxel: the one nearest the
    centroid of the voxel's members (lowest index on ties).

    The voxel lattice is anchored at a multiple of ``cell`` so that running
    the filter twice changes nothing.
    """
    if not cell > 0:
        raise ValueError(f"voxel cell size must be > 0, got {cell}")
    if cloud.n == 0:
        return cloud
    origin = np.floor(cloud.xyz.min(axis=0) / cell) * cell
    grid = voxelize(cloud, cell, origin=origin)
    m = grid.num_cells
    xyz = cloud.xyz
    counts = np.bincount(grid.cell_of, minlength=m)
    centroid = np.stack(
        [np.bincount(grid.cell_of, weights=xyz[:, a], minlength=m) for a in range(3)], axis=1
    ) / counts[:, None]
    d2 = ((xyz - centroid[grid.cell_of]) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(cloud.n), d2, grid.cell_of))
    first = np.ones(cloud.n, bool)
    first[1:] = grid.cell_of[order[1:]] != grid.cell_of[order[:-1]]
    keep = order[first]
    return cloud.subset(keep)


def mean_knn_distance(points: np.ndarray, k: int, tree: Optional[KdTree] = None) -> np.ndarray:
    """Mean distance from each point to its ``k`` nearest other points."""
    tree = tree or KdTree(points)
    _, dist = tree.knn_batch(points, k + 1)
    # column 0 is the point itself (distance 0, lowest index among coincident points)
    return dist[:, 1:].mean(axis=1)


def sor_filter(cloud: PointCloud, params: SorParams = SorParams()) -> tuple[PointCloud, np.ndarray]:
    """Statistical outlier removal.

    Returns the kept cloud and the sorted indices of removed points.
    """
    if cloud.n <= params.k:
        return cloud, np.zeros(0, np.int64)
    d = mean_knn_distance(cloud.xyz, params.k)
    mu, sigma = d.mean(), d.std()
    removed = np.flatnonzero(d > mu + params.multiplier * sigma)
    keep = np.ones(cloud.n, bool)
    keep[removed] = False
    logger.debug("SOR: mean %.4g std %.4g removed %d", mu, sigma, len(removed))
    return cloud.subset(np.flatnonzero(keep)), removed


@dataclass(frozen=True)
class ClothSurface:
    """Settled cloth, stored in original (non-inverted) elevation."""

    origin: np.ndarray  # xy of node (0, 0)
    resolution: float
    heights: np.ndarray  # (nx, ny)
    iterations: int

    def height_at(self, xy: np.ndarray) -> np.ndarray:
        """Bilinear interpolation of the cloth elevation at ``xy``."""
        xy = np.asarray(xy, np.float64).reshape(-1, 2)
        g = (xy - self.origin) / self.resolution
        nx, ny = self.heights.shape
        i0 = np.clip(np.floor(g[:, 0]).astype(np.int64), 0, nx - 2)
        j0 = np.clip(np.floor(g[:, 1]).astype(np.int64), 0, ny - 2)
        fx = np.clip(g[:, 0] - i0, 0.0, 1.0)
        fy = np.clip(g[:, 1] - j0, 0.0, 1.0)
        h = self.heights
        return (
            h[i0, j0] * (1 - fx) * (1 - fy)
            + h[i0 + 1, j0] * fx * (1 - fy)
            + h[i0, j0 + 1] * (1 - fx) * fy
            + h[i0 + 1, j0 + 1] * fx * fy
        )

    def height_above(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, np.float64).reshape(-1, 3)
        return xyz[:, 2] - self.height_at(xyz[:, :2])


def simulate_cloth(cloud: PointCloud, params: CsfParams = CsfParams()) -> ClothSurface:
    """Drop a vertical-motion cloth onto the height-inverted cloud."""
    if cloud.n < 3:
        raise ValueError("cloth simulation needs at least 3 points")
    xyz = cloud.xyz
    lo, hi = xyz[:, :2].min(axis=0), xyz[:, :2].max(axis=0)
    if np.all(hi - lo == 0):
        raise ValueError("degenerate cloud: all points share the same xy location")
    res = params.cloth_resolution
    origin = lo - res
    shape = tuple(int(s) for s in np.floor((hi - origin) / res).astype(np.int64) + 2)
    inv = -xyz[:, 2]

    # collision height per node: the highest inverted point snapped to the node
    node = np.rint((xyz[:, :2] - origin) / res).astype(np.int64)
    flat = node[:, 0] * shape[1] + node[:, 1]
    collide = np.full(shape[0] * shape[1], -np.inf)
    np.maximum.at(collide, flat, inv)
    collide = collide.reshape(shape)
    empty = ~np.isfinite(collide)
    if empty.any():
        _, (ii, jj) = ndimage.distance_transform_edt(empty, return_indices=True)
        collide = collide[ii, jj]

    top = inv.max() + 2 * res
    z = np.full(shape, top)
    prev = z.copy()
    movable = np.ones(shape, bool)
    damping = 0.01
    gravity = params.time_step ** 2
    it = 0
    for it in range(1, params.max_iterations + 1):
        before = z.copy()
        step = np.where(movable, (z - prev) * (1 - damping) - gravity, 0.0)
        prev = z
        z = z + step
        hit = movable & (z <= collide)
        z[hit] = collide[hit]
        movable &= ~hit
        for _ in range(params.rigidness):
            z = _relax(z, movable)
            hit = movable & (z <= collide)
            z[hit] = collide[hit]
            movable &= ~hit
        moved = np.abs(z - before)[movable]
        if moved.size == 0 or moved.max() < params.convergence_eps:
            break
    logger.debug("CSF converged after %d iterations", it)
    return ClothSurface(origin=origin, resolution=res, heights=-z, iterations=it)


def _relax(z: np.ndarray, movable: np.ndarray) -> np.ndarray:
    """One pass over the spring constraints between 4-neighbours.

    Springs are satisfied sequentially in four groups of disjoint edges
    (even/odd columns, then even/odd rows). A spring between two movable
    nodes moves both to their mid-height; a spring with one pinned end moves
    the free end onto the pinned one.
    """
    z = z.copy()
    for axis in (0, 1):
        for parity in (0, 1):
            n = z.shape[axis]
            a = np.arange(parity, n - 1, 2)
            if not len(a):
                continue
            sa = (slice(None), a) if axis else (a, slice(None))
            sb = (slice(None), a + 1) if axis else (a + 1, slice(None))
            za, zb = z[sa], z[sb]
            ma, mb = movable[sa], movable[sb]
            mid = 0.5 * (za + zb)
            new_a = np.where(ma & mb, mid, np.where(ma, zb, za))
            new_b = np.where(ma & mb, mid, np.where(mb, za, zb))
            z[sa], z[sb] = new_a, new_b
    return z


def csf_ground(
    cloud: PointCloud,
    params: CsfParams = CsfParams(),
    surface: Optional[ClothSurface] = None,
) -> np.ndarray:
    """Boolean ground mask: points within ``distance_threshold`` of the cloth."""
    surface = surface or simulate_cloth(cloud, params)
    return np.abs(surface.height_above(cloud.xyz)) <= params.distance_threshold


@dataclass
class PreprocessReport:
    input_points: int
    downsampled_points: int
    sor_removed: int
    output_points: int
    ground_points: int
    csf_iterations: int

    @property
    def ground_fraction(self) -> float:
        return self.ground_points / self.output_points if self.output_points else 0.0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["ground_fraction"] = self.ground_fraction
        return d


def preprocess(
    cloud: PointCloud,
    cell: float = 0.02,
    sor: SorParams = SorParams(),
    csf: CsfParams = CsfParams(),
) -> tuple[PointCloud, np.ndarray, PreprocessReport]:
    """Downsample, then SOR, then CSF. Returns (cloud, ground mask, report)."""
    down = downsample(cloud, cell)
    kept, removed = sor_filter(down, sor)
    surface = simulate_cloth(kept, csf)
    ground = csf_ground(kept, csf, surface)
    report = PreprocessReport(
        input_points=cloud.n,
        downsampled_points=down.n,
        sor_removed=len(removed),
        output_points=kept.n,
        ground_points=int(ground.sum()),
        csf_iterations=surface.iterations,
    )
    return kept, ground, report
