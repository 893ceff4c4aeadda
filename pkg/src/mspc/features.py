"""Per-point model inputs: channel-set selection, normalization and
covariance (eigenvalue) shape features."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import SPECTRAL_ATTRIBUTES, PointCloud
from .preprocess import ClothSurface, CsfParams, simulate_cloth
from .spatial import KdTree

EPS = 1e-8

#: Names of the 14 normalizable per-point features, in storage order.
FEATURE_NAMES = tuple(
    f"{attr}_{c + 1}" for attr in SPECTRAL_ATTRIBUTES for c in range(3)
) + ("return_number", "number_of_returns")


class ChannelSetConfig(enum.Enum):
    XYZ = "xyz"
    CHANNEL1 = "ch1"
    CHANNELS12 = "ch12"
    CHANNELS123 = "ch123"
    ALL_FEATURES = "all"
    ONLY_INTENSITY = "intensity"
    ONLY_REFLECTANCE = "reflectance"
    ONLY_AMPLITUDE = "amplitude"
    ONLY_DEVIATION = "deviation"

    @classmethod
    def parse(cls, text: str) -> "ChannelSetConfig":
        try:
            return cls(text.strip().lower())
        except ValueError:
            choices = ", ".join(c.value for c in cls)
            raise ValueError(f"unknown channel set {text!r} (choose from {choices})") from None

    @property
    def feature_indices(self) -> tuple[int, ...]:
        """Indices into :data:`FEATURE_NAMES` fed to the model after xyz."""
        def cols(attrs, channels):
            return [a * 3 + c for a in attrs for c in channels]

        every = range(len(SPECTRAL_ATTRIBUTES))
        if self is ChannelSetConfig.XYZ:
            return ()
        if self is ChannelSetConfig.CHANNEL1:
            return tuple(cols(every, [0]))
        if self is ChannelSetConfig.CHANNELS12:
            return tuple(cols(every, [0, 1]))
        if self is ChannelSetConfig.CHANNELS123:
            return tuple(cols(every, [0, 1, 2]))
        if self is ChannelSetConfig.ALL_FEATURES:
            return tuple(cols(every, [0, 1, 2])) + (12, 13)
        attr = {
            ChannelSetConfig.ONLY_INTENSITY: 0,
            ChannelSetConfig.ONLY_REFLECTANCE: 1,
            ChannelSetConfig.ONLY_AMPLITUDE: 2,
            ChannelSetConfig.ONLY_DEVIATION: 3,
        }[self]
        return tuple(cols([attr], [0, 1, 2]))

    @property
    def dim(self) -> int:
        return 3 + len(self.feature_indices)

    @property
    def required_channels(self) -> int:
        """Bitmask of scanner channels this configuration reads."""
        mask = 0
        for i in self.feature_indices:
            if i < 12:
                mask |= 1 << (i % 3)
        return mask

    @property
    def column_names(self) -> list[str]:
        return ["x", "y", "height"] + [FEATURE_NAMES[i] for i in self.feature_indices]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # (14,)
    std: np.ndarray  # (14,)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64))

    def scale(self) -> np.ndarray:
        return np.maximum(self.std, EPS)


def raw_features(cloud: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    """(n, 14) float64 feature table and matching presence mask."""
    n = cloud.n
    values = np.empty((n, len(FEATURE_NAMES)), np.float64)
    present = np.ones((n, len(FEATURE_NAMES)), bool)
    bits = cloud.channel_presence
    for a, name in enumerate(SPECTRAL_ATTRIBUTES):
        values[:, a * 3:a * 3 + 3] = getattr(cloud, name)
        for c in range(3):
            present[:, a * 3 + c] = (bits >> c & 1).astype(bool)
    values[:, 12] = cloud.return_number
    values[:, 13] = cloud.number_of_returns
    return values, present


def compute_norm_stats(clouds: Sequence[PointCloud]) -> NormStats:
    """Mean and standard deviation of each feature over present entries only."""
    total = np.zeros(len(FEATURE_NAMES))
    total_sq = np.zeros(len(FEATURE_NAMES))
    count = np.zeros(len(FEATURE_NAMES))
    for cloud in clouds:
        v, p = raw_features(cloud)
        total += np.where(p, v, 0.0).sum(axis=0)
        count += p.sum(axis=0)
    missing = [FEATURE_NAMES[i] for i in np.flatnonzero(count == 0)]
    if missing:
        raise ValueError(f"no present values for feature(s): {', '.join(missing)}")
    mean = total / count
    for cloud in clouds:
        v, p = raw_features(cloud)
        total_sq += np.where(p, (v - mean) ** 2, 0.0).sum(axis=0)
    std = np.sqrt(total_sq / count)
    return NormStats(mean=mean, std=std)


def normalize(values: np.ndarray, present: np.ndarray, stats: NormStats) -> np.ndarray:
    """z-score present entries; absent ones become 0 (the training mean)."""
    z = (values - stats.mean) / stats.scale()
    return np.where(present, z, 0.0)


def denormalize(z: np.ndarray, stats: NormStats) -> np.ndarray:
    return z * stats.scale() + stats.mean


def ground_surface(cloud: PointCloud, params: CsfParams = CsfParams()) -> ClothSurface:
    return simulate_cloth(cloud, params)


def assemble(
    cloud: PointCloud,
    config: ChannelSetConfig,
    stats: Optional[NormStats],
    surface: Optional[ClothSurface] = None,
    center: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Model input matrix of shape ``(n, config.dim)``, float32.

    Columns are x and y relative to the tile centre (``center`` or the
    bounding-box centre), height above the cloth ground surface, then the
    selected z-scored features in storage order.
    """
    n = cloud.n
    if config.feature_indices and stats is None:
        raise ValueError(f"channel set {config.value!r} needs normalization stats")
    if stats is not None and (stats.mean.shape != (len(FEATURE_NAMES),) or stats.std.shape != stats.mean.shape):
        raise ValueError(
            f"normalization stats have {stats.mean.shape[0]} features, expected {len(FEATURE_NAMES)}"
        )
    out = np.empty((n, config.dim), np.float64)
    if n == 0:
        return out.astype(np.float32)
    if center is None:
        lo, hi = cloud.bbox
        center = (lo[:2] + hi[:2]) / 2
    out[:, :2] = cloud.xyz[:, :2] - np.asarray(center)[:2]
    if surface is None:
        surface = simulate_cloth(cloud) if n >= 3 else None
    out[:, 2] = surface.height_above(cloud.xyz) if surface is not None else 0.0
    if config.feature_indices:
        v, p = raw_features(cloud)
        z = normalize(v, p, stats)
        out[:, 3:] = z[:, list(config.feature_indices)]
    return out.astype(np.float32)


def eigen_features(cloud, k: int = 10, tree: Optional[KdTree] = None) -> np.ndarray:
    """(n, 4) array of linearity, planarity, sphericity, surface variation.

    Computed from the eigenvalues l1 >= l2 >= l3 of the covariance of each
    point's k-nearest-neighbour set (the point itself included).
    """
    if k < 3:
        raise ValueError("eigen features need k >= 3")
    pts = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, np.float64)
    n = len(pts)
    if n == 0:
        return np.zeros((0, 4))
    tree = tree or KdTree(pts)
    idx, _ = tree.knn_batch(pts, k)
    out = np.empty((n, 4))
    chunk = 200_000
    for s in range(0, n, chunk):
        nb = pts[idx[s:s + chunk]]
        nb = nb - nb.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", nb, nb) / nb.shape[1]
        lam = np.linalg.eigvalsh(cov)[:, ::-1]
        out[s:s + chunk] = shape_from_eigenvalues(lam)
    return out


def shape_from_eigenvalues(lam: np.ndarray) -> np.ndarray:
    lam = np.clip(np.asarray(lam, np.float64), 0.0, None)
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    valid = l1 > EPS
    safe1 = np.where(valid, l1, 1.0)
    total = np.where(valid, l1 + l2 + l3, 1.0)
    feats = np.stack(
        [(l1 - l2) / safe1, (l2 - l3) / safe1, l3 / safe1, l3 / total], axis=-1
    )
    return np.where(valid[..., None], np.clip(feats, 0.0, 1.0), 0.0)
