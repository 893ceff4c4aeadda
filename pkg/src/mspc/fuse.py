"""Merge three single-wavelength clouds into one multispectral cloud."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import NUM_CHANNELS, SENTINEL, SPECTRAL_ATTRIBUTES, PointCloud
from .spatial import KdTree


@dataclass(frozen=True)
class FusionConfig:
    radius: float = 0.25

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("fusion radius must be > 0")


def fuse(clouds: Sequence[PointCloud], config: FusionConfig = FusionConfig()) -> PointCloud:
    """Union of the per-scanner clouds with foreign channels filled in.

    ``clouds[c]`` is scanner ``c``'s cloud and must carry channel ``c``
    attributes only. For every point, each other channel's four attributes
    are copied from the single nearest point of that scanner within
    ``config.radius`` (lowest index on ties); without one they stay at the
    sentinel and the presence bit is cleared.
    """
    if len(clouds) != NUM_CHANNELS:
        raise ValueError(f"expected {NUM_CHANNELS} clouds, got {len(clouds)}")
    trees = [KdTree(c.xyz) for c in clouds]
    parts = []
    for own, cloud in enumerate(clouds):
        n = cloud.n
        attrs = {name: np.full((n, 3), SENTINEL, np.float32) for name in SPECTRAL_ATTRIBUTES}
        presence = np.zeros(n, np.uint8)
        for name in SPECTRAL_ATTRIBUTES:
            attrs[name][:, own] = getattr(cloud, name)[:, own]
        presence |= np.uint8(1 << own)
        for other in range(NUM_CHANNELS):
            if other == own or n == 0:
                continue
            idx, _ = trees[other].nearest_within(cloud.xyz, config.radius)
            hit = idx >= 0
            src = idx[hit]
            for name in SPECTRAL_ATTRIBUTES:
                attrs[name][hit, other] = getattr(clouds[other], name)[src, other]
            presence[hit] |= np.uint8(1 << other)
        parts.append(cloud.replace(channel_presence=presence, **attrs))
    return PointCloud.concat(parts)


def fusion_completeness(cloud: PointCloud) -> float:
    """Fraction of points with all three channels present."""
    if cloud.n == 0:
        return 0.0
    return float(np.mean(cloud.channel_presence == 0b111))
