import time

import numpy as np
import pytest

from fixtures import scanner_cloud
from oracles import brute_fuse
from mspc.core import SENTINEL, PointCloud
from mspc.fuse import FusionConfig, fuse, fusion_completeness


def _scanners(n=500, seed=0, extent=5.0):
    return [scanner_cloud(n, c, seed + c, extent) for c in range(3)]


def test_fuse_matches_brute_force_oracle():
    clouds = _scanners()
    t0 = time.perf_counter()
    fused = fuse(clouds, FusionConfig(0.25))
    elapsed = time.perf_counter() - t0
    ref = brute_fuse(clouds, 0.25)
    for name in ("intensity", "reflectance", "amplitude", "deviation"):
        assert getattr(fused, name).tobytes() == ref[name].tobytes()
    assert fused.channel_presence.tolist() == ref["presence"].tolist()
    assert fused.xyz.tobytes() == ref["xyz"].tobytes()
    assert elapsed < 5


def test_fuse_is_union_in_scanner_order():
    clouds = _scanners(20)
    fused = fuse(clouds)
    assert fused.n == 60
    assert np.array_equal(fused.xyz[20:40], clouds[1].xyz)
    assert np.array_equal(fused.label, np.concatenate([c.label for c in clouds]))


def test_missing_channel_stays_sentinel():
    far = [PointCloud.from_xyz([[100.0 * c, 0, 0]], intensity=[[1.0, 2.0, 3.0]]) for c in range(3)]
    fused = fuse(far)
    assert fused.channel_presence.tolist() == [1, 2, 4]
    assert fused.intensity[0].tolist() == [1.0, SENTINEL, SENTINEL]
    assert fused.intensity[2].tolist() == [SENTINEL, SENTINEL, 3.0]
    assert fusion_completeness(fused) == 0.0


def test_nearest_tie_uses_lowest_index():
    a = PointCloud.from_xyz([[0.0, 0, 0]], intensity=[[1, -1, -1]])
    b = PointCloud.from_xyz([[0.1, 0, 0], [-0.1, 0, 0]], intensity=[[-1, 7, -1], [-1, 8, -1]])
    c = PointCloud.from_xyz([[5.0, 0, 0]], intensity=[[-1, -1, 9]])
    fused = fuse([a, b, c])
    assert fused.intensity[0].tolist() == [1.0, 7.0, SENTINEL]
    assert fused.channel_presence[0] == 0b011


def test_dense_overlap_is_complete():
    fused = fuse(_scanners(2000, seed=3, extent=1.5))
    assert fusion_completeness(fused) > 0.99


def test_fuse_argument_checks():
    with pytest.raises(ValueError):
        fuse(_scanners(5)[:2])
    with pytest.raises(ValueError):
        FusionConfig(0.0)
