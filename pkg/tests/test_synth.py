import numpy as np
import pytest

from mspc.core import histogram_array
from mspc.fuse import fusion_completeness
from mspc.synth import (
    SceneSpec,
    area_fractions,
    bhattacharyya,
    default_signatures,
    floor_probability,
    generate,
    preset,
    separability_terms,
)


@pytest.fixture(scope="module")
def reference():
    return generate(preset("jm-like", seed=7))


def test_generation_is_deterministic():
    spec = preset("hn-like", seed=2, extent=(30.0, 30.0))
    a, b = generate(spec), generate(spec)
    assert a.fused.equals(b.fused)
    assert not generate(preset("hn-like", seed=3, extent=(30.0, 30.0))).fused.equals(a.fused)


def test_reference_class_shares(reference):
    h = histogram_array(reference.fused)
    share = h / h.sum()
    target = np.asarray(reference.spec.class_fractions)
    assert np.abs(share - target).max() < 0.02


@pytest.mark.parametrize("name", ["ns-like", "hn-like"])
def test_preset_class_shares(name):
    scene = generate(preset(name, seed=1, extent=(60.0, 60.0)))
    h = histogram_array(scene.fused)
    assert np.abs(h / h.sum() - np.asarray(scene.spec.class_fractions)).max() < 0.03


def test_reference_density_and_fusion(reference):
    dens = reference.spec.scanner_densities
    assert dens == pytest.approx((28.0, 10.0, 32.0))
    for s, c in zip(reference.scanners, range(3)):
        assert np.all(s.channel_presence == 1 << c)
    assert reference.fused.n == sum(s.n for s in reference.scanners)
    # on flat ground a foreign channel is found with Poisson probability
    # 1 - exp(-density * pi r^2); canopy returns at different heights fuse less
    c = reference.fused
    flat = np.isin(c.label, [0, 1, 5])
    lam = np.asarray(dens)
    p = 1 - np.exp(-lam * np.pi * 0.25 ** 2)
    share = lam / lam.sum()
    expected = sum(share[k] * np.prod([p[j] for j in range(3) if j != k]) for k in range(3))
    assert abs(np.mean(c.channel_presence[flat] == 7) - expected) < 0.02
    assert fusion_completeness(c) < expected


def test_ground_points_lie_on_terrain(reference):
    cloud = reference.fused
    h = reference.terrain.height_above(cloud.xyz[reference.ground_mask])
    assert np.abs(h).max() < 0.1
    veg = cloud.label == 2
    assert reference.terrain.height_above(cloud.xyz[veg]).min() >= 2.0 - 1e-9


def test_canopy_returns_are_consistent(reference):
    c = reference.fused
    assert np.all(c.return_number <= c.number_of_returns)
    assert np.all(c.number_of_returns[np.isin(c.label, [0, 1, 3, 5])] == 1)
    ff = c.label == 4
    assert np.all(c.return_number[ff] == c.number_of_returns[ff])


def test_area_fractions_account_for_returns():
    spec = preset("jm-like")
    area = area_fractions(spec)
    assert area[4] == 0.0 and area.sum() == pytest.approx(1.0)
    f = np.asarray(spec.class_fractions)
    assert floor_probability(spec) == pytest.approx(1.8 * f[4] / (f[2] + f[4]))


def test_spec_json_round_trip():
    spec = preset("ns-like", seed=5)
    back = SceneSpec.from_dict(__import__("json").loads(spec.to_json()))
    assert back.to_dict() == spec.to_dict()


def test_spec_validation():
    with pytest.raises(ValueError, match="infeasible"):
        SceneSpec(class_fractions=(0.5, 0.5, 0.5, 0, 0, 0))
    with pytest.raises(ValueError, match="preset"):
        preset("xx-like")
    with pytest.raises(ValueError):
        SceneSpec(density_factor=0)


def test_bhattacharyya_closed_form():
    assert bhattacharyya(0.0, 1.0, 0.0, 1.0) == 0.0
    assert bhattacharyya(0.0, 1.0, 2.0, 1.0) == pytest.approx(0.5)
    assert bhattacharyya(0.0, 1.0, 0.0, 2.0) == pytest.approx(0.5 * np.log(5 / 4))


def test_signature_separability_ordering():
    terms = separability_terms(preset("jm-like"))
    sand_gravel = terms[0, 1]  # (4 attributes, 3 channels)
    assert sand_gravel[0].sum() > sand_gravel[2].sum() > sand_gravel[3].sum()
    # the sediment classes separate better at 905/532 nm than at 1550 nm
    assert sand_gravel[0, 1] > sand_gravel[0, 0]
    sig = default_signatures()
    assert sig[5, 0, 0, 0] < sig[1, 0, 0, 0]  # water dark at 1550 nm
