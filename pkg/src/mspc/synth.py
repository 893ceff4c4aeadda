"""Procedural multispectral riverine scenes with per-point ground truth.

A scene is laid out on a 0.5 m raster: a meandering water channel, bands of
sediment (sand or gravel patches) along its banks, a low-vegetation belt and
tree canopy beyond. Area shares are chosen so that the *point* shares of the
six classes match the preset targets, accounting for the extra returns that
canopy pulses produce. Each simulated scanner then samples its own pulses
and draws its channel's spectral attributes from the class signature.

The default signatures are a modeling choice, not a measurement: intensity
and reflectance separate the sediment classes (more strongly at 905 and
532 nm than at 1550 nm), amplitude separates them weakly and deviation
hardly at all; water has a depressed 1550 nm response.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import NUM_CHANNELS, NUM_CLASSES, SENTINEL, SPECTRAL_ATTRIBUTES, LandCoverClass, PointCloud
from .fuse import FusionConfig, fuse
from .preprocess import ClothSurface

C = LandCoverClass
#: Table-1 style scanner densities (points/m^2) before the density factor.
FULL_DENSITY = (1400.0, 500.0, 1600.0)
GROUND_CLASSES = (C.SAND, C.GRAVEL, C.FOREST_FLOOR, C.WATER)
LAYOUT_RES = 0.5
_CANOPY = 2  # layout code shared by high vegetation and forest floor

# Attribute scales: (baseline mean, per-point std). Class means sit at
# ``base + offset * std`` with offsets from the tables below.
ATTRIBUTE_SCALE = {
    "intensity": (300.0, 60.0),
    "reflectance": (-8.0, 1.5),
    "amplitude": (20.0, 3.0),
    "deviation": (10.0, 4.0),
}

# Brightness offsets (in std units) shared by intensity and reflectance,
# rows = class, columns = channel (1550, 905, 532).
_BRIGHTNESS = np.array([
    [0.5, 1.2, 1.2],    # sand
    [0.0, 0.0, 0.0],    # gravel
    [1.5, 2.5, -1.0],   # high vegetation
    [1.8, 2.6, -0.6],   # low vegetation
    [1.6, 2.3, -0.5],   # forest floor
    [-3.0, -1.5, 0.8],  # water: strong absorption at 1550 nm
])
_AMPLITUDE = np.array([
    [0.2, 0.2, 0.2],
    [0.0, 0.0, 0.0],
    [0.4, 0.5, 0.1],
    [0.4, 0.5, 0.1],
    [0.3, 0.4, 0.1],
    [-0.5, -0.3, 0.2],
])
_DEVIATION = np.array([
    [0.05, 0.05, 0.05],
    [0.0, 0.0, 0.0],
    [0.15, 0.1, 0.1],
    [0.1, 0.1, 0.05],
    [0.1, 0.05, 0.05],
    [0.05, 0.0, 0.05],
])


def default_signatures(shift: Optional[np.ndarray] = None) -> np.ndarray:
    """Signature table ``(6 classes, 4 attributes, 3 channels, [mean, std])``.

    ``shift`` (6 x 3, std units) moves intensity and reflectance means of
    each class, modeling site-to-site radiometric differences.
    """
    sig = np.empty((NUM_CLASSES, len(SPECTRAL_ATTRIBUTES), NUM_CHANNELS, 2))
    bright = _BRIGHTNESS + (0 if shift is None else np.asarray(shift))
    offsets = {"intensity": bright, "reflectance": bright, "amplitude": _AMPLITUDE, "deviation": _DEVIATION}
    for a, name in enumerate(SPECTRAL_ATTRIBUTES):
        base, std = ATTRIBUTE_SCALE[name]
        sig[:, a, :, 0] = base + offsets[name] * std
        sig[:, a, :, 1] = std
    return sig


@dataclass
class SceneSpec:
    extent: tuple[float, float] = (100.0, 100.0)
    seed: int = 7
    #: target share of labeled points per class (sand, gravel, high veg,
    #: low veg, forest floor, water)
    class_fractions: tuple = (0.302, 0.118, 0.258, 0.130, 0.094, 0.098)
    signatures: np.ndarray = field(default_factory=default_signatures)
    density_factor: float = 0.02
    densities: Optional[tuple] = None  # per scanner, overrides the factor
    terrain_roughness: float = 0.3
    bank_slope: float = 0.08
    meander_amplitude: float = 12.0
    meander_wavelength: float = 80.0
    boundary_noise: float = 4.0
    patch_scale: float = 5.0
    canopy_height: tuple[float, float] = (8.0, 20.0)
    low_veg_height: tuple[float, float] = (0.2, 1.0)
    #: distribution of the number of returns for a canopy pulse
    canopy_returns: tuple[float, float, float] = (0.4, 0.4, 0.2)
    #: ground surface roughness (std of z, m) for sand and gravel
    sediment_roughness: tuple[float, float] = (0.02, 0.025)
    #: correlation of intensity and reflectance noise within a channel
    radiometric_correlation: float = 0.9
    name: str = "custom"

    def __post_init__(self):
        f = np.asarray(self.class_fractions, np.float64)
        if f.shape != (NUM_CLASSES,) or (f < 0).any():
            raise ValueError("class_fractions must be 6 non-negative values")
        if f.sum() > 1 + 1e-9:
            raise ValueError(f"infeasible layout: class fractions sum to {f.sum():.4f} > 1")
        sig = np.asarray(self.signatures, np.float64)
        if sig.shape != (NUM_CLASSES, 4, NUM_CHANNELS, 2):
            raise ValueError("signatures must have shape (6, 4, 3, 2)")
        if (sig[..., 1] < 0).any():
            raise ValueError("signature stds must be >= 0")
        self.signatures = sig
        if any(d <= 0 for d in self.scanner_densities):
            raise ValueError("point densities must be > 0")
        if min(self.extent) <= 0:
            raise ValueError("extent must be positive")
        p = np.asarray(self.canopy_returns)
        if p.shape != (3,) or (p < 0).any() or abs(p.sum() - 1) > 1e-9:
            raise ValueError("canopy_returns must be 3 probabilities summing to 1")

    @property
    def scanner_densities(self) -> tuple[float, float, float]:
        if self.densities is not None:
            return tuple(float(d) for d in self.densities)
        return tuple(self.density_factor * d for d in FULL_DENSITY)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signatures"] = np.asarray(self.signatures).tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["signatures"] = np.asarray(d["signatures"], np.float64)
        for key in ("extent", "class_fractions", "canopy_height", "low_veg_height",
                    "canopy_returns", "sediment_roughness"):
            d[key] = tuple(d[key])
        if d.get("densities") is not None:
            d["densities"] = tuple(d["densities"])
        return cls(**d)


# Site shifts (std units) of intensity/reflectance means relative to jm-like.
_NS_SHIFT = np.zeros((NUM_CLASSES, NUM_CHANNELS))
_NS_SHIFT[C.SAND] = [0.6, 0.7, 0.7]
_NS_SHIFT[C.GRAVEL] = [0.5, 0.6, 0.6]
_NS_SHIFT[C.FOREST_FLOOR] = [-0.4, -0.5, -0.3]
_HN_SHIFT = np.zeros((NUM_CLASSES, NUM_CHANNELS))
_HN_SHIFT[C.SAND] = [0.05, 0.05, 0.05]
_HN_SHIFT[C.GRAVEL] = [0.05, 0.05, 0.05]

PRESETS = {
    "ns-like": dict(class_fractions=(0.005, 0.101, 0.596, 0.053, 0.116, 0.129), shift=_NS_SHIFT),
    "hn-like": dict(class_fractions=(0.323, 0.077, 0.352, 0.033, 0.052, 0.162), shift=_HN_SHIFT),
    "jm-like": dict(class_fractions=(0.302, 0.118, 0.258, 0.130, 0.094, 0.098), shift=None),
}


def preset(name: str, **overrides) -> SceneSpec:
    """Named site preset (``ns-like``, ``hn-like``, ``jm-like``)."""
    try:
        p = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})") from None
    kw = dict(class_fractions=p["class_fractions"], signatures=default_signatures(p["shift"]), name=name)
    kw.update(overrides)
    return SceneSpec(**kw)


# --------------------------------------------------------------------------
# layout


@dataclass
class Layout:
    origin: np.ndarray
    resolution: float
    codes: np.ndarray  # (nx, ny) class code; canopy cells hold HIGH_VEGETATION
    terrain: np.ndarray  # (nx, ny) ground elevation (water surface in the channel)
    canopy_top: np.ndarray  # (nx, ny) canopy height above ground
    low_veg_top: np.ndarray  # (nx, ny)

    def cells(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = np.floor((xy - self.origin) / self.resolution).astype(np.int64)
        nx, ny = self.codes.shape
        return np.clip(g[:, 0], 0, nx - 1), np.clip(g[:, 1], 0, ny - 1)

    def terrain_surface(self) -> ClothSurface:
        # node (i, j) of the surface sits at the centre of raster cell (i, j)
        return ClothSurface(
            origin=self.origin + self.resolution / 2, resolution=self.resolution,
            heights=self.terrain, iterations=0,
        )


def _smooth_field(rng: np.random.Generator, shape, sigma_cells: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma_cells, mode="reflect")
    return (f - f.mean()) / (f.std() + 1e-12)


def area_fractions(spec: SceneSpec) -> np.ndarray:
    """Layout area share per class giving the requested point shares.

    Canopy pulses yield ``E[returns]`` points each, split between high
    vegetation and forest floor, so canopy area is divided by that factor.
    """
    f = np.asarray(spec.class_fractions, np.float64)
    f = f / f.sum()
    mean_returns = float(np.dot([1, 2, 3], spec.canopy_returns))
    area = f.copy()
    area[C.HIGH_VEGETATION] = (f[C.HIGH_VEGETATION] + f[C.FOREST_FLOOR]) / mean_returns
    area[C.FOREST_FLOOR] = 0.0
    return area / area.sum()


def floor_probability(spec: SceneSpec) -> float:
    """Chance that a canopy pulse's last return reaches the forest floor."""
    f = spec.class_fractions
    hv, ff = f[C.HIGH_VEGETATION], f[C.FOREST_FLOOR]
    if hv + ff == 0:
        return 0.0
    mean_returns = float(np.dot([1, 2, 3], spec.canopy_returns))
    return min(1.0, mean_returns * ff / (hv + ff))


def make_layout(spec: SceneSpec) -> Layout:
    rng = np.random.default_rng([spec.seed, 0])
    res = LAYOUT_RES
    nx, ny = (int(np.ceil(e / res)) for e in spec.extent)
    xs = (np.arange(nx) + 0.5) * res
    ys = (np.arange(ny) + 0.5) * res
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    phase = rng.uniform(0, 2 * np.pi)
    centre = spec.extent[1] / 2 + spec.meander_amplitude * np.sin(2 * np.pi * X / spec.meander_wavelength + phase)
    dist = np.abs(Y - centre)
    noisy = dist + spec.boundary_noise * _smooth_field(rng, (nx, ny), 6.0 / res)
    patch = _smooth_field(rng, (nx, ny), spec.patch_scale / res)
    rough = _smooth_field(rng, (nx, ny), 4.0 / res)
    canopy_f = _smooth_field(rng, (nx, ny), 3.0 / res)
    lowveg_f = _smooth_field(rng, (nx, ny), 2.0 / res)

    area = area_fractions(spec)
    order = np.argsort(noisy, axis=None, kind="stable")
    codes = np.full(nx * ny, int(C.HIGH_VEGETATION), np.uint8)
    bands = [C.WATER, None, C.LOW_VEGETATION]  # None = sediment
    counts = np.round(np.cumsum([area[C.WATER], area[C.SAND] + area[C.GRAVEL], area[C.LOW_VEGETATION]])
                      * nx * ny).astype(np.int64)
    start = 0
    for band, stop in zip(bands, counts):
        cells = order[start:stop]
        if band is None:
            sed = area[C.SAND] + area[C.GRAVEL]
            n_sand = int(round(len(cells) * (area[C.SAND] / sed))) if sed > 0 else 0
            by_patch = cells[np.argsort(patch.reshape(-1)[cells], kind="stable")]
            codes[by_patch[:n_sand]] = C.SAND
            codes[by_patch[n_sand:]] = C.GRAVEL
        else:
            codes[cells] = band
        start = stop
    codes = codes.reshape(nx, ny)

    water = codes == C.WATER
    level = 0.002 * X  # gentle downstream gradient of the water surface
    if water.any():
        edge = ndimage.distance_transform_edt(~water) * res
    else:
        edge = dist
    rise = np.minimum(spec.bank_slope * edge, 4.0)
    terrain = 100.0 + level + rise + spec.terrain_roughness * rough * np.clip(edge / 10.0, 0, 1)
    terrain = np.where(water, 100.0 + level, terrain)
    lo, hi = spec.canopy_height
    canopy_top = lo + (hi - lo) * (0.5 + 0.5 * np.tanh(canopy_f))
    vlo, vhi = spec.low_veg_height
    low_top = vlo + (vhi - vlo) * (0.5 + 0.5 * np.tanh(lowveg_f))
    return Layout(np.zeros(2), res, codes, terrain, canopy_top, low_top)


# --------------------------------------------------------------------------
# point generation


@dataclass
class GeneratedScene:
    spec: SceneSpec
    scanners: list  # PointCloud per channel
    fused: PointCloud
    layout: Layout
    ground_mask: np.ndarray  # (fused.n,) true-ground classes

    @property
    def terrain(self) -> ClothSurface:
        return self.layout.terrain_surface()


def _draw_attributes(spec: SceneSpec, labels: np.ndarray, channel: int, rng: np.random.Generator) -> dict:
    n = len(labels)
    sig = spec.signatures
    rho = spec.radiometric_correlation
    latent = rng.standard_normal(n)
    out = {}
    for a, name in enumerate(SPECTRAL_ATTRIBUTES):
        col = np.full((n, NUM_CHANNELS), SENTINEL, np.float32)
        mean = sig[labels, a, channel, 0]
        std = sig[labels, a, channel, 1]
        if name in ("intensity", "reflectance"):
            noise = rho * latent + np.sqrt(1 - rho ** 2) * rng.standard_normal(n)
        else:
            noise = rng.standard_normal(n)
        vals = mean + std * noise
        if name == "intensity":
            vals = np.maximum(vals, 0.0)
        col[:, channel] = vals
        out[name] = col
    return out


def _clipped_normal(rng: np.random.Generator, std: float, n: int) -> np.ndarray:
    return np.clip(rng.normal(0, std, n), -3 * std, 3 * std)


def _scanner_points(spec: SceneSpec, layout: Layout, channel: int, density: float) -> PointCloud:
    rng = np.random.default_rng([spec.seed, 1, channel])
    w, h = spec.extent
    n = rng.poisson(density * w * h)
    xy = rng.uniform(0, 1, (n, 2)) * [w, h]
    ci, cj = layout.cells(xy)
    code = layout.codes[ci, cj]
    ground = _bilinear(layout, xy)
    canopy = code == _CANOPY

    # non-canopy pulses: one return each
    base = ~canopy
    z = ground.copy()
    lab = code.copy()
    sand, gravel = code == C.SAND, code == C.GRAVEL
    z[sand] += _clipped_normal(rng, spec.sediment_roughness[0], sand.sum())
    z[gravel] += _clipped_normal(rng, spec.sediment_roughness[1], gravel.sum())
    water = code == C.WATER
    z[water] += _clipped_normal(rng, 0.005, water.sum())
    lv = code == C.LOW_VEGETATION
    z[lv] += rng.uniform(0.05, 1.0, lv.sum()) * layout.low_veg_top[ci[lv], cj[lv]]
    xyz_parts = [np.column_stack([xy[base], z[base]])]
    lab_parts = [lab[base]]
    rn_parts = [np.ones(base.sum(), np.uint8)]
    nr_parts = [np.ones(base.sum(), np.uint8)]

    # canopy pulses: 1-3 returns, the last one possibly on the forest floor
    cidx = np.flatnonzero(canopy)
    nret = rng.choice([1, 2, 3], size=len(cidx), p=spec.canopy_returns).astype(np.uint8)
    floor = rng.random(len(cidx)) < floor_probability(spec)
    top = layout.canopy_top[ci[cidx], cj[cidx]]
    depth = np.sort(rng.uniform(0, 0.6, (len(cidx), 3)), axis=1)
    for r in range(3):
        has = nret > r
        on_floor = has & floor & (nret == r + 1)
        zz = ground[cidx] + top * (1 - depth[:, r]) - np.abs(rng.normal(0, 0.2, len(cidx)))
        zz = np.maximum(zz, ground[cidx] + 2.0)
        zz[on_floor] = ground[cidx][on_floor] + _clipped_normal(rng, 0.02, on_floor.sum())
        sel = has
        xyz_parts.append(np.column_stack([xy[cidx][sel], zz[sel]]))
        lab_r = np.where(on_floor, C.FOREST_FLOOR, C.HIGH_VEGETATION).astype(np.uint8)
        lab_parts.append(lab_r[sel])
        rn_parts.append(np.full(sel.sum(), r + 1, np.uint8))
        nr_parts.append(nret[sel])
    xyz = np.concatenate(xyz_parts)
    labels = np.concatenate(lab_parts)
    rn = np.concatenate(rn_parts)
    nr = np.concatenate(nr_parts)
    # canonical order: sort by position so output does not depend on pulse grouping
    order = np.lexsort((rn, xyz[:, 2], xyz[:, 1], xyz[:, 0]))
    xyz, labels, rn, nr = xyz[order], labels[order], rn[order], nr[order]
    attrs = _draw_attributes(spec, labels, channel, np.random.default_rng([spec.seed, 2, channel]))
    return PointCloud(
        xyz=xyz, return_number=rn, number_of_returns=nr, label=labels,
        channel_presence=np.full(len(xyz), 1 << channel, np.uint8), **attrs,
    )


def _bilinear(layout: Layout, xy: np.ndarray) -> np.ndarray:
    return layout.terrain_surface().height_at(xy)


def generate(spec: SceneSpec, fusion: FusionConfig = FusionConfig()) -> GeneratedScene:
    """Per-scanner clouds, the fused labeled cloud and the true terrain.

    Deterministic for a given spec (including its seed).
    """
    layout = make_layout(spec)
    scanners = [
        _scanner_points(spec, layout, c, d) for c, d in enumerate(spec.scanner_densities)
    ]
    fused = fuse(scanners, fusion)
    ground_mask = np.isin(fused.label, [int(c) for c in GROUND_CLASSES])
    return GeneratedScene(spec, scanners, fused, layout, ground_mask)


# --------------------------------------------------------------------------
# signature analysis


def bhattacharyya(mu1, s1, mu2, s2) -> np.ndarray:
    """Bhattacharyya distance between 1-D normals (elementwise)."""
    v1, v2 = np.square(s1), np.square(s2)
    vs = v1 + v2
    with np.errstate(divide="ignore", invalid="ignore"):
        term_mean = np.where(vs > 0, np.square(np.subtract(mu1, mu2)) / (4 * vs), 0.0)
        term_var = np.where(
            (v1 > 0) & (v2 > 0), 0.5 * np.log(vs / (2 * np.sqrt(v1 * v2))), 0.0
        )
    return term_mean + term_var


def separability_terms(spec: SceneSpec) -> np.ndarray:
    """Per-feature distances ``(6, 6, 4 attributes, 3 channels)``."""
    sig = np.asarray(spec.signatures)
    mu, sd = sig[..., 0], sig[..., 1]
    return bhattacharyya(mu[:, None], sd[:, None], mu[None, :], sd[None, :])


def spectral_separability(spec: SceneSpec) -> np.ndarray:
    """Pairwise class distances: Bhattacharyya per spectral feature, summed."""
    return separability_terms(spec).sum(axis=(2, 3))
