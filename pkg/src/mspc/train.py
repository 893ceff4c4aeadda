"""Training stack: tiling, augmentation, weighted cross-entropy, AdamW with
cosine annealing, a two-dataset mini-batch sampler and the shared
tiled-inference path used for validation and prediction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .core import NUM_CLASSES, UNLABELED, LandCoverClass, PointCloud, histogram_array
from .evaluation import ConfusionMatrix, confusion, mean_iou
from .features import ChannelSetConfig, NormStats, assemble, compute_norm_stats
from .model import ModelConfig, SegModel, build_model, forward, save_checkpoint
from .preprocess import ClothSurface, CsfParams, simulate_cloth

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.001
    lr_min: float = 1e-5
    weight_decay: float = 0.075
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    tile_size: float = 10.0
    max_points_per_tile: int = 4096
    scale_range: tuple[float, float] = (0.8, 1.2)
    translate_range: float = 0.2
    dataset_mix: Optional[float] = None  # fraction of each batch from the first dataset
    val_every: int = 1
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.tile_size > 0 or self.max_points_per_tile < 1:
            raise ValueError("tile_size must be > 0 and max_points_per_tile >= 1")
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValueError("scale_range must satisfy 0 < low <= high")
        if self.translate_range < 0:
            raise ValueError("translate_range must be >= 0")
        if self.dataset_mix is not None and not 0 <= self.dataset_mix <= 1:
            raise ValueError("dataset_mix must lie in [0, 1]")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")


class TrainingDiverged(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# tiles


@dataclass
class Tile:
    indices: np.ndarray  # into the source cloud
    dataset: int
    features: np.ndarray  # (m, dim) float32, xy relative to ``center``
    positions: np.ndarray  # (m, 3) float64
    labels: np.ndarray  # (m,) uint8
    center: np.ndarray  # (2,) tile-cell centre

    @property
    def n(self) -> int:
        return len(self.indices)


def tile_partition(xyz: np.ndarray, tile_size: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split points into an xy grid anchored at the bounding-box minimum.

    Returns ``(indices, cell_centre)`` for each occupied cell in row-major
    cell order. The grid has ``ceil(extent / tile_size)`` cells per axis; a
    point exactly on the far edge falls in the last cell.
    """
    if len(xyz) == 0:
        return []
    lo = xyz[:, :2].min(axis=0)
    hi = xyz[:, :2].max(axis=0)
    counts = np.maximum(np.ceil((hi - lo) / tile_size).astype(np.int64), 1)
    cell = np.floor((xyz[:, :2] - lo) / tile_size).astype(np.int64)
    cell = np.minimum(cell, counts - 1)
    key = cell[:, 0] * counts[1] + cell[:, 1]
    order = np.argsort(key, kind="stable")
    uniq, starts = np.unique(key[order], return_index=True)
    out = []
    for u, idx in zip(uniq, np.split(order, starts[1:])):
        cx, cy = divmod(int(u), int(counts[1]))
        centre = lo + (np.array([cx, cy]) + 0.5) * tile_size
        out.append((idx, centre))
    return out


def tile_grid_shape(xyz: np.ndarray, tile_size: float) -> tuple[int, int]:
    lo = xyz[:, :2].min(axis=0)
    hi = xyz[:, :2].max(axis=0)
    c = np.maximum(np.ceil((hi - lo) / tile_size).astype(np.int64), 1)
    return int(c[0]), int(c[1])


@dataclass
class PreparedCloud:
    """A cloud with its model-input matrix precomputed."""

    cloud: PointCloud
    features: np.ndarray  # (n, dim) float32, xy relative to ``origin``
    origin: np.ndarray  # (2,)
    channels: ChannelSetConfig


def prepare(
    cloud: PointCloud,
    channels: ChannelSetConfig,
    stats: Optional[NormStats],
    surface: Optional[ClothSurface] = None,
    csf: CsfParams = CsfParams(),
) -> PreparedCloud:
    if cloud.n == 0:
        raise ValueError("cannot prepare an empty cloud")
    check_channels(cloud, channels)
    if surface is None and cloud.n >= 3:
        surface = simulate_cloth(cloud, csf)
    lo, hi = cloud.bbox
    origin = np.round((lo[:2] + hi[:2]) / 2)
    feats = assemble(cloud, channels, stats, surface=surface, center=origin)
    return PreparedCloud(cloud, feats, origin, channels)


def check_channels(cloud: PointCloud, channels: ChannelSetConfig) -> None:
    have = int(np.bitwise_or.reduce(cloud.channel_presence)) if cloud.n else 0
    missing = [c + 1 for c in range(3) if channels.required_channels >> c & 1 and not have >> c & 1]
    if missing:
        raise ValueError(
            f"channel set {channels.value!r} needs scanner channel(s) {missing}, absent from the cloud"
        )


def _tile_from(prep: PreparedCloud, idx: np.ndarray, centre: np.ndarray, dataset: int) -> Tile:
    feats = prep.features[idx].copy()
    feats[:, :2] -= (centre - prep.origin).astype(np.float32)
    return Tile(
        indices=idx,
        dataset=dataset,
        features=feats,
        positions=prep.cloud.xyz[idx],
        labels=prep.cloud.label[idx],
        center=centre,
    )


def make_tiles(
    cloud,
    config: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    dataset: int = 0,
) -> list[Tile]:
    """Training tiles: xy grid cells, randomly subsampled to at most
    ``max_points_per_tile`` points; tiles without labeled points are dropped.

    ``cloud`` is a :class:`PreparedCloud` or a bare :class:`PointCloud` (then
    the tiles carry xyz-only features).
    """
    prep = cloud if isinstance(cloud, PreparedCloud) else prepare(cloud, ChannelSetConfig.XYZ, None)
    if prep.cloud.n == 0:
        raise ValueError("cannot tile an empty cloud")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    tiles = []
    for idx, centre in tile_partition(prep.cloud.xyz, config.tile_size):
        if len(idx) > config.max_points_per_tile:
            idx = np.sort(rng.choice(idx, config.max_points_per_tile, replace=False))
        if not (prep.cloud.label[idx] != UNLABELED).any():
            continue
        tiles.append(_tile_from(prep, idx, centre, dataset))
    return tiles


def inference_chunks(cloud_or_prep, tile_size: float, max_points: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic cover of every point: grid tiles split into interleaved
    chunks of at most ``max_points`` so each chunk spans its whole tile at
    roughly the training density."""
    xyz = cloud_or_prep.cloud.xyz if isinstance(cloud_or_prep, PreparedCloud) else cloud_or_prep.xyz
    out = []
    for idx, centre in tile_partition(xyz, tile_size):
        m = math.ceil(len(idx) / max_points)
        if m == 1:
            out.append((idx, centre))
            continue
        perm = np.random.default_rng(len(idx)).permutation(len(idx))
        for part in np.array_split(perm, m):
            out.append((idx[np.sort(part)], centre))
    return out


# --------------------------------------------------------------------------
# loss, weights, augmentation


@dataclass(frozen=True)
class ClassWeights:
    weights: np.ndarray  # (6,)

    def __post_init__(self):
        w = np.asarray(self.weights, np.float64)
        if w.shape != (NUM_CLASSES,) or not np.isfinite(w).all() or (w <= 0).any():
            raise ValueError("class weights must be 6 finite positive values")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls) -> "ClassWeights":
        return cls(np.ones(NUM_CLASSES))


def compute_class_weights(histograms) -> ClassWeights:
    """Inverse-frequency weights ``N / (6 * N_c)`` over the union of histograms.

    Histograms are length-6 count arrays, class->count dicts, or clouds.
    """
    total = np.zeros(NUM_CLASSES, np.int64)
    for h in histograms:
        if isinstance(h, PointCloud):
            h = histogram_array(h)
        elif isinstance(h, dict):
            h = [h.get(LandCoverClass(c), h.get(c, 0)) for c in range(NUM_CLASSES)]
        total += np.asarray(h, np.int64)
    zero = [LandCoverClass(c).display_name for c in np.flatnonzero(total == 0)]
    if zero:
        raise ValueError(f"no training points for class(es): {', '.join(zero)}")
    return ClassWeights(total.sum() / (NUM_CLASSES * total.astype(np.float64)))


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray, weights: ClassWeights):
    """Weight-normalized cross-entropy over labeled points and its logit gradient.

    ``loss = sum_i w[y_i] * -log softmax(z_i)[y_i] / sum_i w[y_i]``; points with
    the Unlabeled code contribute neither loss nor gradient.
    """
    labels = np.asarray(labels)
    keep = labels != UNLABELED
    if not keep.any():
        raise ValueError("weighted cross-entropy needs at least one labeled point")
    z = np.asarray(logits, np.float64)[keep]
    y = labels[keep].astype(np.int64)
    shift = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - logsum
    w = weights.weights[y]
    wsum = w.sum()
    loss = float(-(w * logp[np.arange(len(y)), y]).sum() / wsum)
    g = np.exp(logp)
    g[np.arange(len(y)), y] -= 1.0
    g *= (w / wsum)[:, None]
    grad = np.zeros(np.shape(logits), np.float64)
    grad[keep] = g
    return loss, grad.astype(np.asarray(logits).dtype)


@dataclass
class Augmentation:
    scale: float
    translation: np.ndarray  # (3,)


def draw_augmentation(config: TrainConfig, rng: np.random.Generator) -> Augmentation:
    s = rng.uniform(*config.scale_range)
    t = rng.uniform(-config.translate_range, config.translate_range, size=3)
    return Augmentation(float(s), t)


def augment(tile: Tile, config: TrainConfig, rng: np.random.Generator, aug: Optional[Augmentation] = None) -> Tile:
    """Random similarity transform of a tile (copy).

    Positions are scaled about the tile centroid by ``s`` and shifted by
    ``t``; the geometric input columns (relative xy, height) follow the same
    map. Spectral columns and labels are untouched.
    """
    aug = aug or draw_augmentation(config, rng)
    s, t = aug.scale, aug.translation
    c = tile.positions.mean(axis=0)
    # written as p * s + offset so that s = 1, t = 0 is exactly the identity
    pos = tile.positions * s + (c * (1.0 - s) + t)
    feats = tile.features.copy()
    rel_c = (c[:2] - tile.center).astype(np.float64)
    feats[:, :2] = (tile.features[:, :2] * s + (rel_c * (1.0 - s) + t[:2])).astype(np.float32)
    feats[:, 2] = (tile.features[:, 2] * s + t[2]).astype(np.float32)
    return replace(tile, features=feats, positions=pos)


# --------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, grads: dict, state: AdamState, lr_t: float, config: TrainConfig) -> None:
    """In-place AdamW: ``p -= lr_t * (m_hat / (sqrt(v_hat) + eps) + wd * p)``."""
    b1, b2 = config.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_eps) + config.weight_decay * p
        p -= (lr_t * update).astype(p.dtype)


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside 0..{config.epochs - 1}")
    if config.epochs == 1:
        return config.lr
    frac = epoch / (config.epochs - 1)
    return config.lr_min + 0.5 * (config.lr - config.lr_min) * (1 + math.cos(math.pi * frac))


# --------------------------------------------------------------------------
# sampler


def dataset_quotas(sizes: Sequence[int], config: TrainConfig) -> list[int]:
    if len(sizes) == 1:
        if sizes[0] == 0:
            raise ValueError("training dataset has no tiles")
        return [config.batch_size]
    if len(sizes) != 2:
        raise ValueError("the sampler mixes one or two datasets")
    mix = 0.5 if config.dataset_mix is None else config.dataset_mix
    qa = math.ceil(mix * config.batch_size)
    quotas = [qa, config.batch_size - qa]
    for d, (q, n) in enumerate(zip(quotas, sizes)):
        if q < 1:
            raise ValueError(f"mix {mix} with batch {config.batch_size} leaves dataset {d} no tiles per batch")
        if n == 0:
            raise ValueError(f"dataset {d} has no tiles but the mix requires {q} per batch")
    return quotas


def multi_dataset_batches(
    tiles: Sequence[Sequence], config: TrainConfig, rng: np.random.Generator
) -> Iterator[list]:
    """One epoch of batches drawing a fixed quota from each dataset.

    Each dataset is walked in a fresh random order without replacement; the
    epoch ends when the dataset needing the most batches is exhausted, and
    datasets that run out earlier are reshuffled and recycled.
    """
    sizes = [len(t) for t in tiles]
    quotas = dataset_quotas(sizes, config)
    n_batches = max(1, max(n // q for n, q in zip(sizes, quotas)))
    streams = []
    for n, q in zip(sizes, quotas):
        need = n_batches * q
        reps = math.ceil(need / n)
        streams.append(np.concatenate([rng.permutation(n) for _ in range(reps)])[:need])
    for b in range(n_batches):
        batch = []
        for d, q in enumerate(quotas):
            batch.extend(tiles[d][i] for i in streams[d][b * q:(b + 1) * q])
        yield batch


def collate(tiles: Sequence[Tile]):
    feats = np.concatenate([t.features for t in tiles])
    pos = np.concatenate([t.positions for t in tiles])
    labels = np.concatenate([t.labels for t in tiles])
    batch = np.repeat(np.arange(len(tiles)), [t.n for t in tiles])
    return feats, pos, labels, batch


# --------------------------------------------------------------------------
# inference


def predict_prepared(
    model: SegModel, prep: PreparedCloud, tile_size: float, max_points: int, batch_points: int = 16384
) -> np.ndarray:
    """Predicted class per point of a prepared cloud (uint8)."""
    chunks = inference_chunks(prep, tile_size, max_points)
    pred = np.empty(prep.cloud.n, np.uint8)
    group: list[Tile] = []
    count = 0

    def flush():
        feats, pos, _, batch = collate(group)
        logits = forward(model, feats, pos, batch)
        pred[np.concatenate([t.indices for t in group])] = logits.argmax(axis=1)

    for idx, centre in chunks:
        tile = _tile_from(prep, idx, centre, 0)
        if group and count + tile.n > batch_points:
            flush()
            group, count = [], 0
        group.append(tile)
        count += tile.n
    if group:
        flush()
    return pred


def model_channels(model: SegModel) -> ChannelSetConfig:
    return ChannelSetConfig.parse(model.meta.get("channels", "all"))


def predict_cloud(model: SegModel, cloud: PointCloud, surface: Optional[ClothSurface] = None) -> PointCloud:
    """Label every point of ``cloud`` with ``model`` (same tiling as validation)."""
    channels = model_channels(model)
    prep = prepare(cloud, channels, model.norm_stats, surface)
    pred = predict_prepared(
        model, prep, model.meta.get("tile_size", 10.0), model.meta.get("max_points_per_tile", 4096)
    )
    return cloud.with_labels(pred)


def evaluate_prepared(model: SegModel, prep: PreparedCloud, tile_size: float, max_points: int) -> ConfusionMatrix:
    pred = predict_prepared(model, prep, tile_size, max_points)
    return confusion(pred, prep.cloud.label)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: SegModel  # best-validation (or final) parameters
    history: list[dict]
    best_epoch: int
    best_val_miou: Optional[float]


def train(
    datasets: Sequence[PointCloud],
    channels: ChannelSetConfig,
    train_config: TrainConfig = TrainConfig(),
    model_config: Optional[ModelConfig] = None,
    val: Optional[PointCloud] = None,
    checkpoint: Optional[Path] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    surfaces: Optional[Sequence[Optional[ClothSurface]]] = None,
    val_surface: Optional[ClothSurface] = None,
) -> TrainResult:
    """Train a segmentation model on one or two labeled clouds.

    Normalization statistics and class weights come from the training
    clouds. With ``val`` given, validation mIoU is computed every
    ``val_every`` epochs (and at the last one) and the best parameters are
    kept and optionally written to ``checkpoint``.
    """
    if not datasets:
        raise ValueError("at least one training dataset is required")
    cfg = train_config
    for cloud in datasets:
        check_channels(cloud, channels)
    stats = compute_norm_stats(datasets) if channels.feature_indices else None
    surfaces = list(surfaces) if surfaces is not None else [None] * len(datasets)
    preps = [prepare(c, channels, stats, s) for c, s in zip(datasets, surfaces)]
    val_prep = prepare(val, channels, stats, val_surface) if val is not None else None
    weights = compute_class_weights([histogram_array(c) for c in datasets])

    mcfg = model_config or ModelConfig(input_dim=channels.dim, seed=cfg.seed)
    if mcfg.input_dim != channels.dim:
        raise ValueError(f"model input_dim {mcfg.input_dim} does not match channel set dim {channels.dim}")
    model = build_model(mcfg)
    model.norm_stats = stats
    model.meta.update(
        channels=channels.value, tile_size=cfg.tile_size, max_points_per_tile=cfg.max_points_per_tile
    )
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)

    history: list[dict] = []
    best = (-1.0, -1, None)
    for epoch in range(cfg.epochs):
        lr_t = cosine_lr(epoch, cfg)
        tiles = [make_tiles(p, cfg, rng, dataset=d) for d, p in enumerate(preps)]
        losses = []
        for b, batch in enumerate(multi_dataset_batches(tiles, cfg, rng)):
            batch = [augment(t, cfg, rng) for t in batch]
            feats, pos, labels, bids = collate(batch)
            try:
                logits, fp = forward(model, feats, pos, bids, train=True)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}") from None
            loss, dlogits = weighted_cross_entropy(logits, labels, weights)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch} batch {b}: loss is {loss}")
            grads = fp.backward(dlogits)
            adamw_step(model.params, grads, state, lr_t, cfg)
            losses.append(loss)
        entry = {"epoch": epoch, "lr": lr_t, "loss": float(np.mean(losses)), "batches": len(losses)}
        last = epoch == cfg.epochs - 1
        if val_prep is not None and ((epoch + 1) % cfg.val_every == 0 or last):
            cm = evaluate_prepared(model, val_prep, cfg.tile_size, cfg.max_points_per_tile)
            entry["val_miou"] = mean_iou(cm)
            if entry["val_miou"] > best[0]:
                best = (entry["val_miou"], epoch, model.copy())
                if checkpoint is not None:
                    Path(checkpoint).write_bytes(save_checkpoint(best[2]))
        history.append(entry)
        log.info("epoch %d loss %.4f%s", epoch, entry["loss"],
                 f" val mIoU {entry['val_miou']:.4f}" if "val_miou" in entry else "")
        if on_epoch is not None:
            on_epoch(entry)
    if best[2] is None:
        best = (None, cfg.epochs - 1, model)
        if checkpoint is not None:
            Path(checkpoint).write_bytes(save_checkpoint(model))
    return TrainResult(model=best[2], history=history, best_epoch=best[1], best_val_miou=best[0])
