"""Desk-scale Point Transformer v2 style segmentation network.

Architecture (``stages = S``, widths ``w_s = base_width * 2**s``)::

    embed -> block(w_0) -> [pool -> block(w_s)] for s = 1..S-1
          -> [unpool + skip -> block(w_{s-1})] for s = S-1..1 -> head

Each block is pre-norm: grouped vector attention over the k nearest
neighbours, then a two-layer feed-forward net, both with per-channel
layer scaling on the residual branch. Pooling partitions points into
voxels of ``base_grid * 2**(s-1)`` and takes the max of the projected
member features; unpooling copies each coarse feature back to its members.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .core import NUM_CLASSES
from .features import NormStats
from .spatial import KdTree


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    stages: int = 3
    base_width: int = 32
    attention_groups: int = 4
    neighbors_k: int = 8
    base_grid: float = 0.10
    num_classes: int = NUM_CLASSES
    seed: int = 42

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.attention_groups < 1 or self.base_width % self.attention_groups:
            raise ValueError(
                f"base_width {self.base_width} not divisible by attention_groups {self.attention_groups}"
            )
        if self.neighbors_k < 1:
            raise ValueError("neighbors_k must be >= 1")
        if not self.base_grid > 0:
            raise ValueError("base_grid must be > 0")

    def width(self, stage: int) -> int:
        return self.base_width * 2 ** stage

    def grid(self, stage: int) -> float:
        """Voxel size used to pool from ``stage - 1`` into ``stage``."""
        return self.base_grid * 2 ** (stage - 1)


def block_shapes(prefix: str, c: int, groups: int) -> list[tuple[str, tuple]]:
    return [
        (f"{prefix}.ln1.g", (c,)), (f"{prefix}.ln1.b", (c,)),
        (f"{prefix}.attn.q.w", (c, c)), (f"{prefix}.attn.q.b", (c,)),
        (f"{prefix}.attn.k.w", (c, c)), (f"{prefix}.attn.k.b", (c,)),
        (f"{prefix}.attn.v.w", (c, c)), (f"{prefix}.attn.v.b", (c,)),
        (f"{prefix}.attn.pe1.w", (3, c)), (f"{prefix}.attn.pe1.b", (c,)),
        (f"{prefix}.attn.pe2.w", (c, c)), (f"{prefix}.attn.pe2.b", (c,)),
        (f"{prefix}.attn.we1.w", (c, groups)), (f"{prefix}.attn.we1.b", (groups,)),
        (f"{prefix}.attn.we2.w", (groups, groups)), (f"{prefix}.attn.we2.b", (groups,)),
        (f"{prefix}.ls1", (c,)),
        (f"{prefix}.ln2.g", (c,)), (f"{prefix}.ln2.b", (c,)),
        (f"{prefix}.ffn1.w", (c, 2 * c)), (f"{prefix}.ffn1.b", (2 * c,)),
        (f"{prefix}.ffn2.w", (2 * c, c)), (f"{prefix}.ffn2.b", (c,)),
        (f"{prefix}.ls2", (c,)),
    ]


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple]]:
    """Parameter names and shapes in declaration (checkpoint) order."""
    g = config.attention_groups
    c0 = config.width(0)
    shapes = [
        ("embed.w", (config.input_dim, c0)), ("embed.b", (c0,)),
        ("embed.ln.g", (c0,)), ("embed.ln.b", (c0,)),
    ]
    shapes += block_shapes("enc0", c0, g)
    for s in range(1, config.stages):
        shapes += [(f"down{s}.w", (config.width(s - 1), config.width(s))), (f"down{s}.b", (config.width(s),))]
        shapes += block_shapes(f"enc{s}", config.width(s), g)
    for s in range(config.stages - 1, 0, -1):
        cf, cc = config.width(s - 1), config.width(s)
        shapes += [
            (f"up{s}.proj.w", (cc, cf)), (f"up{s}.proj.b", (cf,)),
            (f"up{s}.skip.w", (cf, cf)), (f"up{s}.skip.b", (cf,)),
        ]
        shapes += block_shapes(f"dec{s - 1}", cf, g)
    shapes += [
        ("head.ln.g", (c0,)), ("head.ln.b", (c0,)),
        ("head.fc1.w", (c0, c0)), ("head.fc1.b", (c0,)),
        ("head.fc2.w", (c0, config.num_classes)), ("head.fc2.b", (config.num_classes,)),
    ]
    return shapes


class SegModel:
    """Parameter container plus the metadata needed to run inference."""

    def __init__(
        self,
        config: ModelConfig,
        params: "OrderedDict[str, np.ndarray]",
        norm_stats: Optional[NormStats] = None,
        meta: Optional[dict] = None,
    ):
        self.config = config
        self.params = params
        self.norm_stats = norm_stats
        self.meta = dict(meta or {})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "SegModel":
        params = OrderedDict((k, v.astype(dtype)) for k, v in self.params.items())
        return SegModel(self.config, params, self.norm_stats, self.meta)

    def copy(self) -> "SegModel":
        params = OrderedDict((k, v.copy()) for k, v in self.params.items())
        return SegModel(self.config, params, self.norm_stats, dict(self.meta))


def build_model(config: ModelConfig, dtype=np.float32) -> SegModel:
    """Deterministic initialization from ``config.seed``.

    Weights are uniform in ``+-sqrt(3 / fan_in)``; biases and layer-norm
    shifts are zero, layer-norm gains and layer scales are one.
    """
    rng = np.random.default_rng(config.seed)
    params = OrderedDict()
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "w":
            bound = np.sqrt(3.0 / shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif leaf in ("g",) or name.endswith(("ls1", "ls2")):
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    return SegModel(config, params)


# --------------------------------------------------------------------------
# neighbourhoods and pooling structure (non-differentiable)


def knn_neighbors(positions: np.ndarray, k: int, batch: Optional[np.ndarray] = None) -> np.ndarray:
    """(n, k) neighbour indices (self included) computed within each batch item.

    Items with fewer than ``k`` points pad their lists with the query index.
    """
    positions = np.asarray(positions, np.float64)
    n = len(positions)
    out = np.empty((n, k), np.int64)
    if batch is None:
        groups = [np.arange(n)]
    else:
        order = np.argsort(batch, kind="stable")
        cuts = np.flatnonzero(np.diff(batch[order])) + 1
        groups = np.split(order, cuts)
    for members in groups:
        if not len(members):
            continue
        tree = KdTree(positions[members])
        m = min(k, len(members))
        idx, _ = tree.knn_batch(positions[members], m)
        local = members[idx]
        if m < k:
            local = np.concatenate([local, np.repeat(members[:, None], k - m, axis=1)], axis=1)
        out[members] = local
    return out


@dataclass
class PoolMap:
    parent: np.ndarray  # (n_fine,) index of the coarse point holding each fine point
    positions: np.ndarray  # (n_coarse, 3) member centroids
    batch: Optional[np.ndarray]  # (n_coarse,)


def grid_partition(positions: np.ndarray, cell: float, batch: Optional[np.ndarray] = None) -> PoolMap:
    """Voxel partition anchored at each batch item's minimum corner."""
    if not cell > 0:
        raise ValueError("pooling cell must be > 0")
    positions = np.asarray(positions, np.float64)
    n = len(positions)
    b = np.zeros(n, np.int64) if batch is None else np.asarray(batch, np.int64)
    mins = np.full((b.max() + 1 if n else 1, 3), np.inf)
    np.minimum.at(mins, b, positions)
    keys = np.floor((positions - mins[b]) / cell).astype(np.int64)
    full = np.column_stack([b, keys])
    uniq, parent = np.unique(full, axis=0, return_inverse=True)
    parent = parent.reshape(-1)
    # canonical summation order: by cell, then by coordinates
    order = np.lexsort((positions[:, 2], positions[:, 1], positions[:, 0], parent))
    starts = np.flatnonzero(np.r_[True, parent[order][1:] != parent[order][:-1]])
    sums = np.add.reduceat(positions[order], starts, axis=0)
    counts = np.diff(np.r_[starts, n])
    centroids = sums / counts[:, None]
    return PoolMap(parent, centroids, None if batch is None else uniq[:, 0].copy())


# --------------------------------------------------------------------------
# differentiable layers (operate on Vars)


def _p(params: dict, name: str) -> Var:
    return params[name]


def _mlp2(x: Var, params: dict, a: str, b: str) -> Var:
    h = ad.relu(ad.linear(x, params[f"{a}.w"], params[f"{a}.b"]))
    return ad.linear(h, params[f"{b}.w"], params[f"{b}.b"])


def gva(
    x: Var,
    positions: np.ndarray,
    neighbors: np.ndarray,
    params: dict,
    prefix: str,
    groups: int,
    residual: Optional[Var] = None,
    scale: Optional[Var] = None,
) -> Var:
    """Grouped vector attention with relative position encoding.

    For point i and neighbour j: relation ``q_i - k_j + pe(p_j - p_i)``;
    one softmax weight per channel group from a two-layer MLP of the
    relation; output ``sum_j w_ij * (v_j + pe(p_j - p_i))`` added to
    ``residual`` (defaults to ``x``).
    """
    a = f"{prefix}.attn"
    q = ad.linear(x, params[f"{a}.q.w"], params[f"{a}.q.b"])
    k = ad.linear(x, params[f"{a}.k.w"], params[f"{a}.k.b"])
    v = ad.linear(x, params[f"{a}.v.w"], params[f"{a}.v.b"])
    rel = (positions[neighbors] - positions[:, None, :]).astype(x.data.dtype)
    pe = _mlp2(ad.const(rel), params, f"{a}.pe1", f"{a}.pe2")
    relation = ad.add(ad.sub(_expand_neighbors(q), ad.gather(k, neighbors)), pe)
    logits = _mlp2(relation, params, f"{a}.we1", f"{a}.we2")
    w = ad.softmax(logits, axis=1)
    vals = ad.add(ad.gather(v, neighbors), pe)
    out = ad.group_weighted_sum(w, vals)
    if scale is not None:
        out = ad.mul(out, scale)
    return ad.add(x if residual is None else residual, out)


def _expand_neighbors(x: Var) -> Var:
    # (n, C) -> (n, 1, C); broadcasting against (n, k, C) sums the gradient back
    return ad._emit(x.data[:, None, :], (x,), lambda g: (g.sum(axis=1),))


def block(x: Var, positions, neighbors, params: dict, prefix: str, groups: int) -> Var:
    h = ad.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = gva(h, positions, neighbors, params, prefix, groups, residual=x, scale=params[f"{prefix}.ls1"])
    h = ad.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = _mlp2(h, params, f"{prefix}.ffn1", f"{prefix}.ffn2")
    return ad.add(x, ad.mul(h, params[f"{prefix}.ls2"]))


def pool(x: Var, pmap: PoolMap, params: dict, prefix: str) -> Var:
    h = ad.linear(x, params[f"{prefix}.w"], params[f"{prefix}.b"])
    return ad.segment_max(h, pmap.parent, len(pmap.positions))


def unpool(coarse: Var, skip: Var, parent: np.ndarray, params: dict, prefix: str) -> Var:
    if len(parent) != skip.data.shape[0]:
        raise ValueError(f"parent map has {len(parent)} entries, skip has {skip.data.shape[0]} rows")
    if len(parent) and parent.max() >= coarse.data.shape[0]:
        raise ValueError("parent map refers past the coarse point count")
    up = ad.gather(ad.linear(coarse, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"]), parent)
    return ad.add(up, ad.linear(skip, params[f"{prefix}.skip.w"], params[f"{prefix}.skip.b"]))


def _check(x: Var, layer: str) -> Var:
    if not np.isfinite(x.data).all():
        raise FloatingPointError(f"non-finite activations after layer {layer!r}")
    return x


@dataclass
class Hierarchy:
    """Neighbour lists and pooling maps for every level of one input."""

    positions: list
    neighbors: list
    pools: list  # pools[s-1] maps level s-1 -> s


def build_hierarchy(config: ModelConfig, positions: np.ndarray, batch: Optional[np.ndarray] = None) -> Hierarchy:
    pos = np.asarray(positions, np.float64)
    b = None if batch is None else np.asarray(batch, np.int64)
    levels, nbrs, pools = [pos], [knn_neighbors(pos, config.neighbors_k, b)], []
    for s in range(1, config.stages):
        pm = grid_partition(levels[-1], config.grid(s), b)
        pools.append(pm)
        b = pm.batch
        levels.append(pm.positions)
        nbrs.append(knn_neighbors(pm.positions, config.neighbors_k, b))
    return Hierarchy(levels, nbrs, pools)


def forward_vars(model: SegModel, features: Var, hier: Hierarchy, params: dict) -> Var:
    cfg = model.config
    g = cfg.attention_groups
    x = _check(ad.linear(features, params["embed.w"], params["embed.b"]), "embed")
    x = ad.relu(ad.layer_norm(x, params["embed.ln.g"], params["embed.ln.b"]))
    x = _check(block(x, hier.positions[0], hier.neighbors[0], params, "enc0", g), "enc0")
    skips = [x]
    for s in range(1, cfg.stages):
        x = _check(pool(x, hier.pools[s - 1], params, f"down{s}"), f"down{s}")
        x = _check(block(x, hier.positions[s], hier.neighbors[s], params, f"enc{s}", g), f"enc{s}")
        skips.append(x)
    for s in range(cfg.stages - 1, 0, -1):
        x = unpool(x, skips[s - 1], hier.pools[s - 1].parent, params, f"up{s}")
        x = _check(block(x, hier.positions[s - 1], hier.neighbors[s - 1], params, f"dec{s - 1}", g), f"dec{s - 1}")
    h = ad.layer_norm(x, params["head.ln.g"], params["head.ln.b"])
    h = ad.relu(ad.linear(h, params["head.fc1.w"], params["head.fc1.b"]))
    return _check(ad.linear(h, params["head.fc2.w"], params["head.fc2.b"]), "head")


class ForwardPass:
    """Recorded forward pass; :meth:`backward` returns parameter gradients."""

    def __init__(self, tape: Tape, logits: Var, leaves: dict, feature_leaf: Var):
        self.tape = tape
        self.logits = logits
        self.leaves = leaves
        self.feature_leaf = feature_leaf

    def backward(self, dlogits: np.ndarray) -> "OrderedDict[str, np.ndarray]":
        self.tape.backward(self.logits, dlogits)
        grads = OrderedDict()
        for name, leaf in self.leaves.items():
            g = leaf.grad
            grads[name] = np.zeros_like(leaf.data) if g is None else g
        return grads


def forward(
    model: SegModel,
    features: np.ndarray,
    positions: np.ndarray,
    batch: Optional[np.ndarray] = None,
    *,
    train: bool = False,
    hierarchy: Optional[Hierarchy] = None,
):
    """Per-point class logits ``(n, num_classes)``.

    With ``train=True`` returns ``(logits, ForwardPass)``.
    """
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError("forward needs at least one point")
    if features.shape[1] != model.config.input_dim:
        raise ValueError(f"expected {model.config.input_dim} input features, got {features.shape[1]}")
    dtype = model.dtype
    hier = hierarchy or build_hierarchy(model.config, positions, batch)
    if train:
        tape = Tape()
        leaves = OrderedDict((k, tape.leaf(v, k)) for k, v in model.params.items())
        feat = tape.leaf(features.astype(dtype), "features")
        logits = forward_vars(model, feat, hier, leaves)
        return logits.data, ForwardPass(tape, logits, leaves, feat)
    params = {k: Var(v) for k, v in model.params.items()}
    return forward_vars(model, Var(features.astype(dtype)), hier, params).data


def predict_labels(model: SegModel, features, positions, batch=None) -> np.ndarray:
    return forward(model, features, positions, batch).argmax(axis=1).astype(np.uint8)


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MSCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: SegModel) -> bytes:
    """Serialize config, normalization stats, metadata and float32 parameters."""
    header = {
        "config": asdict(model.config),
        "norm_stats": model.norm_stats.to_dict() if model.norm_stats is not None else None,
        "meta": model.meta,
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(blob)))
    buf.write(blob)
    for v in model.params.values():
        buf.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return buf.getvalue()


def load_checkpoint(data: bytes) -> SegModel:
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    if len(data) < 12 + hlen:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(data[12:12 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    config = ModelConfig(**header["config"])
    expected = [(k, tuple(s)) for k, s in header["params"]]
    if expected != parameter_shapes(config):
        raise CheckpointError("checkpoint parameter layout does not match its config")
    offset = 12 + hlen
    params = OrderedDict()
    for name, shape in expected:
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointError(f"checkpoint truncated in parameter {name!r}")
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after parameters")
    stats = NormStats.from_dict(header["norm_stats"]) if header["norm_stats"] else None
    return SegModel(config, params, stats, header.get("meta") or {})


def gradient_check(
    model: SegModel,
    features: np.ndarray,
    positions: np.ndarray,
    batch: Optional[np.ndarray] = None,
    eps: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> dict:
    """Per-tensor relative error between backprop and central differences.

    The scalar probed is ``sum(logits * R)`` for a fixed random ``R``.
    Backprop runs in the model's own dtype; the finite-difference reference
    always runs on a float64 copy. With ``max_entries`` only that many
    randomly chosen entries per tensor are compared. Errors are floored at
    ``1e-4`` of the largest tensor gradient norm so that tensors whose true
    gradient vanishes (e.g. biases a softmax is invariant to) do not report
    pure rounding noise.

    Probe a jittered model rather than a freshly built one: at
    initialization the positional-encoding biases are zero and every
    point's offset to itself is zero, so those pre-activations sit exactly
    on the ReLU kink where central differences average the two one-sided
    slopes.
    """
    rng = np.random.default_rng(seed)
    hier = build_hierarchy(model.config, positions, batch)
    logits, fp = forward(model, features, positions, train=True, hierarchy=hier)
    probe = rng.standard_normal(logits.shape)
    grads = fp.backward(probe.astype(model.dtype))
    ref = model.astype(np.float64)
    feats64 = np.asarray(features, np.float64)

    def loss():
        return float((forward(ref, feats64, positions, hierarchy=hier) * probe).sum())

    pairs = {}
    for name, p in ref.params.items():
        idx = None
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, max_entries, replace=False))
        num = ad.numeric_gradient(loss, p, eps, idx).reshape(-1)
        ana = grads[name].reshape(-1).astype(np.float64)
        if idx is not None:
            num, ana = num[idx], ana[idx]
        pairs[name] = (ana, num)
    floor = 1e-4 * max(np.linalg.norm(a) for a, _ in pairs.values())
    return {name: ad.relative_error(a, n, floor) for name, (a, n) in pairs.items()}
