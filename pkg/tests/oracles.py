"""Brute-force reference implementations the package is checked against."""

from __future__ import annotations

import numpy as np

from mspc.core import NUM_CHANNELS, SENTINEL, SPECTRAL_ATTRIBUTES


def pairwise_distances(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """(q, n) Euclidean distances computed the same way as the tree code."""
    diff = points[None, :, :] - queries[:, None, :]
    return np.sqrt((diff * diff).sum(axis=2))


def brute_knn(points: np.ndarray, query: np.ndarray, k: int) -> list[int]:
    d = pairwise_distances(points, query.reshape(1, 3))[0]
    order = np.lexsort((np.arange(len(points)), d))
    return order[:k].tolist()


def brute_radius(points: np.ndarray, query: np.ndarray, radius: float) -> list[int]:
    d = pairwise_distances(points, query.reshape(1, 3))[0]
    hit = np.flatnonzero(d <= radius)
    return hit[np.lexsort((hit, d[hit]))].tolist()


def brute_nearest_within(points: np.ndarray, query: np.ndarray, radius: float) -> int:
    hits = brute_radius(points, query, radius)
    return hits[0] if hits else -1


def brute_fuse(clouds, radius: float) -> dict:
    """Fused attribute columns built point by point."""
    out = {name: [] for name in SPECTRAL_ATTRIBUTES}
    out["presence"] = []
    out["xyz"] = []
    for own, cloud in enumerate(clouds):
        for i in range(cloud.n):
            q = cloud.xyz[i]
            row = {name: [SENTINEL] * NUM_CHANNELS for name in SPECTRAL_ATTRIBUTES}
            bits = 1 << own
            for name in SPECTRAL_ATTRIBUTES:
                row[name][own] = getattr(cloud, name)[i, own]
            for other in range(NUM_CHANNELS):
                if other == own:
                    continue
                j = brute_nearest_within(clouds[other].xyz, q, radius)
                if j < 0:
                    continue
                bits |= 1 << other
                for name in SPECTRAL_ATTRIBUTES:
                    row[name][other] = getattr(clouds[other], name)[j, other]
            for name in SPECTRAL_ATTRIBUTES:
                out[name].append(row[name])
            out["presence"].append(bits)
            out["xyz"].append(q)
    return {k: np.asarray(v, np.float32 if k in SPECTRAL_ATTRIBUTES else None) for k, v in out.items()}


def formula_metrics(counts: np.ndarray) -> dict:
    """Per-class IoU, accuracy and precision from explicit loops over the
    confusion matrix (rows actual, columns predicted); None when undefined."""
    n = counts.shape[0]
    iou, acc, prec = [], [], []
    for c in range(n):
        tp = int(counts[c, c])
        fp = int(sum(counts[r, c] for r in range(n) if r != c))
        fn = int(sum(counts[c, p] for p in range(n) if p != c))
        iou.append(tp / (tp + fp + fn) if tp + fp + fn else None)
        acc.append(tp / (tp + fn) if tp + fn else None)
        prec.append(tp / (tp + fp) if tp + fp else None)

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return sum(vals) / len(vals) if vals else float("nan")

    return {"iou": iou, "accuracy": acc, "precision": prec,
            "miou": mean(iou), "macc": mean(acc), "mprecision": mean(prec)}


def central_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``f()`` with respect to every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
