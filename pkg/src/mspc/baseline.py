"""Random-forest baseline over per-point spectral and eigenvalue features.

Trees are grown by scikit-learn (bootstrap samples, Gini splits, a random
feature subset per split); prediction is a hard majority vote over the
individual trees with ties going to the lowest class index.
"""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from sklearn.ensemble import RandomForestClassifier

from .core import NUM_CLASSES, UNLABELED, PointCloud
from .features import ChannelSetConfig, NormStats, eigen_features

log = logging.getLogger(__name__)

EIGEN_K = 10


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 500
    max_depth: Optional[int] = 20
    min_samples_leaf: int = 1
    features_per_split: Union[int, str, None] = "sqrt"
    #: bootstrap sample size per tree (None = as many as training points)
    max_samples: Optional[int] = None
    seed: int = 42

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")


@dataclass
class Forest:
    trees: list  # fitted sklearn DecisionTreeClassifier objects
    classes: np.ndarray  # class code of each tree output index
    n_features: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("MSPC_THREADS", "1")))
    except ValueError:
        return 1


def rf_train(features: np.ndarray, labels: np.ndarray, config: ForestConfig = ForestConfig()) -> Forest:
    """Fit a forest; points labeled Unlabeled are ignored."""
    x = np.asarray(features, np.float32)
    y = np.asarray(labels).reshape(-1)
    keep = y != UNLABELED
    x, y = x[keep], y[keep].astype(np.int64)
    if len(y) < 2:
        raise ValueError("random forest needs at least 2 labeled points")
    if len(np.unique(y)) < 2:
        warnings.warn("single-class training data: every tree is a single leaf", RuntimeWarning)
    max_samples = None
    if config.max_samples is not None and config.max_samples < len(y):
        max_samples = int(config.max_samples)
    rf = RandomForestClassifier(
        n_estimators=config.n_trees,
        criterion="gini",
        max_depth=config.max_depth,
        min_samples_leaf=config.min_samples_leaf,
        max_features=config.features_per_split,
        bootstrap=True,
        max_samples=max_samples,
        random_state=config.seed,
        n_jobs=_workers(),
    )
    rf.fit(x, y)
    return Forest(trees=list(rf.estimators_), classes=rf.classes_.astype(np.int64), n_features=x.shape[1])


def rf_votes(forest: Forest, features: np.ndarray) -> np.ndarray:
    """(n, 6) vote counts, one vote per tree."""
    x = np.asarray(features, np.float32)
    if x.ndim != 2 or x.shape[1] != forest.n_features:
        raise ValueError(f"forest expects {forest.n_features} features, got {x.shape[-1]}")
    votes = np.zeros((len(x), NUM_CLASSES), np.int64)
    rows = np.arange(len(x))
    for tree in forest.trees:
        cls = forest.classes[tree.predict(x).astype(np.int64)]
        np.add.at(votes, (rows, cls), 1)
    return votes


def rf_predict(forest: Forest, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Majority-vote labels (ties -> lowest class) and per-class vote fractions."""
    votes = rf_votes(forest, features)
    labels = votes.argmax(axis=1).astype(np.uint8)
    return labels, votes / forest.n_trees


def baseline_features(
    cloud: PointCloud,
    stats: NormStats,
    surface=None,
    tile_size: float = 10.0,
    k: int = EIGEN_K,
) -> np.ndarray:
    """AllFeatures columns (tile-relative xy, height, 14 z-scored) plus
    linearity, planarity, sphericity and surface variation: ``(n, 21)``."""
    from .train import prepare, tile_partition

    prep = prepare(cloud, ChannelSetConfig.ALL_FEATURES, stats, surface)
    feats = prep.features.astype(np.float64)
    for idx, centre in tile_partition(cloud.xyz, tile_size):
        feats[idx, :2] -= centre - prep.origin
    return np.hstack([feats, eigen_features(cloud, k)]).astype(np.float32)
