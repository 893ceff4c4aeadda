"""Reusable experiment runners: reference scene split, PTv2 and random-forest
runs, channel ablation tables and the two-dataset comparison."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .baseline import ForestConfig, baseline_features, rf_predict, rf_train
from .core import PointCloud
from .evaluation import MetricsReport, confusion, report
from .features import ChannelSetConfig, compute_norm_stats
from .model import ModelConfig
from .synth import GeneratedScene, generate, preset
from .train import TrainConfig, evaluate_prepared, prepare, train


@dataclass(frozen=True)
class ExperimentSettings:
    """Desk-scale run settings shared by the ablation and comparison runs."""

    epochs: int = 20
    batch_size: int = 16
    tile_size: float = 10.0
    max_points_per_tile: int = 512
    base_grid: float = 0.5
    val_every: int = 5
    train_fraction: float = 0.7
    rf_trees: int = 500
    rf_max_depth: int = 20
    rf_max_samples: Optional[int] = 20000

    def train_config(self, seed: int, dataset_mix: Optional[float] = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            tile_size=self.tile_size,
            max_points_per_tile=self.max_points_per_tile,
            val_every=self.val_every,
            dataset_mix=dataset_mix,
            seed=seed,
        )

    def model_config(self, channels: ChannelSetConfig, seed: int) -> ModelConfig:
        return ModelConfig(input_dim=channels.dim, base_grid=self.base_grid, seed=seed)

    def forest_config(self, seed: int) -> ForestConfig:
        return ForestConfig(
            n_trees=self.rf_trees, max_depth=self.rf_max_depth, max_samples=self.rf_max_samples, seed=seed
        )


def reference_scene(preset_name: str = "jm-like", seed: int = 7, extent: float = 100.0) -> GeneratedScene:
    return generate(preset(preset_name, seed=seed, extent=(extent, extent)))


def split_along_x(cloud: PointCloud, fraction: float) -> tuple[PointCloud, PointCloud]:
    """Spatial hold-out: points with x below the ``fraction`` quantile of the
    x extent train, the rest validate."""
    lo, hi = cloud.bbox
    cut = lo[0] + fraction * (hi[0] - lo[0])
    left = cloud.xyz[:, 0] < cut
    return cloud.subset(np.flatnonzero(left)), cloud.subset(np.flatnonzero(~left))


@dataclass
class RunReport:
    name: str
    seed: int
    metrics: MetricsReport
    history: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    seconds: float = 0.0

    @property
    def miou(self) -> float:
        return self.metrics.miou

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "metrics": self.metrics.to_dict(),
            "history": self.history,
            "best_epoch": self.best_epoch,
            "seconds": self.seconds,
        }


def run_ptv2(
    train_clouds: Sequence[PointCloud],
    eval_cloud: PointCloud,
    channels: ChannelSetConfig,
    settings: ExperimentSettings,
    seed: int,
    validate: bool = True,
    name: Optional[str] = None,
) -> RunReport:
    """Train on ``train_clouds`` and score the selected model on ``eval_cloud``.

    With ``validate`` the evaluation cloud doubles as the validation set used
    to pick the best epoch; otherwise the final parameters are scored.
    """
    t0 = time.perf_counter()
    mix = 0.5 if len(train_clouds) == 2 else None
    result = train(
        list(train_clouds),
        channels,
        settings.train_config(seed, mix),
        settings.model_config(channels, seed),
        val=eval_cloud if validate else None,
    )
    prep = prepare(eval_cloud, channels, result.model.norm_stats)
    cm = evaluate_prepared(result.model, prep, settings.tile_size, settings.max_points_per_tile)
    return RunReport(
        name=name or channels.value,
        seed=seed,
        metrics=report(cm),
        history=result.history,
        best_epoch=result.best_epoch,
        seconds=time.perf_counter() - t0,
    )


def run_rf(train_cloud: PointCloud, eval_cloud: PointCloud, settings: ExperimentSettings, seed: int) -> RunReport:
    t0 = time.perf_counter()
    stats = compute_norm_stats([train_cloud])
    x_train = baseline_features(train_cloud, stats, tile_size=settings.tile_size)
    forest = rf_train(x_train, train_cloud.label, settings.forest_config(seed))
    x_eval = baseline_features(eval_cloud, stats, tile_size=settings.tile_size)
    pred, _ = rf_predict(forest, x_eval)
    return RunReport(
        name="rf", seed=seed, metrics=report(confusion(pred, eval_cloud.label)),
        seconds=time.perf_counter() - t0,
    )


def ablation_table(reports: dict) -> dict:
    """Rows keyed by run name: mIoU, mAcc, mPrecision and per-class IoU.

    A pure function of the individual metric reports.
    """
    table = {}
    for key, rep in reports.items():
        m = rep.metrics if isinstance(rep, RunReport) else rep
        table[key] = {"miou": m.miou, "macc": m.macc, "mprecision": m.mprecision, "iou": list(m.iou)}
    return table


def render_table(table: dict) -> str:
    names = ["Sand", "Gravel", "HighVeg", "LowVeg", "ForestFl", "Water"]
    head = f"{'config':<14}" + "".join(f"{n:>9}" for n in names) + f"{'mIoU':>8}"
    lines = [head]
    for key, row in table.items():
        cells = "".join(f"{'-' if v is None else f'{v:.3f}':>9}" for v in row["iou"])
        lines.append(f"{key:<14}{cells}{row['miou']:>8.3f}")
    return "\n".join(lines)


def settings_dict(settings: ExperimentSettings) -> dict:
    return asdict(settings)
