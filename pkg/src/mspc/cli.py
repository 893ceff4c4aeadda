"""``mspc`` command-line entry point.

Exit codes: 0 success, 1 usage or invalid input, 2 I/O or format error,
3 numeric failure (non-finite values, divergence).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import CloudFormatError, read_cloud, write_cloud
from .evaluation import confusion, matrix_csv, report
from .features import ChannelSetConfig, compute_norm_stats
from .fuse import FusionConfig, fuse, fusion_completeness
from .model import CheckpointError, ModelConfig, load_checkpoint
from .preprocess import CsfParams, SorParams, preprocess

log = logging.getLogger("mspc")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# manifests and config files


@dataclass
class RunManifest:
    subcommand: str
    argv: list
    config: dict
    inputs: dict  # path -> sha256
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    seed: Optional[int] = None
    wall_clock_seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def read_config(path: str) -> dict:
    """``key = value`` lines (``#`` comments); keys use flag names."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    out = {}
    for key, value in parser["run"].items():
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        out[key.replace("-", "_")] = value
    return out


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _split_paths(text: str) -> list[str]:
    return [p for p in (s.strip() for s in text.split(",")) if p]


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args, ctx) -> dict:
    from .synth import generate, preset

    kw = {"seed": args.seed, "density_factor": args.density_factor}
    if args.extent is not None:
        kw["extent"] = (args.extent, args.extent)
    spec = preset(args.preset, **kw)
    scene = generate(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".mspc" if args.format == "binary" else ".txt"
    paths = []
    for c, cloud in enumerate(scene.scanners):
        p = out / f"scanner{c + 1}{ext}"
        write_cloud(cloud, p, args.format)
        paths.append(p)
    fused = out / f"fused{ext}"
    write_cloud(scene.fused, fused, args.format)
    (out / "scene.json").write_text(spec.to_json())
    ctx["outputs"] = [*paths, fused, out / "scene.json"]
    ctx["manifest_dir"] = out
    return {
        "preset": args.preset,
        "seed": args.seed,
        "points": {"scanners": [c.n for c in scene.scanners], "fused": scene.fused.n},
        "files": [str(p) for p in ctx["outputs"]],
    }


def cmd_preprocess(args, ctx) -> dict:
    cloud = read_cloud(args.input)
    ctx["inputs"] = [args.input]
    sor = SorParams(k=args.sor_k, multiplier=args.sor_multiplier)
    csf = CsfParams(
        cloth_resolution=args.csf_resolution, distance_threshold=args.csf_threshold,
        time_step=args.csf_time_step, rigidness=args.csf_rigidness, max_iterations=args.csf_iterations,
    )
    kept, ground, rep = preprocess(cloud, cell=args.cell, sor=sor, csf=csf)
    write_cloud(kept, args.out, args.format)
    ctx["outputs"] = [args.out]
    result = rep.to_dict()
    if args.ground_out:
        np.save(args.ground_out, ground)
        ctx["outputs"].append(args.ground_out)
    if args.report:
        _write_json(args.report, result)
        ctx["outputs"].append(args.report)
    return result


def cmd_fuse(args, ctx) -> dict:
    paths = _split_paths(args.inputs)
    if len(paths) != 3:
        raise UsageError(f"--inputs needs three comma-separated scanner files, got {len(paths)}")
    clouds = [read_cloud(p) for p in paths]
    ctx["inputs"] = paths
    fused = fuse(clouds, FusionConfig(radius=args.radius))
    write_cloud(fused, args.out, args.format)
    ctx["outputs"] = [args.out]
    return {"points": fused.n, "completeness": fusion_completeness(fused)}


def _train_settings(args):
    from .train import TrainConfig

    tcfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr, weight_decay=args.wd,
        tile_size=args.tile_size, max_points_per_tile=args.max_points, dataset_mix=args.mix,
        val_every=args.val_every, seed=args.seed,
    )
    return tcfg


def _model_config(args, channels) -> ModelConfig:
    return ModelConfig(
        input_dim=channels.dim, stages=args.stages, base_width=args.width, neighbors_k=args.k,
        base_grid=args.base_grid, seed=args.seed,
    )


def cmd_train(args, ctx) -> dict:
    from .train import train

    paths = _split_paths(args.train)
    if not 1 <= len(paths) <= 2:
        raise UsageError("--train takes one or two comma-separated files")
    clouds = [read_cloud(p) for p in paths]
    val = read_cloud(args.val) if args.val else None
    ctx["inputs"] = paths + ([args.val] if args.val else [])
    channels = ChannelSetConfig.parse(args.channels)
    history_file = open(args.history, "w") if args.history else None

    def on_epoch(entry):
        line = json.dumps(entry, sort_keys=True)
        if history_file:
            history_file.write(line + "\n")
            history_file.flush()
        else:
            sys.stdout.write(line + "\n")

    try:
        result = train(
            clouds, channels, _train_settings(args), _model_config(args, channels),
            val=val, checkpoint=Path(args.out), on_epoch=on_epoch,
        )
    finally:
        if history_file:
            history_file.close()
    ctx["outputs"] = [args.out] + ([args.history] if args.history else [])
    summary = {"best_epoch": result.best_epoch, "best_val_miou": result.best_val_miou, "checkpoint": args.out}
    if args.history:
        return summary
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return None


def _load_model(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return load_checkpoint(data)


def cmd_eval(args, ctx) -> dict:
    from .train import evaluate_prepared, model_channels, prepare

    model = _load_model(args.ckpt)
    cloud = read_cloud(args.test)
    ctx["inputs"] = [args.ckpt, args.test]
    prep = prepare(cloud, model_channels(model), model.norm_stats)
    cm = evaluate_prepared(
        model, prep, model.meta.get("tile_size", 10.0), model.meta.get("max_points_per_tile", 4096)
    )
    return _finish_report(cm, args, ctx)


def _finish_report(cm, args, ctx) -> dict:
    rep = report(cm)
    out = rep.to_dict()
    ctx.setdefault("outputs", [])
    if args.out:
        _write_json(args.out, out)
        ctx["outputs"].append(args.out)
    if args.matrix_csv:
        Path(args.matrix_csv).write_text(matrix_csv(rep.confusion_normalized, "{:.6f}"))
        ctx["outputs"].append(args.matrix_csv)
    if args.text:
        sys.stderr.write(rep.render() + "\n")
    return out


def cmd_ablate(args, ctx) -> dict:
    from .experiments import ablation_table, render_table
    from .train import evaluate_prepared, prepare, train

    paths = _split_paths(args.train)
    clouds = [read_cloud(p) for p in paths]
    val = read_cloud(args.val)
    ctx["inputs"] = paths + [args.val]
    configs = [ChannelSetConfig.parse(c) for c in _split_paths(args.channels)]
    if not configs:
        raise UsageError("--channels lists no channel sets")
    runs = {}
    for channels in configs:
        result = train(clouds, channels, _train_settings(args), _model_config(args, channels), val=val)
        prep = prepare(val, channels, result.model.norm_stats)
        runs[channels.value] = report(
            evaluate_prepared(result.model, prep, args.tile_size, args.max_points)
        )
        log.info("%s: mIoU %.4f", channels.value, runs[channels.value].miou)
    table = ablation_table(runs)
    if args.out:
        _write_json(args.out, {"table": table, "runs": {k: r.to_dict() for k, r in runs.items()}})
        ctx["outputs"] = [args.out]
    if args.text:
        sys.stderr.write(render_table(table) + "\n")
    return {"table": table}


def cmd_baseline_rf(args, ctx) -> dict:
    from .baseline import ForestConfig, baseline_features, rf_predict, rf_train

    train_cloud = read_cloud(args.train)
    test_cloud = read_cloud(args.test)
    ctx["inputs"] = [args.train, args.test]
    stats = compute_norm_stats([train_cloud])
    cfg = ForestConfig(
        n_trees=args.trees, max_depth=args.max_depth, max_samples=args.max_samples, seed=args.seed
    )
    forest = rf_train(baseline_features(train_cloud, stats, tile_size=args.tile_size), train_cloud.label, cfg)
    pred, _ = rf_predict(forest, baseline_features(test_cloud, stats, tile_size=args.tile_size))
    return _finish_report(confusion(pred, test_cloud.label), args, ctx)


def cmd_predict(args, ctx) -> dict:
    from .train import predict_cloud

    model = _load_model(args.ckpt)
    cloud = read_cloud(args.input)
    ctx["inputs"] = [args.ckpt, args.input]
    labeled = predict_cloud(model, cloud)
    write_cloud(labeled, args.out, args.format)
    ctx["outputs"] = [args.out]
    counts = np.bincount(labeled.label, minlength=6)[:6]
    return {"points": labeled.n, "predicted_counts": counts.tolist()}


# --------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--config", help="key=value file with defaults for this subcommand's flags")
    p.add_argument("--manifest", help="where to write the run manifest")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train_flags(p):
    p.add_argument("--channels", default="all")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--wd", type=float, default=0.075)
    p.add_argument("--mix", type=float, default=None)
    p.add_argument("--tile-size", type=float, default=10.0)
    p.add_argument("--max-points", type=int, default=4096)
    p.add_argument("--val-every", type=int, default=1)
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--base-grid", type=float, default=0.10)


def _add_report_flags(p):
    p.add_argument("--out", help="metrics JSON file")
    p.add_argument("--matrix-csv", help="row-normalized confusion matrix CSV")
    p.add_argument("--text", action="store_true", help="also print a table to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mspc", description="Multispectral LiDAR land-cover pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic riverine scene")
    _add_common(p)
    p.set_defaults(seed=7)
    p.add_argument("--preset", default="jm-like", choices=["ns-like", "hn-like", "jm-like"])
    p.add_argument("--extent", type=float, default=None, help="square side length in meters")
    p.add_argument("--density-factor", type=float, default=0.02)
    p.add_argument("--format", default="binary", choices=["binary", "text"])
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="downsample, outlier removal and ground segmentation")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cell", type=float, default=0.02)
    p.add_argument("--sor-k", type=int, default=10)
    p.add_argument("--sor-multiplier", type=float, default=10.0)
    p.add_argument("--csf-resolution", type=float, default=1.0)
    p.add_argument("--csf-threshold", type=float, default=1.5)
    p.add_argument("--csf-time-step", type=float, default=0.65)
    p.add_argument("--csf-rigidness", type=int, default=1)
    p.add_argument("--csf-iterations", type=int, default=500)
    p.add_argument("--ground-out", help="write the ground mask as .npy")
    p.add_argument("--report", help="write the preprocessing report JSON")
    p.add_argument("--format", default="binary", choices=["binary", "text"])
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fuse", help="merge three scanner clouds")
    _add_common(p)
    p.add_argument("--inputs", required=True, help="scanner1,scanner2,scanner3")
    p.add_argument("--radius", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="binary", choices=["binary", "text"])
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", help="train a segmentation model")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--train", required=True, help="one or two comma-separated training files")
    p.add_argument("--val")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="write per-epoch history as JSON lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled cloud")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    _add_report_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate several channel sets")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(channels="xyz,ch1,ch12,ch123,all")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out")
    p.add_argument("--text", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("baseline-rf", help="random-forest baseline")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--trees", type=int, default=500)
    p.add_argument("--max-depth", type=int, default=20)
    p.add_argument("--max-samples", type=int, default=None)
    p.add_argument("--tile-size", type=float, default=10.0)
    _add_report_flags(p)
    p.set_defaults(func=cmd_baseline_rf)

    p = sub.add_parser("predict", help="label a cloud with a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="binary", choices=["binary", "text"])
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_lenient(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        sys.stderr.write(f"mspc: error: {exc}\n")
        return EXIT_USAGE
    except OSError as exc:
        sys.stderr.write(f"mspc: error: {exc}\n")
        return EXIT_IO
    if args.command is None:
        parser.print_usage(sys.stderr)
        sys.stderr.write("mspc: error: a subcommand is required\n")
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    ctx: dict = {"inputs": [], "outputs": []}
    t0 = time.perf_counter()
    try:
        result = args.func(args, ctx)
    except UsageError as exc:
        sys.stderr.write(f"mspc {args.command}: error: {exc}\n")
        return EXIT_USAGE
    except (CloudFormatError, CheckpointError, OSError) as exc:
        sys.stderr.write(f"mspc {args.command}: error: {exc}\n")
        return EXIT_IO
    except FloatingPointError as exc:
        sys.stderr.write(f"mspc {args.command}: numeric error: {exc}\n")
        return EXIT_NUMERIC
    except ValueError as exc:
        sys.stderr.write(f"mspc {args.command}: error: {exc}\n")
        return EXIT_USAGE
    elapsed = time.perf_counter() - t0
    if result is not None:
        _emit(result)
    config = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    manifest = RunManifest(
        subcommand=args.command,
        argv=argv,
        config=config,
        inputs={str(p): sha256_file(p) for p in ctx["inputs"]},
        outputs={str(p): sha256_file(p) for p in ctx["outputs"] if Path(p).is_file()},
        seed=getattr(args, "seed", None),
        wall_clock_seconds=elapsed,
    )
    try:
        Path(_manifest_path(args, ctx)).write_text(manifest.to_json() + "\n")
    except OSError as exc:
        sys.stderr.write(f"mspc {args.command}: cannot write manifest: {exc}\n")
        return EXIT_IO
    return 0


def _manifest_path(args, ctx) -> str:
    if args.manifest:
        return args.manifest
    if "manifest_dir" in ctx:
        return str(Path(ctx["manifest_dir"]) / "manifest.json")
    out = getattr(args, "out", None)
    if out:
        return f"{out}.manifest.json"
    return f"mspc-{args.command}.manifest.json"


def _apply_config_lenient(parser, argv):
    """Load ``--config`` (if any) before enforcing required flags."""
    if "--config" not in argv and not any(a.startswith("--config=") for a in argv):
        return parser.parse_args(argv)
    # locate the subcommand and config path without full validation
    command = next((a for a in argv if not a.startswith("-") and a in _SUBCOMMANDS), None)
    cfg_path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            cfg_path = argv[i + 1]
        elif a.startswith("--config="):
            cfg_path = a.split("=", 1)[1]
    if command is None or cfg_path is None:
        return parser.parse_args(argv)
    values = read_config(cfg_path)
    subparser = parser._subparsers._group_actions[0].choices[command]
    known = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in values.items():
        action = known.get(key)
        if action is None or key in ("help", "config", "manifest"):
            raise UsageError(f"unknown config key {key!r} for '{command}'")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except ValueError:
                raise UsageError(f"config key {key!r}: invalid value {raw!r}") from None
        else:
            if action.choices is not None and raw not in action.choices:
                raise UsageError(f"config key {key!r}: {raw!r} not in {list(action.choices)}")
            defaults[key] = raw
        action.required = False
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


_SUBCOMMANDS = ("synth", "preprocess", "fuse", "train", "eval", "ablate", "baseline-rf", "predict")


if __name__ == "__main__":
    sys.exit(main())
