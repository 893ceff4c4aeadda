import json

import numpy as np
import pytest

from mspc import __version__
from mspc.cli import main, read_config
from mspc.core import read_cloud

TRAIN_FLAGS = ["--epochs", "1", "--batch", "2", "--max-points", "128", "--stages", "2",
               "--width", "8", "--base-grid", "0.5", "--tile-size", "10"]


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert main(["synth", "--extent", "20", "--seed", "3", "--out-dir", str(d)]) == 0
    return d


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.strip() == __version__


def test_synth_outputs_and_manifest(scene_dir):
    names = sorted(p.name for p in scene_dir.iterdir())
    assert names == ["fused.mspc", "manifest.json", "scanner1.mspc", "scanner2.mspc",
                     "scanner3.mspc", "scene.json"]
    m = json.loads((scene_dir / "manifest.json").read_text())
    assert m["subcommand"] == "synth" and m["seed"] == 3
    assert set(m["outputs"]) == {str(scene_dir / n) for n in names if n != "manifest.json"}
    assert json.loads((scene_dir / "scene.json").read_text())["name"] == "jm-like"


def test_fuse_reproduces_synth_fusion(scene_dir, tmp_path, capsys):
    out = tmp_path / "f.mspc"
    inputs = ",".join(str(scene_dir / f"scanner{c}.mspc") for c in (1, 2, 3))
    assert main(["fuse", "--inputs", inputs, "--out", str(out)]) == 0
    assert read_cloud(out).equals(read_cloud(scene_dir / "fused.mspc"))
    assert json.loads(capsys.readouterr().out)["points"] == read_cloud(out).n
    assert (tmp_path / "f.mspc.manifest.json").is_file()


def test_preprocess(scene_dir, tmp_path, capsys):
    out, ground = tmp_path / "p.mspc", tmp_path / "g.npy"
    rc = main(["preprocess", "--in", str(scene_dir / "fused.mspc"), "--out", str(out),
               "--ground-out", str(ground), "--report", str(tmp_path / "r.json")])
    assert rc == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["output_points"] == read_cloud(out).n == len(np.load(ground))


def test_train_eval_predict(scene_dir, tmp_path, capsys):
    fused = str(scene_dir / "fused.mspc")
    ckpt = tmp_path / "m.ckpt"
    rc = main(["train", "--train", fused, "--val", fused, "--channels", "ch1", "--out", str(ckpt),
               "--history", str(tmp_path / "h.jsonl"), *TRAIN_FLAGS])
    assert rc == 0
    lines = (tmp_path / "h.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["epoch"] == 0
    capsys.readouterr()
    rc = main(["eval", "--ckpt", str(ckpt), "--test", fused, "--out", str(tmp_path / "e.json"),
               "--matrix-csv", str(tmp_path / "cm.csv")])
    assert rc == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics == json.loads((tmp_path / "e.json").read_text())
    assert json.loads(lines[0])["val_miou"] == metrics["miou"]
    assert (tmp_path / "cm.csv").read_text().startswith("actual\\predicted,sand")
    rc = main(["predict", "--ckpt", str(ckpt), "--in", fused, "--out", str(tmp_path / "pred.mspc")])
    assert rc == 0
    assert sum(json.loads(capsys.readouterr().out)["predicted_counts"]) == read_cloud(fused).n


def test_baseline_rf(scene_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)  # no --out: the manifest lands in the working directory
    fused = str(scene_dir / "fused.mspc")
    rc = main(["baseline-rf", "--train", fused, "--test", fused, "--trees", "5", "--max-samples", "2000"])
    assert rc == 0
    assert json.loads(capsys.readouterr().out)["miou"] > 0.5
    assert (tmp_path / "mspc-baseline-rf.manifest.json").exists()


def test_ablate(scene_dir, tmp_path, capsys):
    fused = str(scene_dir / "fused.mspc")
    rc = main(["ablate", "--train", fused, "--val", fused, "--channels", "xyz,ch1",
               "--out", str(tmp_path / "a.json"), *TRAIN_FLAGS])
    assert rc == 0
    table = json.loads(capsys.readouterr().out)["table"]
    assert sorted(table) == ["ch1", "xyz"]
    assert set(table["xyz"]) == {"miou", "macc", "mprecision", "iou"}


def test_config_file_supplies_flags(scene_dir, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# fusion run\ninputs = {','.join(str(scene_dir / f'scanner{c}.mspc') for c in (1, 2, 3))}\n"
                   f"out = {tmp_path / 'cfg.mspc'}\nradius = 0.3\n")
    assert main(["fuse", "--config", str(cfg)]) == 0
    m = json.loads((tmp_path / "cfg.mspc.manifest.json").read_text())
    assert m["config"]["radius"] == 0.3
    assert read_config(str(cfg))["radius"] == "0.3"


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus = 1\n")
    assert main(["fuse", "--config", str(cfg)]) == 1
    assert "unknown config key 'bogus'" in capsys.readouterr().err


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["fuse", "--inputs", "a,b", "--out", "x"]) == 1
    assert main(["eval", "--ckpt", str(tmp_path / "none"), "--test", "x"]) == 2
    bad = tmp_path / "bad.mspc"
    bad.write_bytes(b"MSPC\x09\x00\x00\x00" + b"\0" * 12)
    assert main(["preprocess", "--in", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "unsupported version" in capsys.readouterr().err
    assert main(["synth", "--preset", "zz", "--out-dir", str(tmp_path)]) == 1


def test_corrupt_checkpoint_exit_code(scene_dir, tmp_path, capsys):
    ck = tmp_path / "c.ckpt"
    ck.write_bytes(b"MSCK" + b"\0" * 20)
    assert main(["predict", "--ckpt", str(ck), "--in", str(scene_dir / "fused.mspc"),
                 "--out", str(tmp_path / "o")]) == 2
