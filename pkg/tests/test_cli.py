import csv
import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from emlnet.cli import main
from emlnet.dataio import load_map_image, save_image
from emlnet.metrics import MetricReport
from emlnet.pipeline import ModelCheckpoint

SMALL = ["--set", "input_w=32", "--set", "input_h=24"]
TINY_BACKBONE = ["--set", "channels=4,8,8", "--set", "convs_per_stage=1"]


def tree_digest(root, skip=()):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A small synthetic set, two encoders and a decoder, all made through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--count", "8", "--size", "32x24", "--seed", "3"]) == 0
    assert main(["synth", "--out", str(root / "val"), "--count", "4", "--size", "32x24", "--seed", "4"]) == 0
    cfg = root / "enc.cfg"
    cfg.write_text("# tiny encoder\nepochs = 2\nlearning_rate = 1e-3\nschedule = none\nbatch_size = 4\n")
    for name, extra in (("encA", TINY_BACKBONE), ("encB", ["--set", "channels=2,4,6", "--set", "convs_per_stage=1"])):
        argv = ["train-encoder", str(root / "data"), "--out", str(root / name), "--config", str(cfg)]
        assert main(argv + SMALL + extra + ["--val", str(root / "val")]) == 0
    argv = ["train-decoder", str(root / "data"), "--out", str(root / "dec"), "--epochs", "2"] + SMALL
    argv += ["--encoder", str(root / "encA" / "encoder.emlk"), "--encoder", str(root / "encB" / "encoder.emlk")]
    assert main(argv) == 0
    return root


def test_synth_manifest(work):
    doc = json.loads((work / "data" / "manifest.json").read_text())
    assert len(doc["entries"]) == 8
    run = json.loads((work / "data" / "run.json").read_text())
    assert run["config"]["count"] == 8 and run["seed"] == 3


def test_synth_same_seed_same_tree(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--count", "3", "--seed", "9"]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_config_precedence(work):
    run = json.loads((work / "encA" / "run.json").read_text())
    cfg = run["config"]
    # config file gave epochs and rate, --set gave sizes and channels
    assert cfg["epochs"] == 2 and cfg["learning_rate"] == 1e-3
    assert cfg["input_w"] == 32 and cfg["channels"] == [4, 8, 8]
    assert cfg["schedule"] == []
    assert "val_loss" in run and np.isfinite(run["val_loss"])
    assert run["digest"] == ModelCheckpoint.load(work / "encA" / "encoder.emlk").digest()


def test_flag_beats_set_beats_file(work, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs = 5\nlearning_rate = 0.5\nbatch_size = 7\n")
    argv = ["train-encoder", str(work / "data"), "--out", str(tmp_path / "o"), "--config", str(cfg)]
    argv += SMALL + TINY_BACKBONE + ["--set", "epochs=1", "--set", "learning_rate=0.0", "--learning-rate", "1e-4"]
    assert main(argv) == 0
    c = json.loads((tmp_path / "o" / "run.json").read_text())["config"]
    assert (c["epochs"], c["learning_rate"], c["batch_size"]) == (1, 1e-4, 7)


def test_unknown_setting_is_usage_error(work, tmp_path, capsys):
    argv = ["train-encoder", str(work / "data"), "--out", str(tmp_path / "o"), "--set", "learning_rat=1"]
    assert main(argv) == 2
    assert "learning_rat" in capsys.readouterr().err


def test_loss_curve_rows(work):
    with open(work / "encA" / "loss_curve.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert all(float(r["loss"]) > 0 for r in rows)


def test_training_is_reproducible(work, tmp_path):
    argv = ["train-encoder", str(work / "data"), "--out", str(tmp_path / "again"), "--config", str(work / "enc.cfg")]
    assert main(argv + SMALL + TINY_BACKBONE) == 0
    a = (work / "encA" / "encoder.emlk").read_bytes()
    assert (tmp_path / "again" / "encoder.emlk").read_bytes() == a


def test_decoder_needs_encoders(work, tmp_path, capsys):
    argv = ["train-decoder", str(work / "data"), "--out", str(tmp_path / "d")] + SMALL
    assert main(argv) == 2
    assert "encoder stage missing" in capsys.readouterr().err
    assert main(argv + ["--encoder", str(tmp_path / "nope.emlk")]) == 2
    assert "encoder stage missing" in capsys.readouterr().err


def test_decoder_run_record(work):
    run = json.loads((work / "dec" / "run.json").read_text())
    assert len(run["encoders"]) == 2
    dec = ModelCheckpoint.load(work / "dec" / "decoder.emlk")
    assert dec.architecture["decoder"]["tap_channels"] == [4, 8, 8, 2, 4, 6]


def test_empty_dataset_exit_code(tmp_path):
    (tmp_path / "empty").mkdir()
    (tmp_path / "empty" / "manifest.json").write_text('{"entries": []}')
    assert main(["train-encoder", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2


def test_nonfinite_exit_code(work, tmp_path):
    argv = ["train-encoder", str(work / "data"), "--out", str(tmp_path / "o"), "--epochs", "2"]
    argv += SMALL + TINY_BACKBONE + ["--learning-rate", "1e200"]
    with np.errstate(all="ignore"):
        assert main(argv) == 3
    snap = ModelCheckpoint.load(tmp_path / "o" / "encoder.aborted.emlk")
    assert snap.metadata["aborted"] is True
    assert all(np.isfinite(v).all() for v in snap.weights.values())


def predict_args(work, out, *extra):
    argv = ["predict", str(work / "data" / "images"), "--out", str(out)]
    argv += ["--encoder", str(work / "encA" / "encoder.emlk"), "--encoder", str(work / "encB" / "encoder.emlk")]
    return argv + ["--decoder", str(work / "dec" / "decoder.emlk")] + list(extra)


def test_predict_names_and_size(work, tmp_path):
    assert main(predict_args(work, tmp_path / "p")) == 0
    maps = sorted((tmp_path / "p").glob("*.png"))
    assert [m.name for m in maps] == [f"synth_{k:05d}_sal.png" for k in range(8)]
    im = Image.open(maps[0])
    assert im.size == (32, 24) and im.mode == "I;16"


def test_predict_restores_source_size(work, tmp_path):
    rng = np.random.default_rng(0)
    (tmp_path / "imgs").mkdir()
    save_image(rng.random((3, 1080, 1920)), tmp_path / "imgs" / "wide.png")
    save_image(rng.random((3, 50, 40)), tmp_path / "imgs" / "tall.png")
    argv = predict_args(work, tmp_path / "p", "--restore-size", "--pad-ratio", "4:3")
    argv[1] = str(tmp_path / "imgs")
    assert main(argv) == 0
    assert Image.open(tmp_path / "p" / "wide_sal.png").size == (1920, 1080)
    assert Image.open(tmp_path / "p" / "tall_sal.png").size == (40, 50)


def test_predict_encoder_only_and_mismatch(work, tmp_path):
    argv = ["predict", str(work / "data" / "images"), "--out", str(tmp_path / "p")]
    assert main(argv + ["--encoder", str(work / "encA" / "encoder.emlk")]) == 0
    # decoder trained on A+B cannot run on A alone
    argv += ["--encoder", str(work / "encA" / "encoder.emlk"), "--decoder", str(work / "dec" / "decoder.emlk")]
    assert main(argv) == 2


def gt_as_predictions(work, dest):
    dest.mkdir()
    for p in sorted((work / "data" / "density").glob("*.png")):
        shutil.copy(p, dest / f"{p.stem}_sal.png")


def test_eval_perfect_prediction(work, tmp_path):
    gt_as_predictions(work, tmp_path / "pred")
    argv = ["eval", str(tmp_path / "pred"), str(work / "data" / "density"), str(work / "data" / "fixations")]
    assert main(argv + ["--out", str(tmp_path / "e")]) == 0
    agg = MetricReport.from_json((tmp_path / "e" / "report.json").read_text())
    assert round(agg["CC"], 4) == 1.0 and round(agg["SIM"], 4) == 1.0
    assert len(list((tmp_path / "e" / "per_image").glob("*.json"))) == 8
    header = (tmp_path / "e" / "report.txt").read_text().splitlines()[0].split()
    assert header[-6:] == ["NSS", "CC", "AUC-Judd", "sAUC", "KLD", "SIM"]


def test_eval_missing_pairs(work, tmp_path, capsys):
    gt_as_predictions(work, tmp_path / "pred")
    (tmp_path / "pred" / "synth_00002_sal.png").unlink()
    argv = ["eval", str(tmp_path / "pred"), str(work / "data" / "density"), str(work / "data" / "fixations")]
    assert main(argv + ["--out", str(tmp_path / "e")]) == 2
    assert "synth_00002" in capsys.readouterr().err
    assert not (tmp_path / "e" / "report.json").exists()


def test_eval_empty_directory(tmp_path):
    for d in ("p", "g", "f"):
        (tmp_path / d).mkdir()
    argv = ["eval", str(tmp_path / "p"), str(tmp_path / "g"), str(tmp_path / "f"), "--out", str(tmp_path / "e")]
    assert main(argv) == 2
    assert not (tmp_path / "e").exists()


def test_eval_shape_mismatch(work, tmp_path):
    gt_as_predictions(work, tmp_path / "pred")
    Image.fromarray(np.zeros((5, 5), dtype=np.uint16)).save(tmp_path / "pred" / "synth_00000_sal.png")
    argv = ["eval", str(tmp_path / "pred"), str(work / "data" / "density"), str(work / "data" / "fixations")]
    assert main(argv + ["--out", str(tmp_path / "e")]) == 2


def test_report_rows(work, tmp_path, capsys):
    gt_as_predictions(work, tmp_path / "pred")
    argv = ["eval", str(tmp_path / "pred"), str(work / "data" / "density"), str(work / "data" / "fixations")]
    assert main(argv + ["--out", str(tmp_path / "gt_model")]) == 0
    capsys.readouterr()
    assert main(["report", str(tmp_path / "gt_model" / "report.json"), "--digits", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split()[-6:] == ["NSS", "CC", "AUC-Judd", "sAUC", "KLD", "SIM"]
    assert lines[-1].startswith("gt_model")
    assert main(["report", str(tmp_path / "missing.json")]) == 2


def test_workers_do_not_change_outputs(work, tmp_path):
    for n in (1, 3):
        assert main(predict_args(work, tmp_path / f"p{n}", "--workers", str(n))) == 0
        gt_as_predictions(work, tmp_path / f"g{n}")
        argv = ["eval", str(tmp_path / f"p{n}"), str(work / "data" / "density"), str(work / "data" / "fixations")]
        assert main(argv + ["--out", str(tmp_path / f"e{n}"), "--workers", str(n)]) == 0
    assert tree_digest(tmp_path / "p1", skip={"run.json"}) == tree_digest(tmp_path / "p3", skip={"run.json"})
    assert tree_digest(tmp_path / "e1", skip={"run.json"}) == tree_digest(tmp_path / "e3", skip={"run.json"})
    P = load_map_image(tmp_path / "p1" / "synth_00000_sal.png")
    assert P.shape == (24, 32)


def test_console_script(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "emlnet.cli", "synth", "--out", str(tmp_path / "s"), "--count", "2"],
        capture_output=True,
        text=True,
    )
    assert out.returncode == 0, out.stderr
    out = subprocess.run([sys.executable, "-m", "emlnet.cli", "eval"], capture_output=True, text=True)
    assert out.returncode == 2
