import csv
import json

import numpy as np
import pytest
from PIL import Image

from dynaseg.cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, main
from dynaseg.datasets import synthetic_corpus
from dynaseg.io import read_label_map, write_label_map
from dynaseg.schemas.config import SyntheticSpec

SYNTHETIC = ["--synthetic", "--synthetic-images", "2", "--size", "16"]
FAST = ["--iters", "2", "--p", "8", "--q", "8", "--threshold", "1"]


def test_params_reports_default_cnn_count(capsys):
    assert main(["params"]) == EXIT_OK

    out = capsys.readouterr().out
    assert "cnn: 193900" in out
    assert "resnet_fpn: 12039276" in out


def test_segment_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["segment", *SYNTHETIC, *FAST, "--out", str(out)]) == EXIT_OK

    for item_id in ["synthetic_0000", "synthetic_0001"]:
        assert (out / f"{item_id}.labels.png").is_file()
        assert (out / f"{item_id}.overlay.png").is_file()
        assert 1 <= len((out / f"{item_id}.log.jsonl").read_text().splitlines()) <= 2
    assert json.loads((out / "effective_config.json").read_text())["train"]["max_iters"] == 2
    assert not (out / "failures.json").exists()
    assert "synthetic_0000: q'=" in capsys.readouterr().out


def test_segment_reports_unreadable_images(tmp_path):
    broken = tmp_path / "broken.jpg"
    broken.write_bytes(b"nada")
    out = tmp_path / "out"

    assert main(["segment", "--image", str(broken), *FAST, "--out", str(out)]) == EXIT_PARTIAL
    failures = json.loads((out / "failures.json").read_text())["failures"]
    assert failures[0]["error"] == "DynaSegDecodeError"


def test_segment_keeps_images_with_the_same_name_apart(tmp_path):
    rng = np.random.default_rng(0)
    paths = []
    for folder, shape in [("a", (16, 16, 3)), ("b", (12, 20, 3))]:
        (tmp_path / folder).mkdir()
        path = tmp_path / folder / "x.png"
        Image.fromarray((rng.random(shape) * 255).astype(np.uint8)).save(path)
        paths.append(str(path))
    out = tmp_path / "out"

    assert main(["segment", "--image", *paths, *FAST, "--out", str(out)]) == EXIT_OK
    assert read_label_map(out / "x.labels.png").shape == (16, 16)
    assert read_label_map(out / "x_1.labels.png").shape == (12, 20)
    assert (out / "x_1.overlay.png").is_file()


def _perfect_predictions(directory):
    directory.mkdir()
    for image, gt in synthetic_corpus(SyntheticSpec(num_images=2, size=16)):
        write_label_map(gt.variants[0], directory / f"{image.source_id}.labels.png")


def test_eval_perfect_predictions(tmp_path, capsys):
    pred = tmp_path / "pred"
    _perfect_predictions(pred)
    out = tmp_path / "eval"

    assert main(["eval", *SYNTHETIC, "--pred", str(pred), "--out", str(out)]) == EXIT_OK
    assert "mIoU=1.0000" in capsys.readouterr().out
    assert json.loads((out / "report.json").read_text())["num_images"] == 2


def test_eval_missing_prediction(tmp_path, capsys):
    pred = tmp_path / "pred"
    _perfect_predictions(pred)
    (pred / "synthetic_0001.labels.png").unlink()

    code = main(["eval", *SYNTHETIC, "--pred", str(pred), "--out", str(tmp_path / "eval")])
    assert code == EXIT_PARTIAL
    assert "synthetic_0001" in capsys.readouterr().err


def test_sweep_is_resumable(tmp_path):
    out = tmp_path / "sweep"
    args = ["sweep", *SYNTHETIC, *FAST, "--values", "5,15,50", "--out", str(out)]

    assert main(args) == EXIT_OK
    assert main(args) == EXIT_OK

    with open(out / "sweep.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [row["value"] for row in rows] == ["5.0", "15.0", "50.0"]
    assert all(row["schedule"] == "fsf" and row["miou"] for row in rows)


def test_sweep_resume_distinguishes_schedules(tmp_path):
    out = tmp_path / "sweep"
    base = ["sweep", *SYNTHETIC, *FAST, "--values", "5,15", "--out", str(out)]

    assert main([*base, "--schedule", "fsf"]) == EXIT_OK
    assert main([*base, "--schedule", "scf"]) == EXIT_OK
    assert main([*base, "--schedule", "scf"]) == EXIT_OK

    with open(out / "sweep.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [(row["schedule"], row["value"]) for row in rows] == [
        ("fsf", "5.0"), ("fsf", "15.0"), ("scf", "5.0"), ("scf", "15.0"),
    ]


def test_sweep_mu_forces_fixed_schedule(tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", *SYNTHETIC, *FAST, "--param", "mu", "--values", "1", "--out", str(out)]) == EXIT_OK

    with open(out / "sweep.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["schedule"] == "fixed"
    assert main(["sweep", *SYNTHETIC, "--schedule", "scf", "--param", "mu", "--values", "1"]) == EXIT_CONFIG


@pytest.mark.parametrize(
    "argv",
    [
        ["sweep", *SYNTHETIC, "--values", ""],
        ["segment", *SYNTHETIC, "--alpha", "0"],
        ["segment", "--iters", "2"],
    ],
)
def test_configuration_errors(argv, tmp_path):
    assert main([*argv, "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_doctor(tmp_path, capsys):
    assert main(["doctor", "--dataset", "voc2012", "--root", str(tmp_path / "nope")]) == EXIT_CONFIG
    assert main(["doctor", "--dataset", "voc2012", "--root", str(tmp_path), "--split", "val"]) == EXIT_CONFIG
    assert "PROBLEMA" in capsys.readouterr().out


def test_gate_stats_compares_with_ground_truth(tmp_path, capsys):
    out = tmp_path / "gate"
    argv = ["gate-stats", *SYNTHETIC, "--size", "32", "--noise", "0", "--p", "8", "--q", "8"]
    argv += ["--threshold", "4", "--out", str(out)]

    assert main(argv) == EXIT_OK
    with open(out / "gate_stats.csv", newline="") as f:
        rows = list(csv.DictReader(f))

    assert [row["source_id"] for row in rows] == ["synthetic_0000", "synthetic_0001"]
    for row in rows:
        assert float(row["gt_segments"]) == 3.0
        assert row["fixed_threshold"] == "4"
        assert 2 <= int(row["opt_nC"]) <= 20
        assert int(row["threshold"]) <= int(row["opt_nC"])
    assert "error absoluto vs GT" in capsys.readouterr().out
