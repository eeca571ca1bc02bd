#!/usr/bin/env python3
"""
Pruebas de la CLI: exit codes y ficheros de salida de cada subcomando
"""

import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

import json
import math

import numpy as np
import pandas as pd
import pytest

from engine import ImdnEngine
from imaging import ImageBuffer, load_png, save_png
from imdn_model import build_variant, init_weights, save_weights
from main import main
from models import Variant

TINY = dict(num_blocks=1, channels=8, distilled=2, coarse=6, cca_squeeze=2)


def write_images(directory, count=2, size=(24, 24)):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    for i in range(count):
        pixels = rng.integers(0, 256, (*size, 3), dtype=np.uint8)
        save_png(ImageBuffer.from_array(pixels), directory / f"img_{i}.png")
    return directory


@pytest.fixture
def x4_weights(tmp_path):
    model = init_weights(build_variant(Variant.IMDN, scale=4, **TINY), seed=0)
    return save_weights(model, tmp_path / "x4.imdnw")


@pytest.fixture
def as_weights(tmp_path):
    model = init_weights(build_variant(Variant.IMDN_AS, **TINY), seed=0)
    return save_weights(model, tmp_path / "as.imdnw")


# ===== ANALYZE =====

@pytest.mark.parametrize("scale", [2, 3, 4])
def test_analyze_matches_published_values(scale, capsys):
    assert main(["analyze", "--variant", "imdn", "--scale", str(scale), "--assert-paper"]) == 0
    assert "✅" in capsys.readouterr().out


def test_analyze_summary(capsys):
    assert main(["analyze"]) == 0
    assert "715K, depth 34, 45K·m²" in capsys.readouterr().out


def test_analyze_ablation(tmp_path, capsys):
    csv_path = tmp_path / "cost.csv"
    assert main(["analyze", "--variant", "basic-B4", "--csv", str(csv_path)]) == 0
    assert "480K" in capsys.readouterr().out
    assert pd.read_csv(csv_path)["params"].sum() == 480_176


def test_analyze_without_published_values():
    assert main(["analyze", "--variant", "basic-B4+CA", "--assert-paper"]) == 1


def test_analyze_unknown_variant():
    assert main(["analyze", "--variant", "imdn-xxl"]) == 2


def test_unknown_subcommand():
    assert main(["upscale"]) == 2


# ===== TRAIN =====

def test_train_rejects_patch_not_divisible_by_scale(tmp_path):
    data = write_images(tmp_path / "hr")
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "run"), "--patch", "191"]) == 2


def train_args(data, out):
    return ["--quiet", "train", "--data", str(data), "--out", str(out), "--scale", "2",
            "--blocks", "1", "--channels", "8", "--steps", "200", "--patch", "8",
            "--batch", "2", "--lr", "1e-3", "--seed", "0"]


def test_train_writes_run_outputs(tmp_path):
    data = write_images(tmp_path / "hr")
    out = tmp_path / "run"
    assert main(train_args(data, out)) == 0

    losses = pd.read_csv(out / "loss.csv")
    assert list(losses.columns) == ["step", "lr", "loss"]
    assert len(losses) == 200
    assert losses["loss"].tail(20).mean() < losses["loss"].head(20).mean()
    assert (out / "weights.imdnw").exists()

    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "train"
    assert manifest["config"]["model"]["channels"] == 8

    rerun = tmp_path / "rerun"
    assert main(train_args(data, rerun)) == 0
    assert (out / "weights.imdnw").read_bytes() == (rerun / "weights.imdnw").read_bytes()


def test_train_without_images(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "run"),
                 "--patch", "8"]) == 1


# ===== SR / SR-ANY =====

def test_sr_upscales_by_four(tmp_path, x4_weights):
    source = write_images(tmp_path / "in", count=1) / "img_0.png"
    outputs = [tmp_path / "a.png", tmp_path / "b.png"]
    for output in outputs:
        assert main(["sr", "--weights", str(x4_weights), "--input", str(source), "--output", str(output)]) == 0

    first, second = (load_png(p) for p in outputs)
    assert (first.height, first.width) == (96, 96)
    np.testing.assert_array_equal(first.pixels, second.pixels)

    # cada salida conserva su propio manifiesto en el directorio compartido
    for output in outputs:
        manifest = json.loads((tmp_path / f"{output.stem}.manifest.json").read_text(encoding="utf-8"))
        assert manifest["command"] == "sr"
        assert manifest["outputs"]["image"] == str(output)
    assert not (tmp_path / "manifest.json").exists()


def test_sr_with_corrupt_weights(tmp_path):
    weights = tmp_path / "bad.imdnw"
    weights.write_bytes(b"IMDNW1\x01")
    source = write_images(tmp_path / "in", count=1) / "img_0.png"
    assert main(["sr", "--weights", str(weights), "--input", str(source),
                 "--output", str(tmp_path / "out.png")]) == 1


def test_sr_scale_mismatch(tmp_path, x4_weights):
    source = write_images(tmp_path / "in", count=1) / "img_0.png"
    assert main(["sr", "--weights", str(x4_weights), "--input", str(source),
                 "--output", str(tmp_path / "out.png"), "--scale", "2"]) == 1


def test_sr_any_keeps_size(tmp_path, as_weights):
    source = write_images(tmp_path / "in", count=1, size=(101, 77)) / "img_0.png"
    output = tmp_path / "out.png"
    assert main(["sr-any", "--weights", str(as_weights), "--input", str(source), "--output", str(output)]) == 0
    result = load_png(output)
    assert (result.height, result.width) == (101, 77)
    manifest = json.loads((tmp_path / "out.manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "sr-any"
    assert manifest["results"]["tiles"] == 4


def test_sr_any_invalid_padding(tmp_path, as_weights):
    source = write_images(tmp_path / "in", count=1) / "img_0.png"
    assert main(["sr-any", "--weights", str(as_weights), "--input", str(source),
                 "--output", str(tmp_path / "out.png"), "--padding", "3"]) == 2


def test_sr_any_rejects_fixed_scale_weights(tmp_path, x4_weights):
    source = write_images(tmp_path / "in", count=1) / "img_0.png"
    assert main(["sr-any", "--weights", str(x4_weights), "--input", str(source),
                 "--output", str(tmp_path / "out.png")]) == 2


# ===== EVAL =====

def test_eval_identity(tmp_path):
    data = write_images(tmp_path / "hr", count=3)
    out = tmp_path / "eval"
    assert main(["eval", "--data", str(data), "--method", "identity", "--scale", "2", "--out", str(out)]) == 0

    report = pd.read_csv(out / "eval.csv")
    assert len(report) == 4
    assert report["image"].iloc[-1] == "mean"
    assert all(math.isinf(v) for v in report["psnr_db"])
    assert np.allclose(report["ssim"], 1.0)


def test_eval_bicubic_mean(tmp_path):
    data = write_images(tmp_path / "hr", count=3)
    out = tmp_path / "eval"
    assert main(["eval", "--data", str(data), "--method", "bicubic", "--scale", "2", "--out", str(out)]) == 0

    report = pd.read_csv(out / "eval.csv")
    rows, mean = report.iloc[:-1], report.iloc[-1]
    for column in ("psnr_db", "ssim"):
        recomputed = math.fsum(rows[column]) / len(rows)
        assert abs(mean[column] - recomputed) <= 1e-12


def test_eval_with_model_weights(tmp_path, x4_weights):
    data = write_images(tmp_path / "hr", count=2, size=(32, 32))
    out = tmp_path / "eval"
    assert main(["eval", "--data", str(data), "--weights", str(x4_weights), "--out", str(out)]) == 0
    assert len(pd.read_csv(out / "eval.csv")) == 3


def test_eval_empty_directory(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["eval", "--data", str(tmp_path / "empty"), "--method", "bicubic",
                 "--out", str(tmp_path / "eval")]) == 1


def test_eval_model_without_weights(tmp_path):
    data = write_images(tmp_path / "hr")
    assert main(["eval", "--data", str(data), "--out", str(tmp_path / "eval")]) == 2


# ===== CHECK-GRAD =====

def test_check_grad_passes():
    assert main(["check-grad", "--probes", "3"]) == 0


def test_check_grad_detects_broken_backward():
    assert main(["check-grad", "--probes", "3", "--break-op", "conv2d"]) == 1


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_check_grad_verdict_does_not_depend_on_seed(seed):
    assert main(["check-grad", "--probes", "3", "--seed", str(seed)]) == 0


def test_check_grad_seed_changes_sampled_errors():
    engine = ImdnEngine(verbose=False)
    first = engine.check_gradients(seed=0, probes=3)
    second = engine.check_gradients(seed=1, probes=3)
    assert first.keys() == second.keys()
    assert first != second
