import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from melanoscope.cli import main
from melanoscope.decision import CELL_ABSENT
from melanoscope.labels import Label
from melanoscope.pipeline import (
    ConfigError,
    PipelineConfig,
    run_extract,
    run_infer,
    run_pipeline,
)
from melanoscope.png_io import read_png
from melanoscope.synthgen import Blob, SynthSpec, generate_slide


@pytest.fixture
def runner():
    return CliRunner()


def small_slide(tmp_path, slide_id="demo", blobs=None, seed=4):
    """1280x1280 two-level slide; at 40x one grid cell is 256 px.

    The default blobs are sized so the malignant lesion fills several grid
    cells and the benign one exactly one (a cell is fully covered once the
    blob radius exceeds the 181 px half-diagonal).
    """
    if blobs is None:
        blobs = (
            Blob(Label.MALIGNANT, 384, 384, 330),
            Blob(Label.BENIGN, 896, 896, 220),
        )
    spec = SynthSpec(
        slide_id=slide_id,
        width=1280,
        height=1280,
        level_count=2,
        blobs=tuple(blobs),
        seed=seed,
    )
    return generate_slide(spec, tmp_path / "slides"), spec


def config_for(tmp_path, generated, out_name="out", **kwargs) -> PipelineConfig:
    defaults = dict(
        slide=str(generated.pyramid_dir),
        annotations=str(generated.annotation_path),
        magnification=40.0,
        out=str(tmp_path / out_name),
        workers=1,
    )
    defaults.update(kwargs)
    return PipelineConfig(**defaults).validated()


def artifact_bytes(out_dir: Path) -> dict[str, bytes]:
    names = ["manifest.json", "probs.jsonl", "map.json", "map.png", "verdict.json"]
    return {name: (out_dir / name).read_bytes() for name in names}


def test_pipeline_verdict_matches_truth(tmp_path):
    generated, _ = small_slide(tmp_path)
    cfg = config_for(tmp_path, generated)
    verdict = run_pipeline(cfg)
    assert verdict.verdict.value == generated.truth["verdict"] == "melanoma"
    out = Path(cfg.out)
    for name in ("manifest.json", "probs.jsonl", "map.json", "map.png", "verdict.json", "run_info.json"):
        assert (out / name).exists()


def test_pipeline_benign_slide(tmp_path):
    generated, _ = small_slide(
        tmp_path, slide_id="ben", blobs=(Blob(Label.BENIGN, 512, 512, 400),)
    )
    cfg = config_for(tmp_path, generated, out_name="out_ben")
    verdict = run_pipeline(cfg)
    assert verdict.verdict.value == "benign_nevus" == generated.truth["verdict"]
    assert verdict.rho == 0.0


def test_pipeline_empty_slide_no_lesion(tmp_path):
    generated, _ = small_slide(tmp_path, slide_id="empty", blobs=())
    cfg = config_for(tmp_path, generated, out_name="out_empty")
    verdict = run_pipeline(cfg)
    assert verdict.no_lesion_flag
    assert verdict.verdict.value == "benign_nevus"


def test_pipeline_deterministic(tmp_path):
    generated, _ = small_slide(tmp_path)
    v1 = run_pipeline(config_for(tmp_path, generated, out_name="d1", seed=9))
    v2 = run_pipeline(config_for(tmp_path, generated, out_name="d2", seed=9))
    assert v1 == v2
    a = artifact_bytes(tmp_path / "d1")
    b = artifact_bytes(tmp_path / "d2")
    assert a == b


def test_workers_byte_identical(tmp_path):
    generated, _ = small_slide(tmp_path)
    run_pipeline(config_for(tmp_path, generated, out_name="w1", workers=1))
    run_pipeline(config_for(tmp_path, generated, out_name="w4", workers=4))
    assert artifact_bytes(tmp_path / "w1") == artifact_bytes(tmp_path / "w4")


def test_chained_stages_equal_pipeline(tmp_path, runner):
    generated, _ = small_slide(tmp_path)
    run_pipeline(config_for(tmp_path, generated, out_name="whole"))

    base = [
        "--slide", str(generated.pyramid_dir),
        "--annotations", str(generated.annotation_path),
        "--magnification", "40",
        "--out", str(tmp_path / "staged"),
    ]
    for command in ("extract", "infer", "map", "verdict"):
        result = runner.invoke(main, [command, *base])
        assert result.exit_code == 0, result.output
    assert artifact_bytes(tmp_path / "whole") == artifact_bytes(tmp_path / "staged")


def test_manifest_contents(tmp_path):
    generated, spec = small_slide(tmp_path)
    cfg = config_for(tmp_path, generated, out_name="mani")
    run_extract(cfg)
    manifest = json.loads((Path(cfg.out) / "manifest.json").read_text())
    assert manifest["slide_id"] == spec.slide_id
    assert manifest["level"] == 0
    assert manifest["patch_size"] == 256
    assert manifest["stats"] is not None
    records = manifest["records"]
    assert records == sorted(records, key=lambda r: (r["y"], r["x"]))
    labels = {r["ground_label"] for r in records}
    assert labels <= {"benign", "malignant"}
    for record in records:
        rel = f"dataset/{record['ground_label']}/{spec.slide_id}_{record['x']}_{record['y']}_0.png"
        assert (Path(cfg.out) / rel).exists()


def test_infer_lines_align_with_records(tmp_path):
    generated, _ = small_slide(tmp_path)
    cfg = config_for(tmp_path, generated, out_name="inf")
    run_extract(cfg)
    run_infer(cfg)
    manifest = json.loads((Path(cfg.out) / "manifest.json").read_text())
    lines = (Path(cfg.out) / "probs.jsonl").read_text().splitlines()
    assert len(lines) == len(manifest["records"])
    first = json.loads(lines[0])
    assert first["index"] == 0
    assert sum(first["probs"]) == pytest.approx(1.0, abs=1e-6)


def test_cli_verdict_from_crafted_map(tmp_path, runner):
    # 4 malignant + 96 benign cells at t_r = 0.04 sits on the boundary.
    out = tmp_path / "craft"
    out.mkdir()
    cells = [{"row": 0, "col": i, "class": "malignant"} for i in range(4)]
    cells += [{"row": 1 + i // 50, "col": i % 50, "class": "benign"} for i in range(96)]
    doc = {"slide_id": "craft", "grid_width": 50, "grid_height": 3, "cells": cells}
    (out / "map.json").write_text(json.dumps(doc))
    result = runner.invoke(main, ["verdict", "--out", str(out), "--t-r", "0.04"])
    assert result.exit_code == 0, result.output
    verdict = json.loads((out / "verdict.json").read_text())
    assert verdict["verdict"] == "melanoma"
    assert verdict["rho"] == pytest.approx(0.04)
    assert verdict["counts"] == {"benign": 96, "malignant": 4, "normal": 0, "unseen": 0}


def test_cli_rejects_bad_overlap(tmp_path, runner):
    result = runner.invoke(
        main, ["extract", "--slide", "x", "--overlap-min", "1.5", "--out", str(tmp_path)]
    )
    assert result.exit_code == 1
    assert "overlap_min" in result.output


def test_cli_rejects_unknown_config_key(tmp_path, runner):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"sliide": "typo"}))
    result = runner.invoke(main, ["extract", "--config", str(path)])
    assert result.exit_code == 1
    assert "unknown config keys" in result.output


def test_cli_missing_slide_is_config_error(tmp_path, runner):
    result = runner.invoke(
        main, ["segment", "--slide", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]
    )
    assert result.exit_code == 1


def test_config_file_with_overrides(tmp_path, runner):
    generated, _ = small_slide(tmp_path)
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(
        json.dumps(
            {
                "slide": str(generated.pyramid_dir),
                "annotations": str(generated.annotation_path),
                "magnification": 40.0,
                "out": str(tmp_path / "cfgout"),
                "t_r": 0.5,
            }
        )
    )
    result = runner.invoke(main, ["pipeline", "--config", str(cfg_path), "--t-r", "0.04"])
    assert result.exit_code == 0, result.output
    verdict = json.loads(result.output.strip().splitlines()[-1])
    assert verdict["t_r"] == 0.04  # flag overrides file


def test_segment_writes_mask(tmp_path, runner):
    generated, spec = small_slide(tmp_path)
    out = tmp_path / "seg"
    result = runner.invoke(
        main,
        ["segment", "--slide", str(generated.pyramid_dir), "--magnification", "40", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    mask = read_png(out / "foreground.png")[:, :, 0]
    assert mask.shape == (1280, 1280)
    assert mask[384, 384] == 255  # inside the malignant blob
    assert mask[5, 5] == 0  # glass background


def test_synth_command(tmp_path, runner):
    result = runner.invoke(
        main,
        ["synth", "--out", str(tmp_path / "gen"), "--count", "2", "--seed", "3",
         "--width", "512", "--height", "512", "--levels", "2"],
    )
    assert result.exit_code == 0, result.output
    from melanoscope.slide_io import open_slide

    for line in result.output.strip().splitlines():
        slide = open_slide(line)
        assert slide.level_count == 2


def test_synth_spec_file(tmp_path, runner):
    spec_path = tmp_path / "layout.json"
    spec_path.write_text(json.dumps({
        "slides": [{
            "slide_id": "laid_out",
            "width": 512, "height": 512, "level_count": 2, "seed": 5,
            "blobs": [
                {"label": "malignant", "cx": 160, "cy": 160, "r": 100},
                {"label": "normal", "cx": 380, "cy": 380, "r": 80},
            ],
        }]
    }))
    result = runner.invoke(main, ["synth", "--out", str(tmp_path / "gen"), "--spec", str(spec_path)])
    assert result.exit_code == 0, result.output
    truth = json.loads((tmp_path / "gen" / "laid_out.truth.json").read_text())
    assert truth["verdict"] == "melanoma"
    assert truth["areas"]["normal"] > 0


def test_synth_spec_rejects_bad_layout(tmp_path, runner):
    spec_path = tmp_path / "bad.json"
    spec_path.write_text(json.dumps({
        "slides": [{"slide_id": "x", "width": 512, "height": 512,
                    "blobs": [{"label": "tumor", "cx": 1, "cy": 1, "r": 1}]}]
    }))
    result = runner.invoke(main, ["synth", "--out", str(tmp_path / "gen"), "--spec", str(spec_path)])
    assert result.exit_code == 1


def test_evaluate_outputs(tmp_path, runner):
    generated, _ = small_slide(tmp_path)
    cfg = config_for(tmp_path, generated, out_name="ev")
    run_pipeline(cfg)
    result = runner.invoke(
        main,
        ["evaluate", "--slide", cfg.slide, "--annotations", cfg.annotations,
         "--magnification", "40", "--out", cfg.out],
    )
    assert result.exit_code == 0, result.output
    out = Path(cfg.out)
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["accuracy"] == 1.0  # mock classifier is exact on its own palette
    csv_lines = (out / "metrics.csv").read_text().splitlines()
    assert csv_lines[0] == "model,acc_percent,f1,sensitivity,specificity"
    assert (out / "confusion_matrix.png").exists()


def test_evaluate_apply_threshold(tmp_path, runner):
    generated, _ = small_slide(tmp_path)
    cfg = config_for(tmp_path, generated, out_name="evt")
    run_pipeline(cfg)
    result = runner.invoke(
        main,
        ["evaluate", "--slide", cfg.slide, "--annotations", cfg.annotations,
         "--magnification", "40", "--out", cfg.out, "--apply-threshold"],
    )
    assert result.exit_code == 0, result.output
    metrics = json.loads((Path(cfg.out) / "metrics.json").read_text())
    # sub-threshold rim patches drop out as unseen instead of being scored
    assert metrics["coverage"] <= 1.0
    assert metrics["accuracy"] == 1.0


def test_calibrate_cli(tmp_path, runner):
    val = tmp_path / "val"
    specs = [
        ("mel", (Blob(Label.MALIGNANT, 512, 512, 400),)),
        ("ben", (Blob(Label.BENIGN, 512, 512, 400),)),
    ]
    for slide_id, blobs in specs:
        generated, _ = small_slide(tmp_path, slide_id=slide_id, blobs=blobs)
        cfg = config_for(tmp_path, generated, out_name=f"val/{slide_id}")
        run_extract(cfg)
        run_infer(cfg)
        (val / slide_id / "truth.json").write_text(generated.truth_path.read_text())
    result = runner.invoke(
        main, ["calibrate", "--val-dir", str(val), "--out", str(tmp_path / "calib")]
    )
    assert result.exit_code == 0, result.output
    thresholds = json.loads((tmp_path / "calib" / "thresholds.json").read_text())
    assert thresholds["t_r"] == pytest.approx(0.01)  # perfectly separated set
    assert (tmp_path / "calib" / "calibration.png").exists()


def test_map_png_scale(tmp_path):
    generated, _ = small_slide(tmp_path)
    cfg = config_for(tmp_path, generated, out_name="scale", map_scale=8)
    run_pipeline(cfg)
    image = read_png(Path(cfg.out) / "map.png")
    assert image.shape == (5 * 8, 5 * 8, 3)  # 1280 / 256 = 5 cells per side


def test_map_composite(tmp_path):
    generated, _ = small_slide(tmp_path)
    cfg = config_for(tmp_path, generated, out_name="comp", map_scale=16, composite=True)
    run_pipeline(cfg)
    rendered = read_png(Path(cfg.out) / "map.png")
    composite = read_png(Path(cfg.out) / "map_composite.png")
    assert composite.shape[0] == rendered.shape[0]
    assert composite.shape[1] > rendered.shape[1]  # thumbnail panel on the left
    assert np.array_equal(composite[:, -rendered.shape[1]:], rendered)


def test_neural_backend_through_pipeline(tmp_path):
    from melanoscope.onnx_io import OnnxModel, OnnxNode, OnnxValueInfo, save_model

    # Zero weights -> logits (0, 0) -> max prob 0.5 < t_p: everything unseen.
    model = OnnxModel(
        nodes=[
            OnnxNode("Flatten", ("input",), ("flat",), {"axis": 1}),
            OnnxNode("Gemm", ("flat", "w"), ("logits",), {"transB": 1}),
        ],
        initializers={"w": np.zeros((2, 3 * 224 * 224), dtype=np.float32)},
        inputs=[OnnxValueInfo("input", ("batch", 3, 224, 224))],
        outputs=[OnnxValueInfo("logits", ("batch", 2))],
    )
    model_path = tmp_path / "zero.onnx"
    save_model(model, model_path)
    generated, _ = small_slide(tmp_path)
    cfg = config_for(
        tmp_path, generated, out_name="neural",
        backend="neural", arity="binary", model=str(model_path),
    )
    verdict = run_pipeline(cfg)
    assert verdict.no_lesion_flag  # all patches below threshold
    assert verdict.verdict.value == "benign_nevus"


def test_validation_catches_neural_without_model():
    with pytest.raises(ConfigError, match="model"):
        PipelineConfig(slide="s", backend="neural").validated()


def test_tissue_only_plan(tmp_path):
    generated, _ = small_slide(tmp_path)
    cfg = config_for(tmp_path, generated, out_name="tissue", tissue_only=True, annotations=None)
    run_extract(cfg)
    manifest = json.loads((Path(cfg.out) / "manifest.json").read_text())
    assert manifest["records"]
    assert all(r["ground_label"] is None for r in manifest["records"])


def test_balance_flag_tops_up_minority(tmp_path):
    generated, _ = small_slide(tmp_path)
    cfg = config_for(tmp_path, generated, out_name="bal", balance=True)
    run_extract(cfg)
    manifest = json.loads((Path(cfg.out) / "manifest.json").read_text())
    by_label = {}
    for record in manifest["records"]:
        by_label[record["ground_label"]] = by_label.get(record["ground_label"], 0) + 1
    augmented = manifest["augmented"]
    assert augmented, "minority class should receive augmented copies"
    totals = dict(by_label)
    for entry in augmented:
        totals[entry["label"]] += 1
        assert (Path(cfg.out) / entry["file"]).exists()
    assert len(set(totals.values())) == 1  # balanced after top-up


def test_env_var_sets_logging(tmp_path, runner, monkeypatch):
    monkeypatch.setenv("MELANOSCOPE_LOG", "DEBUG")
    generated, _ = small_slide(tmp_path)
    result = runner.invoke(
        main,
        ["segment", "--slide", str(generated.pyramid_dir), "--magnification", "40",
         "--out", str(tmp_path / "logseg")],
    )
    assert result.exit_code == 0
