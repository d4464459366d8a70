"""Secondary-component acceptance: train, export, and run through the
inference pipeline.

Criteria: at least 95% validation accuracy within 10 epochs on the
color-separable synthetic patch set (sanity-checked by a nearest-centroid
oracle), exported logits within 1e-4 of the in-framework forward pass on
100 random inputs, and pipeline verdicts from the exported model matching
the mock backend's on the same synthetic slides.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from melanotrain.data import load_dataset, split_dataset
from melanotrain.model import PatchClassifier
from melanotrain.onnx_export import export_checkpoint
from melanotrain.training import TrainConfig, train

from melanoscope.onnx_io import load_model, run_model

from conftest import build_dataset, run_melanoscope

CELL = 256


@pytest.fixture(scope="module")
def training_dataset(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("acc_train")
    return build_dataset(
        root,
        "train300",
        cells=26,
        blobs=[
            ("benign", 7.0, 7.0, 5.8),
            ("malignant", 19.0, 7.0, 5.8),
            ("normal", 13.0, 19.0, 5.8),
        ],
        seed=42,
    )


@pytest.fixture(scope="module")
def trained(training_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("acc_run")
    config = TrainConfig(
        dataset_dir=str(training_dataset),
        arity="multiclass",
        freeze_backbone=True,
        batch_size=32,
        max_epochs=10,
        seed=5,
        cache_dir=str(out / "cache"),
        out_dir=str(out / "train"),
    )
    return config, train(config)


@pytest.fixture(scope="module")
def exported(trained, tmp_path_factory):
    _, result = trained
    out = tmp_path_factory.mktemp("acc_export")
    return export_checkpoint(result.checkpoint_path, "multiclass", out / "model.onnx")


def test_nearest_centroid_oracle(training_dataset):
    """The synthetic classes are separable by mean color alone."""
    ds = load_dataset(training_dataset, "multiclass")
    train_samples, val_samples = split_dataset(ds, 0.2, seed=5)

    def mean_color(sample):
        with Image.open(sample.path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64).mean(axis=(0, 1))

    centroids = {}
    for name in ds.classes:
        members = [mean_color(s) for s in train_samples if s.label == name]
        centroids[name] = np.mean(members, axis=0)
    correct = 0
    for sample in val_samples:
        color = mean_color(sample)
        nearest = min(centroids, key=lambda n: np.linalg.norm(color - centroids[n]))
        correct += nearest == sample.label
    assert correct / len(val_samples) == 1.0


def test_validation_accuracy_within_ten_epochs(trained, training_dataset):
    config, result = trained
    ds = load_dataset(training_dataset, "multiclass")
    assert len(ds.samples) >= 250, "dataset should be in the ~300 patch regime"
    assert config.max_epochs == 10
    assert result.best_val_accuracy >= 0.95
    assert len(result.log) <= 10


def test_exported_logits_match_framework(trained, exported):
    _, result = trained
    checkpoint = torch.load(result.checkpoint_path, map_location="cpu", weights_only=True)
    model = PatchClassifier("multiclass")
    model.load_state_dict(checkpoint["state_dict"])
    model.eval()
    onnx_model = load_model(exported)
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(10):
        x = rng.normal(0, 1, (10, 3, 224, 224)).astype(np.float32)
        with torch.no_grad():
            expected = model(torch.from_numpy(x)).numpy()
        got = run_model(onnx_model, {"input": x})["logits"]
        worst = max(worst, float(np.abs(got - expected).max()))
    assert worst < 1e-4, f"max logit deviation {worst}"


def test_pipeline_verdicts_match_mock(trained, exported, tmp_path):
    """The exported model, driven through the inference CLI, reproduces the
    mock backend's slide verdicts on fresh synthetic slides."""
    spec_path = tmp_path / "layout.json"
    spec_path.write_text(json.dumps({
        "slides": [
            {
                "slide_id": "verdict_mel",
                "width": 5 * CELL, "height": 5 * CELL, "level_count": 2, "seed": 21,
                "blobs": [
                    {"label": "malignant", "cx": 1.5 * CELL, "cy": 1.5 * CELL, "r": 1.3 * CELL},
                    {"label": "benign", "cx": 3.5 * CELL, "cy": 3.5 * CELL, "r": 0.86 * CELL},
                ],
            },
            {
                "slide_id": "verdict_ben",
                "width": 5 * CELL, "height": 5 * CELL, "level_count": 2, "seed": 22,
                "blobs": [
                    {"label": "benign", "cx": 2.5 * CELL, "cy": 2.5 * CELL, "r": 1.6 * CELL},
                ],
            },
        ]
    }))
    slides_dir = tmp_path / "slides"
    run_melanoscope("synth", "--out", str(slides_dir), "--spec", str(spec_path))

    config, _ = trained
    training_manifest = Path(config.dataset_dir) / "manifest.json"
    verdicts = {}
    for slide_id in ("verdict_mel", "verdict_ben"):
        base = [
            "--slide", str(slides_dir / slide_id),
            "--annotations", str(slides_dir / f"{slide_id}.annotations.json"),
            "--magnification", "40",
        ]
        for backend in ("mock", "neural"):
            out = tmp_path / f"{slide_id}_{backend}"
            args = ["pipeline", *base, "--backend", backend, "--out", str(out)]
            if backend == "neural":
                args += [
                    "--model", str(exported),
                    "--arity", "multiclass",
                    "--stats-file", str(training_manifest),
                ]
            run_melanoscope(*args)
            verdicts[(slide_id, backend)] = json.loads((out / "verdict.json").read_text())

    for slide_id in ("verdict_mel", "verdict_ben"):
        mock = verdicts[(slide_id, "mock")]
        neural = verdicts[(slide_id, "neural")]
        assert neural["verdict"] == mock["verdict"], (slide_id, mock, neural)
        truth = json.loads((slides_dir / f"{slide_id}.truth.json").read_text())
        assert mock["verdict"] == truth["verdict"]
