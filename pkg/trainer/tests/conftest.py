"""Fixtures that build patch datasets through the inference CLI.

The trainer only knows the exported dataset layout, so fixtures shell out
to `melanoscope synth` / `melanoscope extract` exactly as a user would.
"""

import json
import subprocess
import sys
from pathlib import Path

import pytest

CELL = 256


def run_melanoscope(*args: str) -> str:
    proc = subprocess.run(
        [sys.executable, "-m", "melanoscope.cli", *args],
        capture_output=True,
        text=True,
    )
    if proc.returncode != 0:
        raise AssertionError(
            f"melanoscope {' '.join(args)} failed ({proc.returncode}):\n{proc.stderr}"
        )
    return proc.stdout


def build_dataset(root: Path, name: str, cells: int, blobs, seed: int) -> Path:
    """Generate one slide and export its patch dataset; returns the out dir."""
    spec_path = root / f"{name}_layout.json"
    spec_path.write_text(
        json.dumps(
            {
                "slides": [
                    {
                        "slide_id": name,
                        "width": cells * CELL,
                        "height": cells * CELL,
                        "level_count": 2,
                        "seed": seed,
                        "blobs": [
                            {"label": label, "cx": cx * CELL, "cy": cy * CELL, "r": r * CELL}
                            for label, cx, cy, r in blobs
                        ],
                    }
                ]
            }
        )
    )
    slides_dir = root / f"{name}_slides"
    run_melanoscope("synth", "--out", str(slides_dir), "--spec", str(spec_path))
    out_dir = root / f"{name}_dataset"
    run_melanoscope(
        "extract",
        "--slide", str(slides_dir / name),
        "--annotations", str(slides_dir / f"{name}.annotations.json"),
        "--magnification", "40",
        "--out", str(out_dir),
    )
    return out_dir


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    """Three classes, a few dozen patches; shared across unit tests."""
    root = tmp_path_factory.mktemp("tiny")
    return build_dataset(
        root,
        "tiny",
        cells=12,
        blobs=[
            ("benign", 3.5, 3.5, 2.0),
            ("malignant", 8.5, 3.5, 2.0),
            ("normal", 6.0, 8.5, 2.0),
        ],
        seed=11,
    )


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory) -> Path:
    """Two classes, around ten patches; for full-network smoke tests."""
    root = tmp_path_factory.mktemp("micro")
    return build_dataset(
        root,
        "micro",
        cells=8,
        blobs=[
            ("benign", 2.5, 2.5, 1.5),
            ("malignant", 5.5, 5.5, 1.5),
        ],
        seed=13,
    )


@pytest.fixture(scope="session")
def feature_cache(tmp_path_factory) -> str:
    return str(tmp_path_factory.mktemp("feature_cache"))
