"""Dataset loading for the patch export layout.

The inference pipeline exports `dataset/<label>/*.png` patches plus a
`manifest.json` carrying the patch records, optional augmented copies,
and the training set's normalization statistics. This module turns that
tree into tensors: resized to 224, scaled to [0, 1], standardized with
the manifest statistics.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

CLASS_ORDER = ("benign", "malignant", "normal")
INPUT_SIZE = 224


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Sample:
    path: Path
    label: str

    @property
    def class_index(self) -> int:
        return CLASS_ORDER.index(self.label)


@dataclass(frozen=True)
class PatchDataset:
    samples: tuple[Sample, ...]
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    classes: tuple[str, ...]

    def class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in self.classes}
        for sample in self.samples:
            counts[sample.label] += 1
        return counts


def load_dataset(dataset_dir: str | Path, arity: str) -> PatchDataset:
    """Collect labeled samples from a dataset export.

    Binary training uses the benign/malignant lesion classes; multiclass
    adds normal tissue. Each required class must be present.
    """
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {dataset_dir}")
    manifest = json.loads(manifest_path.read_text())

    if arity == "binary":
        classes = CLASS_ORDER[:2]
    elif arity == "multiclass":
        classes = CLASS_ORDER
    else:
        raise DataError(f"unknown arity {arity!r}")

    samples = []
    for record in manifest["records"]:
        label = record.get("ground_label")
        if label not in classes:
            continue
        name = f"{record['slide_id']}_{record['x']}_{record['y']}_{record['level']}.png"
        samples.append(Sample(path=dataset_dir / "dataset" / label / name, label=label))
    for entry in manifest.get("augmented", []):
        if entry["label"] in classes:
            samples.append(Sample(path=dataset_dir / entry["file"], label=entry["label"]))

    present = {s.label for s in samples}
    missing = [c for c in classes if c not in present]
    if missing:
        raise DataError(
            f"dataset classes {sorted(present)} do not match arity {arity!r} "
            f"(missing {missing})"
        )
    for sample in samples:
        if not sample.path.exists():
            raise DataError(f"manifest references missing patch {sample.path}")

    stats = manifest.get("stats") or {}
    mean = tuple(stats.get("mean", (0.0, 0.0, 0.0)))
    std = tuple(stats.get("std", (1.0, 1.0, 1.0)))
    if any(s <= 0 for s in std):
        raise DataError(f"non-positive std in manifest stats: {std}")
    return PatchDataset(samples=tuple(samples), mean=mean, std=std, classes=classes)


def split_dataset(
    dataset: PatchDataset, val_fraction: float = 0.2, seed: int = 0
) -> tuple[tuple[Sample, ...], tuple[Sample, ...]]:
    """Deterministic stratified split; every class lands in both halves."""
    rng = random.Random(seed)
    train: list[Sample] = []
    val: list[Sample] = []
    for name in dataset.classes:
        members = [s for s in dataset.samples if s.label == name]
        rng.shuffle(members)
        n_val = max(1, round(len(members) * val_fraction))
        if n_val >= len(members):
            raise DataError(f"class {name!r} too small to split ({len(members)} samples)")
        val.extend(members[:n_val])
        train.extend(members[n_val:])
    return tuple(train), tuple(val)


def _augment_array(arr: np.ndarray, seed: int) -> np.ndarray:
    """Seeded 224-crop plus one of six flips/rotations (geometric only)."""
    rng = random.Random(seed)
    h, w = arr.shape[:2]
    if h < INPUT_SIZE or w < INPUT_SIZE:
        raise DataError(f"patch {w}x{h} smaller than the {INPUT_SIZE} crop")
    x = rng.randint(0, w - INPUT_SIZE)
    y = rng.randint(0, h - INPUT_SIZE)
    crop = arr[y : y + INPUT_SIZE, x : x + INPUT_SIZE]
    op = rng.randrange(6)
    if op == 1:
        crop = crop[:, ::-1]
    elif op == 2:
        crop = crop[::-1, :]
    elif op >= 3:
        crop = np.rot90(crop, k=op - 2)
    return np.ascontiguousarray(crop)


def load_tensor(
    sample: Sample,
    dataset: PatchDataset,
    augment_seed: int | None = None,
) -> torch.Tensor:
    """One (3, 224, 224) float32 tensor, standardized with the dataset stats."""
    with Image.open(sample.path) as image:
        arr = np.asarray(image.convert("RGB"))
    if augment_seed is not None:
        arr = _augment_array(arr, augment_seed)
    elif arr.shape[:2] != (INPUT_SIZE, INPUT_SIZE):
        image = Image.fromarray(arr).resize((INPUT_SIZE, INPUT_SIZE), Image.BILINEAR)
        arr = np.asarray(image)
    scaled = arr.astype(np.float32) / 255.0
    mean = np.asarray(dataset.mean, dtype=np.float32)
    std = np.asarray(dataset.std, dtype=np.float32)
    return torch.from_numpy(
        np.ascontiguousarray(((scaled - mean) / std).transpose(2, 0, 1))
    )


def load_batch(
    samples,
    dataset: PatchDataset,
    augment_seeds=None,
) -> tuple[torch.Tensor, torch.Tensor]:
    tensors = []
    labels = []
    for i, sample in enumerate(samples):
        seed = augment_seeds[i] if augment_seeds else None
        tensors.append(load_tensor(sample, dataset, seed))
        labels.append(sample.class_index)
    return torch.stack(tensors), torch.tensor(labels, dtype=torch.long)
