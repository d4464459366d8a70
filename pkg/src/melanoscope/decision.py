"""Slide-level decision core.

Per-patch probabilities become a four-way patch class via probability
thresholding (below-threshold patches are "unseen" tissue). Classified
patches fill a down-sampled localization map, the malignant/benign cell
ratio is compared against a second threshold, and the slide is called
melanoma or benign nevus. Both thresholds can be re-derived on a
validation set by grid search.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .classifier import ProbabilityVector
from .labels import CLASS_ORDER, Label, PatchClass, Verdict
from .tiling import PatchRecord

logger = logging.getLogger(__name__)

DEFAULT_T_P = 0.99
DEFAULT_T_R = 0.04

# Grid-search defaults; both include the calibrated operating point.
DEFAULT_T_P_GRID = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)
DEFAULT_T_R_GRID = tuple(round(0.01 * i, 2) for i in range(1, 21))

# Map cell codes: -1 = never classified (background), else PatchClass.
CELL_ABSENT = -1
_CLASS_TO_CODE = {
    PatchClass.BENIGN: 0,
    PatchClass.MALIGNANT: 1,
    PatchClass.NORMAL: 2,
    PatchClass.UNSEEN: 3,
}
_CODE_TO_CLASS = {code: cls for cls, code in _CLASS_TO_CODE.items()}

RENDER_PALETTE = {
    PatchClass.MALIGNANT: (230, 40, 40),
    PatchClass.BENIGN: (60, 180, 75),
    PatchClass.NORMAL: (70, 130, 220),
    PatchClass.UNSEEN: (200, 200, 200),
    None: (255, 255, 255),
}


class DecisionError(Exception):
    pass


@dataclass(frozen=True)
class Thresholds:
    t_p: float = DEFAULT_T_P
    t_r: float = DEFAULT_T_R

    def __post_init__(self):
        if not 0.0 < self.t_p <= 1.0:
            raise ValueError(f"t_p must be in (0, 1], got {self.t_p}")
        if not 0.0 <= self.t_r <= 1.0:
            raise ValueError(f"t_r must be in [0, 1], got {self.t_r}")


@dataclass(frozen=True)
class LocalizationMap:
    """One cell per patch-grid position at the classification level."""

    slide_id: str
    grid_width: int
    grid_height: int
    cells: np.ndarray  # (grid_height, grid_width) int8; CELL_ABSENT = background

    def class_at(self, row: int, col: int) -> PatchClass | None:
        code = int(self.cells[row, col])
        return None if code == CELL_ABSENT else _CODE_TO_CLASS[code]

    def counts(self) -> dict[PatchClass, int]:
        return {
            cls: int((self.cells == code).sum()) for cls, code in _CLASS_TO_CODE.items()
        }

    def to_json_dict(self) -> dict:
        entries = [
            {"row": int(r), "col": int(c), "class": _CODE_TO_CLASS[int(self.cells[r, c])].value}
            for r, c in np.argwhere(self.cells != CELL_ABSENT)
        ]
        return {
            "slide_id": self.slide_id,
            "grid_width": self.grid_width,
            "grid_height": self.grid_height,
            "cells": entries,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "LocalizationMap":
        cells = np.full((d["grid_height"], d["grid_width"]), CELL_ABSENT, dtype=np.int8)
        for entry in d["cells"]:
            cells[entry["row"], entry["col"]] = _CLASS_TO_CODE[PatchClass(entry["class"])]
        return LocalizationMap(
            slide_id=d["slide_id"],
            grid_width=d["grid_width"],
            grid_height=d["grid_height"],
            cells=cells,
        )


@dataclass(frozen=True)
class SlideVerdict:
    slide_id: str
    rho: float
    verdict: Verdict
    t_p: float
    t_r: float
    counts: dict = field(default_factory=dict)
    no_lesion_flag: bool = False

    def to_json_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "rho": self.rho,
            "t_p": self.t_p,
            "t_r": self.t_r,
            "verdict": self.verdict.value,
            "counts": self.counts,
            "no_lesion_flag": self.no_lesion_flag,
        }


def assign_class(y_p: ProbabilityVector, t_p: float = DEFAULT_T_P) -> PatchClass:
    """Argmax class when the winning probability reaches `t_p`, else UNSEEN.

    Ties take the earliest class in the fixed order.
    """
    if y_p.max_prob >= t_p:
        return PatchClass(CLASS_ORDER[y_p.argmax].value)
    return PatchClass.UNSEEN


def assign_classes(
    vectors: Sequence[ProbabilityVector], t_p: float = DEFAULT_T_P
) -> list[PatchClass]:
    return [assign_class(v, t_p) for v in vectors]


def build_map(
    records: Sequence[PatchRecord],
    classes: Sequence[PatchClass],
    level_width: int,
    level_height: int,
    patch_size: int,
    downsample: int = 1,
    slide_id: str | None = None,
) -> LocalizationMap:
    """Place each classified patch into its grid cell.

    `level_width`/`level_height` are the slide dimensions at the level the
    patches were classified at, and `downsample` is that level's factor
    (record origins are level-0 pixels). A record's cell is its level
    origin divided by the stride (= patch size).
    """
    if len(records) != len(classes):
        raise DecisionError(f"{len(records)} records but {len(classes)} classes")
    grid_w = -(-level_width // patch_size)
    grid_h = -(-level_height // patch_size)
    cells = np.full((grid_h, grid_w), CELL_ABSENT, dtype=np.int8)
    sid = slide_id
    stride0 = patch_size * downsample  # stride expressed in level-0 pixels
    for rec, cls in zip(records, classes):
        if sid is None:
            sid = rec.slide_id
        row = rec.y // stride0
        col = rec.x // stride0
        if not (0 <= row < grid_h and 0 <= col < grid_w):
            raise DecisionError(
                f"record at ({rec.x}, {rec.y}) maps to cell ({row}, {col}) "
                f"outside {grid_h}x{grid_w} grid"
            )
        if cells[row, col] != CELL_ABSENT:
            raise DecisionError(f"duplicate cell ({row}, {col}) in map")
        cells[row, col] = _CLASS_TO_CODE[cls]
    return LocalizationMap(
        slide_id=sid or "", grid_width=grid_w, grid_height=grid_h, cells=cells
    )


def malignancy_ratio(lmap: LocalizationMap) -> tuple[float, bool]:
    """Malignant cells over malignant+benign cells.

    Normal, unseen, and background cells do not count. When no lesion
    cells exist at all the ratio is 0/0; by convention this returns
    (0.0, True) so callers can flag the degenerate slide.
    """
    counts = lmap.counts()
    malignant = counts[PatchClass.MALIGNANT]
    benign = counts[PatchClass.BENIGN]
    if malignant + benign == 0:
        return 0.0, True
    return malignant / (malignant + benign), False


def slide_verdict(
    rho: float,
    t_r: float = DEFAULT_T_R,
    no_lesion: bool = False,
    slide_id: str = "",
    t_p: float = DEFAULT_T_P,
    counts: dict | None = None,
) -> SlideVerdict:
    """Melanoma when the malignancy ratio reaches `t_r` (boundary inclusive)."""
    if not 0.0 <= rho <= 1.0:
        raise DecisionError(f"rho must be in [0, 1], got {rho}")
    if no_lesion:
        logger.warning("slide %s has no lesion cells; verdict defaults to benign nevus", slide_id)
    melanoma = rho >= t_r and not no_lesion
    return SlideVerdict(
        slide_id=slide_id,
        rho=rho,
        verdict=Verdict.MELANOMA if melanoma else Verdict.BENIGN_NEVUS,
        t_p=t_p,
        t_r=t_r,
        counts=counts or {},
        no_lesion_flag=no_lesion,
    )


def verdict_for_map(
    lmap: LocalizationMap, thresholds: Thresholds
) -> SlideVerdict:
    rho, no_lesion = malignancy_ratio(lmap)
    counts = {cls.value: n for cls, n in lmap.counts().items()}
    return slide_verdict(
        rho,
        t_r=thresholds.t_r,
        no_lesion=no_lesion,
        slide_id=lmap.slide_id,
        t_p=thresholds.t_p,
        counts=counts,
    )


# -- calibration ---------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationSlide:
    """Everything needed to re-derive one slide's verdict at any thresholds."""

    records: tuple[PatchRecord, ...]
    probabilities: tuple[ProbabilityVector, ...]
    truth: Verdict

    def __post_init__(self):
        if len(self.records) != len(self.probabilities):
            raise DecisionError("records and probabilities must align")


def calibrate(
    validation: Sequence[CalibrationSlide],
    t_p_grid: Sequence[float] = DEFAULT_T_P_GRID,
    t_r_grid: Sequence[float] = DEFAULT_T_R_GRID,
) -> Thresholds:
    """Exhaustive grid search for the operating point.

    Scores each (t_p, t_r) lexicographically by slide-level sensitivity,
    then specificity, then smaller t_r, so melanoma misses dominate the
    choice. The first grid point (scanning t_p then t_r ascending) that
    attains the best score wins, making the result deterministic.
    """
    if not validation:
        raise DecisionError("calibration requires a non-empty validation set")
    if not t_p_grid or not t_r_grid:
        raise DecisionError("calibration grids must be non-empty")
    truths = [slide.truth for slide in validation]
    n_melanoma = sum(1 for t in truths if t is Verdict.MELANOMA)
    n_benign = len(truths) - n_melanoma
    if n_melanoma == 0 or n_benign == 0:
        warnings.warn(
            "validation set contains a single truth class; "
            "the undefined rate is treated as 1.0",
            stacklevel=2,
        )

    best_score: tuple[float, float, float] | None = None
    best: tuple[float, float] | None = None
    for t_p in sorted(t_p_grid):
        # rho depends only on t_p; compute once per slide.
        rhos = []
        for slide in validation:
            classes = assign_classes(slide.probabilities, t_p)
            malignant = sum(1 for c in classes if c is PatchClass.MALIGNANT)
            benign = sum(1 for c in classes if c is PatchClass.BENIGN)
            if malignant + benign == 0:
                rhos.append(None)  # no lesion: always benign nevus
            else:
                rhos.append(malignant / (malignant + benign))
        for t_r in sorted(t_r_grid):
            tp = fn = fp = tn = 0
            for rho, truth in zip(rhos, truths):
                predicted_melanoma = rho is not None and rho >= t_r
                if truth is Verdict.MELANOMA:
                    tp += predicted_melanoma
                    fn += not predicted_melanoma
                else:
                    fp += predicted_melanoma
                    tn += not predicted_melanoma
            sensitivity = tp / n_melanoma if n_melanoma else 1.0
            specificity = tn / n_benign if n_benign else 1.0
            score = (sensitivity, specificity, -t_r)
            if best_score is None or score > best_score:
                best_score = score
                best = (t_p, t_r)
    assert best is not None
    return Thresholds(t_p=best[0], t_r=best[1])


# -- rendering -----------------------------------------------------------------


def render_map(lmap: LocalizationMap, scale: int = 1) -> np.ndarray:
    """Paint the map as an RGB image, one scale x scale block per cell."""
    if scale < 1:
        raise DecisionError(f"scale must be >= 1, got {scale}")
    palette = np.empty((5, 3), dtype=np.uint8)
    palette[4] = RENDER_PALETTE[None]
    for cls, code in _CLASS_TO_CODE.items():
        palette[code] = RENDER_PALETTE[cls]
    codes = np.where(lmap.cells == CELL_ABSENT, 4, lmap.cells).astype(np.intp)
    image = palette[codes]
    if scale > 1:
        image = np.repeat(np.repeat(image, scale, axis=0), scale, axis=1)
    return image


def write_verdict_json(verdict: SlideVerdict, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(verdict.to_json_dict(), indent=2, sort_keys=True) + "\n"
    )
