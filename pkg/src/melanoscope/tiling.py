"""Tissue segmentation, patch planning, and patch preprocessing.

The pipeline here: threshold hue to find stained tissue, rasterize the
pathologist polygons to a label mask, lay a non-overlapping 256-grid over
the level, and keep cells where at least ``overlap_min`` of the pixels are
simultaneously tissue and inside one annotation label. Kept cells become
patch records that are extracted on the fly, never buffering a whole
level.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
from matplotlib.path import Path as _PolygonPath
from PIL import Image

from .labels import CODE_TO_LABEL, LABEL_TO_CODE, Label
from .png_io import PngRowReader
from .slide_io import AnnotationSet, RgbTile, SlideHandle, SlideError, read_region

PATCH_SIZE = 256
TENSOR_SIZE = 224
DEFAULT_HUE8_RANGE = (100, 180)
DEFAULT_SAT_MIN = 0.05
DEFAULT_OVERLAP_MIN = 0.70


class TilingError(Exception):
    pass


@dataclass(frozen=True)
class BinaryMask:
    level: int
    width: int
    height: int
    bits: np.ndarray  # (height, width) bool

    def __post_init__(self):
        if self.bits.shape != (self.height, self.width):
            raise ValueError("mask bits shape does not match declared extent")


@dataclass(frozen=True)
class LabelMask:
    level: int
    width: int
    height: int
    cells: np.ndarray  # (height, width) uint8 codes; 0 = outside all polygons

    def __post_init__(self):
        if self.cells.shape != (self.height, self.width):
            raise ValueError("label mask shape does not match declared extent")


@dataclass(frozen=True)
class PatchRecord:
    """One planned patch: level-0 origin plus its extraction level."""

    slide_id: str
    x: int
    y: int
    level: int
    size_px: int = PATCH_SIZE
    ground_label: Label | None = None
    qualifying_fraction: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "x": self.x,
            "y": self.y,
            "level": self.level,
            "size_px": self.size_px,
            "ground_label": self.ground_label.value if self.ground_label else None,
            "qualifying_fraction": self.qualifying_fraction,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "PatchRecord":
        label = d.get("ground_label")
        return PatchRecord(
            slide_id=d["slide_id"],
            x=int(d["x"]),
            y=int(d["y"]),
            level=int(d["level"]),
            size_px=int(d["size_px"]),
            ground_label=Label(label) if label else None,
            qualifying_fraction=float(d["qualifying_fraction"]),
        )


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float]  # per channel, [0, 1] intensity scale
    std: tuple[float, float, float]

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError(f"per-channel std must be positive, got {self.std}")


IDENTITY_STATS = NormalizationStats(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))


# -- color space ---------------------------------------------------------------


def _hsv_channels(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hexcone HSV for a (..., 3) uint8 array; returns h in [0,1), s, v.

    Mirrors the classic colorsys formulation so scalar and vectorized
    paths agree bit for bit.
    """
    arr = rgb.astype(np.float64) / 255.0
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    delta = maxc - minc
    chromatic = delta > 0
    safe_delta = np.where(chromatic, delta, 1.0)
    safe_max = np.where(maxc > 0, maxc, 1.0)
    s = np.where(chromatic, delta / safe_max, 0.0)
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    h = np.where(
        r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc)
    )
    h = np.where(chromatic, (h / 6.0) % 1.0, 0.0)
    return h, s, v


def rgb_to_hsv(pixel: Sequence[int]) -> tuple[float, float, float]:
    """Convert one 8-bit RGB pixel to (hue degrees [0, 360), sat, value)."""
    h, s, v = _hsv_channels(np.asarray(pixel, dtype=np.uint8))
    return float(h * 360.0), float(s), float(v)


def hue8(h_fraction: np.ndarray) -> np.ndarray:
    """Half-degree 8-bit hue scale: round(degrees / 2), range [0, 180]."""
    return np.rint(h_fraction * 180.0).astype(np.int64)


def foreground_mask(
    tile: RgbTile,
    hue8_range: tuple[int, int] = DEFAULT_HUE8_RANGE,
    sat_min: float = DEFAULT_SAT_MIN,
    level: int = 0,
) -> BinaryMask:
    """Mark stained tissue: saturation at least `sat_min` and hue (on the
    half-degree 8-bit scale) inside `hue8_range`.

    The default [100, 180] band captures H&E purple and pink; achromatic
    pixels are background because hue is undefined there.
    """
    lo, hi = hue8_range
    if lo > hi:
        raise TilingError(f"inverted hue range [{lo}, {hi}]")
    if lo < 0 or hi > 180:
        raise TilingError(f"hue8 range [{lo}, {hi}] outside [0, 180]")
    h, s, _v = _hsv_channels(tile.pixels)
    h8 = hue8(h)
    bits = (s >= sat_min) & (h8 >= lo) & (h8 <= hi)
    return BinaryMask(level=level, width=tile.width, height=tile.height, bits=bits)


# -- annotation rasterization --------------------------------------------------


def rasterize_annotations(
    annotations: AnnotationSet,
    level: int,
    width: int,
    height: int,
    downsample: float = 1.0,
) -> LabelMask:
    """Paint polygons into a label mask at `level`.

    A pixel takes the label of the polygon containing its center (centers
    at level-0 coordinates (col + 0.5, row + 0.5) * downsample);
    later-listed polygons overwrite earlier ones.
    """
    if width <= 0 or height <= 0:
        raise TilingError(f"mask extent {width}x{height} is empty")
    cells = np.zeros((height, width), dtype=np.uint8)
    for region in annotations.regions:
        xs = [p[0] for p in region.polygon]
        ys = [p[1] for p in region.polygon]
        # Pixel centers live at (i + 0.5) * downsample; restrict to the
        # polygon's bounding box to keep containment tests small.
        col0 = max(0, math.ceil(min(xs) / downsample - 0.5))
        col1 = min(width - 1, math.floor(max(xs) / downsample - 0.5))
        row0 = max(0, math.ceil(min(ys) / downsample - 0.5))
        row1 = min(height - 1, math.floor(max(ys) / downsample - 0.5))
        if col0 > col1 or row0 > row1:
            continue
        cols = (np.arange(col0, col1 + 1) + 0.5) * downsample
        rows = (np.arange(row0, row1 + 1) + 0.5) * downsample
        cx, cy = np.meshgrid(cols, rows)
        points = np.column_stack([cx.ravel(), cy.ravel()])
        path = _PolygonPath(np.asarray(region.polygon, dtype=np.float64), closed=False)
        inside = path.contains_points(points).reshape(cy.shape)
        block = cells[row0 : row1 + 1, col0 : col1 + 1]
        block[inside] = LABEL_TO_CODE[region.label]
    return LabelMask(level=level, width=width, height=height, cells=cells)


# -- patch planning ------------------------------------------------------------


def plan_patches(
    slide: SlideHandle,
    fg: BinaryMask,
    labels: LabelMask,
    patch_size: int = PATCH_SIZE,
    overlap_min: float = DEFAULT_OVERLAP_MIN,
    target_mag: float | None = None,
    independent_tests: bool = False,
) -> list[PatchRecord]:
    """Plan the non-overlapping patch grid over one level.

    A grid cell becomes a record for label L when at least `overlap_min`
    of its pixels are foreground AND inside an L polygon (the conjunction
    reading of the 70% rule). With `independent_tests` the foreground and
    label fractions are thresholded separately instead; that variant is
    provided for comparison only. Cells that would extend past the level
    extent are never planned. Largest fraction wins a cell; ties break in
    class order.
    """
    if fg.level != labels.level:
        raise TilingError(f"mask level mismatch: fg {fg.level} vs labels {labels.level}")
    if (fg.width, fg.height) != (labels.width, labels.height):
        raise TilingError(
            f"mask extent mismatch: fg {fg.width}x{fg.height} "
            f"vs labels {labels.width}x{labels.height}"
        )
    level_w, level_h = slide.level_dimensions(fg.level)
    if (fg.width, fg.height) != (level_w, level_h):
        raise TilingError(
            f"masks are {fg.width}x{fg.height} but slide level {fg.level} "
            f"is {level_w}x{level_h}"
        )
    if not 0 < overlap_min <= 1:
        raise TilingError(f"overlap_min must be in (0, 1], got {overlap_min}")
    if target_mag is not None:
        expected = slide.base_magnification / slide.level_downsamples[fg.level]
        if not math.isclose(expected, target_mag, rel_tol=1e-9):
            raise TilingError(
                f"masks at level {fg.level} ({expected}x) do not match "
                f"target magnification {target_mag}x"
            )

    grid_w = fg.width // patch_size
    grid_h = fg.height // patch_size
    if grid_w == 0 or grid_h == 0:
        return []
    crop_h, crop_w = grid_h * patch_size, grid_w * patch_size
    fg_bits = fg.bits[:crop_h, :crop_w]
    label_cells = labels.cells[:crop_h, :crop_w]

    def cell_sums(mask: np.ndarray) -> np.ndarray:
        return (
            mask.reshape(grid_h, patch_size, grid_w, patch_size)
            .sum(axis=(1, 3))
            .astype(np.int64)
        )

    per_label = []
    for label in (Label.BENIGN, Label.MALIGNANT, Label.NORMAL):
        code = LABEL_TO_CODE[label]
        if independent_tests:
            per_label.append(cell_sums(label_cells == code))
        else:
            per_label.append(cell_sums(fg_bits & (label_cells == code)))
    counts = np.stack(per_label)  # (3, grid_h, grid_w)
    best_idx = counts.argmax(axis=0)  # ties -> lowest index = class order
    best_count = np.take_along_axis(counts, best_idx[np.newaxis], axis=0)[0]
    total = patch_size * patch_size
    fraction = best_count / total
    keep = fraction >= overlap_min
    if independent_tests:
        keep &= cell_sums(fg_bits) / total >= overlap_min

    ds = slide.level_downsamples[fg.level]
    records = []
    for gy, gx in np.argwhere(keep):
        label = CODE_TO_LABEL[int(best_idx[gy, gx]) + 1]
        records.append(
            PatchRecord(
                slide_id=slide.id,
                x=int(gx) * patch_size * ds,
                y=int(gy) * patch_size * ds,
                level=fg.level,
                size_px=patch_size,
                ground_label=label,
                qualifying_fraction=float(fraction[gy, gx]),
            )
        )
    return records


def plan_tissue_patches(
    slide: SlideHandle,
    fg: BinaryMask,
    patch_size: int = PATCH_SIZE,
    overlap_min: float = DEFAULT_OVERLAP_MIN,
) -> list[PatchRecord]:
    """Plan unlabeled patches over all tissue, ignoring annotations.

    Used for whole-slide inference on slides without (or beyond) annotated
    regions; records carry no ground label.
    """
    grid_w = fg.width // patch_size
    grid_h = fg.height // patch_size
    if grid_w == 0 or grid_h == 0:
        return []
    crop = fg.bits[: grid_h * patch_size, : grid_w * patch_size]
    sums = crop.reshape(grid_h, patch_size, grid_w, patch_size).sum(axis=(1, 3))
    fraction = sums / (patch_size * patch_size)
    keep = fraction >= overlap_min
    ds = slide.level_downsamples[fg.level]
    return [
        PatchRecord(
            slide_id=slide.id,
            x=int(gx) * patch_size * ds,
            y=int(gy) * patch_size * ds,
            level=fg.level,
            size_px=patch_size,
            ground_label=None,
            qualifying_fraction=float(fraction[gy, gx]),
        )
        for gy, gx in np.argwhere(keep)
    ]


# -- extraction ----------------------------------------------------------------


def _level_origin(rec: PatchRecord, slide: SlideHandle) -> tuple[int, int]:
    ds = slide.level_downsamples[rec.level]
    return rec.x // ds, rec.y // ds


def _check_record_bounds(rec: PatchRecord, slide: SlideHandle) -> tuple[int, int]:
    x_lv, y_lv = _level_origin(rec, slide)
    level_w, level_h = slide.level_dimensions(rec.level)
    if x_lv < 0 or y_lv < 0 or x_lv + rec.size_px > level_w or y_lv + rec.size_px > level_h:
        raise TilingError(
            f"patch record at ({rec.x}, {rec.y}) level {rec.level} exceeds "
            f"level extent {level_w}x{level_h}"
        )
    return x_lv, y_lv


def extract_patch(slide: SlideHandle, rec: PatchRecord) -> RgbTile:
    """Read exactly one patch rectangle; never buffers the slide."""
    x_lv, y_lv = _check_record_bounds(rec, slide)
    return read_region(slide, rec.level, x_lv, y_lv, rec.size_px, rec.size_px)


def iter_patches(
    slide: SlideHandle,
    records: Sequence[PatchRecord],
    band_rows: int = 64,
) -> Iterator[tuple[int, RgbTile]]:
    """Stream (index, tile) pairs for planner output in one decode pass
    per level.

    Records must be grouped by level and sorted by (y, x), as the planner
    emits them. Peak memory is one band of level rows plus the tiles of a
    single grid row, regardless of slide size.
    """
    by_level: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        by_level.setdefault(rec.level, []).append(i)

    for level in sorted(by_level):
        idxs = by_level[level]
        coords = {}
        for i in idxs:
            coords[i] = _check_record_bounds(records[i], slide)
        keys = [(coords[i][1], coords[i][0]) for i in idxs]
        if keys != sorted(keys):
            raise TilingError("records must be sorted by (y, x) within a level")

        with PngRowReader(slide.level_files[level]) as reader:
            pos = 0
            k = 0
            while k < len(idxs):
                # Cohort of records sharing one grid row.
                y_lv = coords[idxs[k]][1]
                size = records[idxs[k]].size_px
                cohort = []
                while k < len(idxs) and coords[idxs[k]][1] == y_lv:
                    if records[idxs[k]].size_px != size:
                        raise TilingError("records in one grid row must share size_px")
                    cohort.append(idxs[k])
                    k += 1
                if y_lv > pos:
                    reader.skip_rows(y_lv - pos)
                    pos = y_lv
                bufs = {i: np.empty((size, size, 3), dtype=np.uint8) for i in cohort}
                filled = 0
                while filled < size:
                    n = min(band_rows, size - filled)
                    band = reader.read_rows(n)
                    if band.shape[2] != 3:
                        band = band[:, :, :3] if band.shape[2] == 4 else np.repeat(band, 3, axis=2)
                    for i in cohort:
                        x_lv = coords[i][0]
                        bufs[i][filled : filled + n] = band[:, x_lv : x_lv + size]
                    filled += n
                pos = y_lv + size
                for i in cohort:
                    rec = records[i]
                    yield i, RgbTile(
                        origin_x=coords[i][0],
                        origin_y=coords[i][1],
                        width=size,
                        height=size,
                        pixels=bufs.pop(i),
                    )


# -- preprocessing -------------------------------------------------------------


def compute_channel_stats(tiles: Iterable[RgbTile]) -> NormalizationStats:
    """Single-pass per-channel mean/std over every pixel, on [0, 1] scale."""
    n = 0
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    for tile in tiles:
        arr = tile.pixels.reshape(-1, 3).astype(np.float64) / 255.0
        n += arr.shape[0]
        total += arr.sum(axis=0)
        total_sq += (arr * arr).sum(axis=0)
    if n == 0:
        raise TilingError("cannot compute channel statistics from an empty stream")
    mean = total / n
    var = total_sq / n - mean * mean
    if np.any(var < 1e-12):
        raise TilingError(
            f"zero-variance channel in statistics (variances {var.tolist()})"
        )
    std = np.sqrt(var)
    return NormalizationStats(mean=tuple(mean.tolist()), std=tuple(std.tolist()))


def normalize_patch(tile: RgbTile, stats: NormalizationStats) -> np.ndarray:
    """Bilinear-resize to 224x224 and standardize; returns (3, 224, 224) float32."""
    if tile.width != tile.height:
        raise TilingError(f"patch must be square, got {tile.width}x{tile.height}")
    image = Image.fromarray(tile.pixels, mode="RGB")
    if tile.width != TENSOR_SIZE:
        image = image.resize((TENSOR_SIZE, TENSOR_SIZE), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    mean = np.asarray(stats.mean, dtype=np.float32)
    std = np.asarray(stats.std, dtype=np.float32)
    return np.ascontiguousarray(((arr - mean) / std).transpose(2, 0, 1))


def denormalize_patch(tensor: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Inverse of :func:`normalize_patch` up to the resize; (224, 224, 3) floats in [0,1]."""
    mean = np.asarray(stats.mean, dtype=np.float32)
    std = np.asarray(stats.std, dtype=np.float32)
    return tensor.transpose(1, 2, 0) * std + mean


def augment_patch(tile: RgbTile, seed: int) -> RgbTile:
    """Random 224-crop plus one of the 6 axis-aligned flips/rotations.

    Purely geometric, so the output pixel multiset is a subset of the
    input's; fully determined by (tile, seed).
    """
    if tile.width < TENSOR_SIZE or tile.height < TENSOR_SIZE:
        raise TilingError(
            f"tile {tile.width}x{tile.height} smaller than {TENSOR_SIZE} crop"
        )
    rng = random.Random(seed)
    x = rng.randint(0, tile.width - TENSOR_SIZE)
    y = rng.randint(0, tile.height - TENSOR_SIZE)
    crop = tile.pixels[y : y + TENSOR_SIZE, x : x + TENSOR_SIZE]
    op = rng.randrange(6)
    if op == 1:
        crop = crop[:, ::-1]
    elif op == 2:
        crop = crop[::-1, :]
    elif op >= 3:
        crop = np.rot90(crop, k=op - 2)
    return RgbTile(
        origin_x=tile.origin_x + x,
        origin_y=tile.origin_y + y,
        width=TENSOR_SIZE,
        height=TENSOR_SIZE,
        pixels=np.ascontiguousarray(crop),
    )
