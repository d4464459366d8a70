"""Synthetic slide generation for end-to-end testing.

Slides are white glass with colored lesion discs whose base colors equal
the mock classifier's anchor palette, so the expected per-patch class and
the expected slide verdict are known by construction. Each slide is
written in the standard pyramid layout together with a GeoJSON annotation
(one 64-gon outline per disc) and a truth record.

Determinism: pixel jitter is a pure hash of (seed, x, y, channel), so the
output bytes depend only on the spec, never on band sizes or threading.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import ANCHOR_COLORS
from .decision import DEFAULT_T_R
from .labels import LABEL_TO_CODE, Label, Verdict
from .png_io import PngRowWriter
from .slide_io import META_FILENAME
from .tiling import DEFAULT_SAT_MIN, _hsv_channels, hue8

POLYGON_SIDES = 64
# Jitter cap keeping every pixel strictly nearest its own anchor (minimum
# anchor pair distance is ~87.2, and 2 * 10 * sqrt(3) < 87.2) and inside
# the hue/saturation foreground band.
MAX_JITTER = 10

_BACKGROUND = (255, 255, 255)


class SynthError(Exception):
    pass


@dataclass(frozen=True)
class Blob:
    label: Label
    center_x: float
    center_y: float
    radius: float

    @property
    def color(self) -> tuple[int, int, int]:
        return ANCHOR_COLORS[self.label]


@dataclass(frozen=True)
class SynthSpec:
    slide_id: str
    width: int
    height: int
    level_count: int = 3
    blobs: tuple[Blob, ...] = ()
    jitter: int = 6
    seed: int = 0
    base_magnification: float = 40.0
    pixel_size_um: float = 0.2199

    def __post_init__(self):
        factor = 1 << (self.level_count - 1)
        if self.level_count < 1:
            raise SynthError("level_count must be >= 1")
        if self.width % factor or self.height % factor:
            raise SynthError(
                f"dimensions {self.width}x{self.height} must be divisible by "
                f"{factor} for a {self.level_count}-level pyramid"
            )
        if not 0 <= self.jitter <= MAX_JITTER:
            raise SynthError(f"jitter must be in [0, {MAX_JITTER}], got {self.jitter}")
        for blob in self.blobs:
            if (
                blob.center_x - blob.radius < 0
                or blob.center_y - blob.radius < 0
                or blob.center_x + blob.radius > self.width
                or blob.center_y + blob.radius > self.height
            ):
                raise SynthError(
                    f"blob at ({blob.center_x}, {blob.center_y}) r={blob.radius} "
                    f"exceeds {self.width}x{self.height} slide bounds"
                )
            if blob.radius <= 0:
                raise SynthError("blob radius must be positive")


@dataclass(frozen=True)
class GeneratedSlide:
    pyramid_dir: Path
    annotation_path: Path
    truth_path: Path
    truth: dict = field(default_factory=dict)


def _hash_jitter(
    seed: int, xs: np.ndarray, ys: np.ndarray, jitter: int
) -> np.ndarray:
    """Uniform per-pixel, per-channel jitter in [-jitter, jitter].

    splitmix64-style mixing of the pixel position; position-keyed so the
    result is independent of generation order.
    """
    if jitter == 0:
        return np.zeros(xs.shape + (3,), dtype=np.int16)
    out = np.empty(xs.shape + (3,), dtype=np.int16)
    span = np.uint64(2 * jitter + 1)
    with np.errstate(over="ignore"):  # uint64 wraparound is the mixing step
        base = (
            xs.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
            ^ ys.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
            ^ np.uint64((seed * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF)
        )
        for c in range(3):
            z = base ^ np.uint64(((c + 1) * 0xD6E8FEB86659FD93) & 0xFFFFFFFFFFFFFFFF)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
            out[..., c] = (z % span).astype(np.int16) - jitter
    return out


def _paint_band(
    spec: SynthSpec, y0: int, band_h: int
) -> tuple[np.ndarray, np.ndarray]:
    """Render level-0 rows [y0, y0+band_h); returns (rgb, label codes)."""
    rgb = np.full((band_h, spec.width, 3), _BACKGROUND[0], dtype=np.uint8)
    codes = np.zeros((band_h, spec.width), dtype=np.uint8)
    for blob in spec.blobs:
        row_lo = max(y0, int(math.floor(blob.center_y - blob.radius)))
        row_hi = min(y0 + band_h, int(math.ceil(blob.center_y + blob.radius)) + 1)
        if row_lo >= row_hi:
            continue
        col_lo = max(0, int(math.floor(blob.center_x - blob.radius)))
        col_hi = min(spec.width, int(math.ceil(blob.center_x + blob.radius)) + 1)
        ys = np.arange(row_lo, row_hi)
        xs = np.arange(col_lo, col_hi)
        dy = (ys + 0.5 - blob.center_y) ** 2
        dx = (xs + 0.5 - blob.center_x) ** 2
        inside = dy[:, np.newaxis] + dx[np.newaxis, :] <= blob.radius**2
        if not inside.any():
            continue
        yy, xx = np.nonzero(inside)
        abs_y = yy + row_lo
        abs_x = xx + col_lo
        jit = _hash_jitter(spec.seed, abs_x, abs_y, spec.jitter)
        color = np.asarray(blob.color, dtype=np.int16)
        pixels = np.clip(color + jit, 0, 255).astype(np.uint8)
        band_rows = abs_y - y0
        rgb[band_rows, abs_x] = pixels
        codes[band_rows, abs_x] = LABEL_TO_CODE[blob.label]
    return rgb, codes


def _blob_polygon(blob: Blob) -> list[list[float]]:
    ring = []
    for k in range(POLYGON_SIDES):
        theta = 2.0 * math.pi * k / POLYGON_SIDES
        ring.append(
            [
                blob.center_x + blob.radius * math.cos(theta),
                blob.center_y + blob.radius * math.sin(theta),
            ]
        )
    ring.append(list(ring[0]))
    return ring


def generate_slide(spec: SynthSpec, out_dir: str | Path) -> GeneratedSlide:
    """Write the pyramid, annotations, and truth record for one spec.

    Pyramid levels are exact box means of level 0: per-level pixel sums
    are carried through the reduction and only rounded once at write time.
    """
    out_dir = Path(out_dir)
    pyramid_dir = out_dir / spec.slide_id
    pyramid_dir.mkdir(parents=True, exist_ok=True)

    factor = 1 << (spec.level_count - 1)
    # Bands must stay multiples of the coarsest downsample so every level
    # advances in lockstep within a band.
    band_h = min(spec.height, factor * max(1, 256 // factor))
    writers = []
    files = []
    try:
        for i in range(spec.level_count):
            ds = 1 << i
            name = f"level_{i}.png"
            fh = open(pyramid_dir / name, "wb")
            writers.append(
                PngRowWriter(
                    fh,
                    spec.width // ds,
                    spec.height // ds,
                    channels=3,
                    compress_level=1,
                )
            )
            files.append(fh)

        label_pixels = np.zeros(4, dtype=np.int64)
        for y0 in range(0, spec.height, band_h):
            h = min(band_h, spec.height - y0)
            rgb, codes = _paint_band(spec, y0, h)
            label_pixels += np.bincount(codes.ravel(), minlength=4)
            writers[0].write_rows(rgb)
            sums = rgb.astype(np.uint32)
            for i in range(1, spec.level_count):
                sums = (
                    sums.reshape(sums.shape[0] // 2, 2, sums.shape[1] // 2, 2, 3)
                    .sum(axis=(1, 3))
                )
                denom = 1 << (2 * i)
                level_rows = ((sums + denom // 2) // denom).astype(np.uint8)
                writers[i].write_rows(level_rows)
        for writer in writers:
            writer.close()
    finally:
        for fh in files:
            fh.close()

    entries = [
        {
            "file": f"level_{i}.png",
            "width": spec.width >> i,
            "height": spec.height >> i,
            "downsample": 1 << i,
        }
        for i in range(spec.level_count)
    ]
    meta = {
        "id": spec.slide_id,
        "base_magnification": spec.base_magnification,
        "pixel_size_um": spec.pixel_size_um,
        "levels": entries,
    }
    (pyramid_dir / META_FILENAME).write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )

    features = [
        {
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [_blob_polygon(blob)]},
            "properties": {"label": blob.label.value},
        }
        for blob in spec.blobs
    ]
    annotation_path = out_dir / f"{spec.slide_id}.annotations.json"
    annotation_path.write_text(
        json.dumps({"type": "FeatureCollection", "features": features}, indent=2, sort_keys=True)
        + "\n"
    )

    areas = {
        label.value: int(label_pixels[LABEL_TO_CODE[label]]) for label in Label
    }
    lesion = areas["malignant"] + areas["benign"]
    melanoma = lesion > 0 and areas["malignant"] / lesion >= DEFAULT_T_R
    truth = {
        "slide_id": spec.slide_id,
        "verdict": (Verdict.MELANOMA if melanoma else Verdict.BENIGN_NEVUS).value,
        "areas": areas,
    }
    truth_path = out_dir / f"{spec.slide_id}.truth.json"
    truth_path.write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return GeneratedSlide(
        pyramid_dir=pyramid_dir,
        annotation_path=annotation_path,
        truth_path=truth_path,
        truth=truth,
    )


def random_spec(
    slide_id: str,
    rng: np.random.Generator,
    width: int = 4096,
    height: int = 4096,
    level_count: int = 3,
    max_blobs: int = 4,
    labels: tuple[Label, ...] = (Label.BENIGN, Label.MALIGNANT, Label.NORMAL),
) -> SynthSpec:
    """Draw a random blob layout; blob colors follow their labels."""
    n = int(rng.integers(1, max_blobs + 1))
    blobs = []
    for _ in range(n):
        radius = float(rng.uniform(min(width, height) / 16, min(width, height) / 6))
        cx = float(rng.uniform(radius, width - radius))
        cy = float(rng.uniform(radius, height - radius))
        label = labels[int(rng.integers(0, len(labels)))]
        blobs.append(Blob(label=label, center_x=cx, center_y=cy, radius=radius))
    return SynthSpec(
        slide_id=slide_id,
        width=width,
        height=height,
        level_count=level_count,
        blobs=tuple(blobs),
        seed=int(rng.integers(0, 2**31)),
    )


def anchor_passes_foreground(color: tuple[int, int, int]) -> bool:
    """True when a palette color lands inside the default tissue band."""
    h, s, _ = _hsv_channels(np.asarray(color, dtype=np.uint8))
    h8 = int(hue8(h))
    return bool(s >= DEFAULT_SAT_MIN and 100 <= h8 <= 180)
