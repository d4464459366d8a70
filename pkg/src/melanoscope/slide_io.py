"""Multi-resolution slide reading and region annotations.

A slide is either a pyramid directory (``meta.json`` plus one PNG per
level) or a single raster file treated as a one-level pyramid. Vendor
scanner formats are out of scope; this format keeps slides reproducible
from plain files.

Region annotations are GeoJSON FeatureCollections of polygons with a
``label`` property, with vertex coordinates in level-0 pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .labels import Label, parse_label
from .png_io import PngRowReader, PngRowWriter, png_info

META_FILENAME = "meta.json"
DEFAULT_BASE_MAGNIFICATION = 40.0
DEFAULT_PIXEL_SIZE_UM = 0.2199
OOB_FILL = 255  # out-of-bounds reads are glass-white


class SlideError(Exception):
    """Slide files missing, malformed, or internally inconsistent."""


class AnnotationError(Exception):
    """Annotation file malformed or using labels outside the vocabulary."""


@dataclass(frozen=True)
class SlideHandle:
    """Immutable slide metadata; pixel data is only read on demand."""

    id: str
    base_width: int
    base_height: int
    level_downsamples: tuple[int, ...]
    base_magnification: float
    pixel_size_um: float
    level_files: tuple[Path, ...]

    @property
    def level_count(self) -> int:
        return len(self.level_downsamples)

    def level_dimensions(self, level: int) -> tuple[int, int]:
        ds = self.level_downsamples[self._check_level(level)]
        return (math.ceil(self.base_width / ds), math.ceil(self.base_height / ds))

    def level_magnification(self, level: int) -> float:
        return self.base_magnification / self.level_downsamples[self._check_level(level)]

    def _check_level(self, level: int) -> int:
        if not 0 <= level < self.level_count:
            raise SlideError(
                f"level {level} out of range [0, {self.level_count}) for slide {self.id}"
            )
        return level


@dataclass(frozen=True)
class RgbTile:
    """A decoded rectangle of pixels at some pyramid level."""

    origin_x: int
    origin_y: int
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(
                f"pixel buffer shape {self.pixels.shape} does not match "
                f"{self.height}x{self.width}x3"
            )


@dataclass(frozen=True)
class Region:
    polygon: tuple[tuple[float, float], ...]  # open ring, level-0 pixels
    label: Label


@dataclass(frozen=True)
class AnnotationSet:
    regions: tuple[Region, ...]


def open_slide(path: str | Path) -> SlideHandle:
    """Open a pyramid directory or single-image file.

    Level metadata is validated against the PNG headers; no pixel data is
    decoded here.
    """
    path = Path(path)
    if not path.exists():
        raise SlideError(f"slide not found: {path}")
    if path.is_dir():
        return _open_pyramid_dir(path)
    if path.suffix.lower() == ".png":
        info = png_info(path)
        return SlideHandle(
            id=path.stem,
            base_width=info.width,
            base_height=info.height,
            level_downsamples=(1,),
            base_magnification=DEFAULT_BASE_MAGNIFICATION,
            pixel_size_um=DEFAULT_PIXEL_SIZE_UM,
            level_files=(path,),
        )
    raise SlideError(f"unsupported slide format: {path} (expected directory or .png)")


def _open_pyramid_dir(path: Path) -> SlideHandle:
    meta_path = path / META_FILENAME
    if not meta_path.exists():
        raise SlideError(f"pyramid directory missing {META_FILENAME}: {path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SlideError(f"malformed {meta_path}: {exc}") from exc

    levels = meta.get("levels")
    if not levels:
        raise SlideError(f"{meta_path} declares no levels")
    downsamples = []
    files = []
    base_w = int(levels[0]["width"])
    base_h = int(levels[0]["height"])
    for i, entry in enumerate(levels):
        ds = int(entry["downsample"])
        downsamples.append(ds)
        level_file = path / entry["file"]
        if not level_file.exists():
            raise SlideError(f"declared level {i} missing: {level_file}")
        w, h = int(entry["width"]), int(entry["height"])
        if (w, h) != (math.ceil(base_w / ds), math.ceil(base_h / ds)):
            raise SlideError(
                f"level {i} of {path} declares {w}x{h}, expected "
                f"{math.ceil(base_w / ds)}x{math.ceil(base_h / ds)} from downsample {ds}"
            )
        info = png_info(level_file)
        if (info.width, info.height) != (w, h):
            raise SlideError(
                f"level {i} file {level_file} is {info.width}x{info.height}, "
                f"meta declares {w}x{h}"
            )
        files.append(level_file)
    if downsamples[0] != 1:
        raise SlideError(f"{meta_path}: level 0 downsample must be 1")
    if any(b <= a for a, b in zip(downsamples, downsamples[1:])):
        raise SlideError(f"{meta_path}: level downsamples must be strictly increasing")

    return SlideHandle(
        id=str(meta.get("id", path.name)),
        base_width=base_w,
        base_height=base_h,
        level_downsamples=tuple(downsamples),
        base_magnification=float(meta.get("base_magnification", DEFAULT_BASE_MAGNIFICATION)),
        pixel_size_um=float(meta.get("pixel_size_um", DEFAULT_PIXEL_SIZE_UM)),
        level_files=tuple(files),
    )


def read_region(
    slide: SlideHandle, level: int, x: int, y: int, w: int, h: int
) -> RgbTile:
    """Read a w*h rectangle at `level`; (x, y) are pixels at that level.

    The part of the rectangle outside the level extent is filled with
    white. Each call decodes independently, so concurrent reads are safe.
    """
    slide._check_level(level)
    if w <= 0 or h <= 0:
        raise SlideError(f"zero-area region request ({w}x{h})")
    level_w, level_h = slide.level_dimensions(level)
    out = np.full((h, w, 3), OOB_FILL, dtype=np.uint8)

    src_x0, src_y0 = max(x, 0), max(y, 0)
    src_x1, src_y1 = min(x + w, level_w), min(y + h, level_h)
    if src_x0 < src_x1 and src_y0 < src_y1:
        with PngRowReader(slide.level_files[level]) as reader:
            reader.skip_rows(src_y0)
            rows = reader.read_rows(src_y1 - src_y0)
        rows = _to_rgb(rows)
        out[src_y0 - y : src_y1 - y, src_x0 - x : src_x1 - x] = rows[
            :, src_x0:src_x1
        ]
    return RgbTile(origin_x=x, origin_y=y, width=w, height=h, pixels=out)


def iter_level_bands(
    slide: SlideHandle, level: int, band_rows: int = 256
) -> Iterator[tuple[int, np.ndarray]]:
    """Stream a whole level top-to-bottom as (y0, rows) bands.

    One decode pass for the level; memory stays bounded by the band size.
    """
    slide._check_level(level)
    with PngRowReader(slide.level_files[level]) as reader:
        for y0, rows in reader.iter_bands(band_rows):
            yield y0, _to_rgb(rows)


def _to_rgb(rows: np.ndarray) -> np.ndarray:
    if rows.shape[2] == 3:
        return rows
    if rows.shape[2] == 1:
        return np.repeat(rows, 3, axis=2)
    return rows[:, :, :3]  # drop alpha


def level_for_magnification(
    slide: SlideHandle, target_mag: float
) -> tuple[int, float]:
    """Map a target magnification to (level, residual_scale).

    Chooses the coarsest stored level whose magnification is still at or
    above the target; `residual_scale` (<= 1.0) is the extra resampling
    factor needed to land on the target exactly.
    """
    if target_mag <= 0:
        raise SlideError(f"target magnification must be positive, got {target_mag}")
    if target_mag > slide.base_magnification:
        raise SlideError(
            f"target magnification {target_mag} exceeds base "
            f"{slide.base_magnification} of slide {slide.id}"
        )
    best = 0
    for level in range(slide.level_count):
        if slide.level_magnification(level) >= target_mag:
            best = level
        else:
            break
    residual = target_mag / slide.level_magnification(best)
    return best, residual


# -- annotations --------------------------------------------------------------


def load_annotations(
    path: str | Path, bounds: tuple[int, int] | None = None
) -> AnnotationSet:
    """Load a GeoJSON FeatureCollection of labeled polygons.

    When `bounds` (width, height in level-0 pixels) is given, polygons are
    clipped to the slide rectangle; regions clipped away entirely are
    dropped.
    """
    path = Path(path)
    if not path.exists():
        raise AnnotationError(f"annotation file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"malformed GeoJSON in {path}: {exc}") from exc
    if doc.get("type") != "FeatureCollection":
        raise AnnotationError(f"{path}: expected a GeoJSON FeatureCollection")

    regions: list[Region] = []
    for i, feature in enumerate(doc.get("features", [])):
        geom = feature.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise AnnotationError(f"{path}: feature {i} is not a Polygon")
        coords = geom.get("coordinates") or []
        if not coords:
            raise AnnotationError(f"{path}: feature {i} has no rings")
        ring = [(float(px), float(py)) for px, py in coords[0]]
        if len(ring) >= 2 and ring[0] == ring[-1]:
            ring = ring[:-1]  # drop GeoJSON ring closure
        if len(ring) < 3:
            raise AnnotationError(
                f"{path}: feature {i} polygon has {len(ring)} vertices, need >= 3"
            )
        label_text = (feature.get("properties") or {}).get("label")
        if label_text is None:
            raise AnnotationError(f"{path}: feature {i} missing 'label' property")
        try:
            label = parse_label(str(label_text))
        except ValueError as exc:
            raise AnnotationError(f"{path}: feature {i}: {exc}") from exc
        if bounds is not None:
            ring = clip_polygon(ring, bounds[0], bounds[1])
            if len(ring) < 3:
                continue
        regions.append(Region(polygon=tuple(ring), label=label))
    return AnnotationSet(regions=tuple(regions))


def save_annotations(annotations: AnnotationSet, path: str | Path) -> None:
    """Write annotations back as GeoJSON (inverse of :func:`load_annotations`)."""
    features = []
    for region in annotations.regions:
        ring = [[px, py] for px, py in region.polygon]
        ring.append(ring[0])
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": {"label": region.label.value},
            }
        )
    doc = {"type": "FeatureCollection", "features": features}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def clip_polygon(
    ring: Sequence[tuple[float, float]], width: float, height: float
) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of a polygon to [0, width] x [0, height].

    Polygons already inside the rectangle are returned unchanged so that
    load/save round trips preserve vertices exactly.
    """
    if all(0 <= px <= width and 0 <= py <= height for px, py in ring):
        return list(ring)

    def clip_edge(points, inside, intersect):
        out = []
        n = len(points)
        for i in range(n):
            cur, nxt = points[i], points[(i + 1) % n]
            cur_in, nxt_in = inside(cur), inside(nxt)
            if cur_in:
                out.append(cur)
                if not nxt_in:
                    out.append(intersect(cur, nxt))
            elif nxt_in:
                out.append(intersect(cur, nxt))
        return out

    def cross_x(bound):
        def f(p, q):
            t = (bound - p[0]) / (q[0] - p[0])
            return (bound, p[1] + t * (q[1] - p[1]))

        return f

    def cross_y(bound):
        def f(p, q):
            t = (bound - p[1]) / (q[1] - p[1])
            return (p[0] + t * (q[0] - p[0]), bound)

        return f

    points = list(ring)
    for inside, intersect in (
        (lambda p: p[0] >= 0, cross_x(0.0)),
        (lambda p: p[0] <= width, cross_x(float(width))),
        (lambda p: p[1] >= 0, cross_y(0.0)),
        (lambda p: p[1] <= height, cross_y(float(height))),
    ):
        if not points:
            return []
        points = clip_edge(points, inside, intersect)
    # Collapse consecutive duplicates introduced by clipping at corners.
    deduped = [p for i, p in enumerate(points) if p != points[(i - 1) % len(points)]]
    return deduped if len(deduped) >= 3 else []


def write_pyramid(
    out_dir: str | Path,
    slide_id: str,
    level_arrays: Sequence[np.ndarray],
    base_magnification: float = DEFAULT_BASE_MAGNIFICATION,
    pixel_size_um: float = DEFAULT_PIXEL_SIZE_UM,
    compress_level: int = 6,
) -> Path:
    """Write in-memory level arrays as a pyramid directory.

    Convenience for tests and small slides; the synthetic generator streams
    levels itself for large images.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    base_h, base_w = level_arrays[0].shape[:2]
    for i, arr in enumerate(level_arrays):
        ds = 1 if i == 0 else round(base_w / arr.shape[1])
        name = f"level_{i}.png"
        with open(out_dir / name, "wb") as fh:
            with PngRowWriter(
                fh, arr.shape[1], arr.shape[0], 3, compress_level
            ) as writer:
                writer.write_rows(arr)
        entries.append(
            {"file": name, "width": arr.shape[1], "height": arr.shape[0], "downsample": ds}
        )
    meta = {
        "id": slide_id,
        "base_magnification": base_magnification,
        "pixel_size_um": pixel_size_um,
        "levels": entries,
    }
    (out_dir / META_FILENAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out_dir
