"""File-based pipeline stages.

Every stage reads and writes plain artifacts (JSON / JSONL / PNG) in the
output directory, so stages can run separately or chained, resume, and be
diffed byte-for-byte. Timing goes into a sidecar (`run_info.json`) that is
excluded from determinism comparisons.

Stage map: extract -> infer -> map -> verdict, plus segment, calibrate,
evaluate, and synth on the side.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import decision, evaluation, tiling
from .classifier import (
    Backend,
    BackendDescriptor,
    ProbabilityVector,
    load_backend,
    predict,
)
from .labels import Label, Verdict
from .png_io import read_png, write_png
from .slide_io import (
    AnnotationSet,
    RgbTile,
    SlideHandle,
    iter_level_bands,
    load_annotations,
    open_slide,
    read_region,
)
from .synthgen import SynthSpec, generate_slide, random_spec
from .tiling import BinaryMask, LabelMask, NormalizationStats, PatchRecord

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
PROBS_NAME = "probs.jsonl"
MAP_JSON_NAME = "map.json"
MAP_PNG_NAME = "map.png"
MAP_COMPOSITE_NAME = "map_composite.png"
VERDICT_NAME = "verdict.json"
METRICS_JSON_NAME = "metrics.json"
METRICS_CSV_NAME = "metrics.csv"
THRESHOLDS_NAME = "thresholds.json"
RUN_INFO_NAME = "run_info.json"
FOREGROUND_NAME = "foreground.png"
DATASET_DIR = "dataset"
UNLABELED_DIR = "unlabeled"

SEGMENT_BAND_ROWS = 512


class ConfigError(Exception):
    """Invalid configuration; maps to CLI exit status 1."""


class PipelineError(Exception):
    """Runtime failure inside a stage; maps to CLI exit status 2."""


@dataclass(frozen=True)
class PipelineConfig:
    slide: str = ""
    annotations: str | None = None
    magnification: float = 10.0
    patch_size: int = 256
    overlap_min: float = tiling.DEFAULT_OVERLAP_MIN
    hue_range: tuple[int, int] = tiling.DEFAULT_HUE8_RANGE
    sat_min: float = tiling.DEFAULT_SAT_MIN
    backend: str = "mock"
    arity: str = "multiclass"
    model: str | None = None
    t_p: float = decision.DEFAULT_T_P
    t_r: float = decision.DEFAULT_T_R
    batch_size: int = 256
    workers: int = 1
    out: str = "out"
    seed: int = 0
    map_scale: int = 8
    composite: bool = False
    tissue_only: bool = False
    balance: bool = False
    stats_file: str | None = None
    time_budget: float | None = None

    def validated(self) -> "PipelineConfig":
        checks = [
            (self.magnification > 0, f"magnification must be positive, got {self.magnification}"),
            (self.patch_size >= 32, f"patch_size must be >= 32, got {self.patch_size}"),
            (0 < self.overlap_min <= 1, f"overlap_min must be in (0, 1], got {self.overlap_min}"),
            (
                0 <= self.hue_range[0] <= self.hue_range[1] <= 180,
                f"hue range {self.hue_range} must be ordered within [0, 180]",
            ),
            (0 <= self.sat_min <= 1, f"sat_min must be in [0, 1], got {self.sat_min}"),
            (self.backend in ("mock", "neural"), f"unknown backend {self.backend!r}"),
            (self.arity in ("binary", "multiclass"), f"unknown arity {self.arity!r}"),
            (0 < self.t_p <= 1, f"t_p must be in (0, 1], got {self.t_p}"),
            (0 <= self.t_r <= 1, f"t_r must be in [0, 1], got {self.t_r}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.workers >= 1, f"workers must be >= 1, got {self.workers}"),
            (self.map_scale >= 1, f"map_scale must be >= 1, got {self.map_scale}"),
            (
                self.backend != "neural" or self.model is not None,
                "neural backend requires --model",
            ),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    @staticmethod
    def from_file(path: str | Path) -> "PipelineConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        known = {f.name for f in PipelineConfig.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "hue_range" in raw:
            raw["hue_range"] = tuple(raw["hue_range"])
        return PipelineConfig(**raw)

    def with_overrides(self, **kwargs) -> "PipelineConfig":
        provided = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **provided)


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- mask construction ---------------------------------------------------------


def choose_level(slide: SlideHandle, magnification: float) -> int:
    from .slide_io import level_for_magnification

    level, residual = level_for_magnification(slide, magnification)
    if abs(residual - 1.0) > 1e-9:
        raise ConfigError(
            f"slide {slide.id} has no stored level at {magnification}x "
            f"(closest level needs residual scale {residual:.4f}); "
            "regenerate the pyramid or pick a stored magnification"
        )
    return level


def foreground_for_slide(slide: SlideHandle, cfg: PipelineConfig, level: int) -> BinaryMask:
    """Whole-level foreground mask, streamed band by band."""
    width, height = slide.level_dimensions(level)
    bits = np.empty((height, width), dtype=bool)
    for y0, rows in iter_level_bands(slide, level, SEGMENT_BAND_ROWS):
        tile = RgbTile(
            origin_x=0, origin_y=y0, width=width, height=rows.shape[0], pixels=rows
        )
        band_mask = tiling.foreground_mask(tile, cfg.hue_range, cfg.sat_min, level)
        bits[y0 : y0 + rows.shape[0]] = band_mask.bits
    return BinaryMask(level=level, width=width, height=height, bits=bits)


def labels_for_slide(
    slide: SlideHandle, annotations: AnnotationSet, level: int
) -> LabelMask:
    width, height = slide.level_dimensions(level)
    return tiling.rasterize_annotations(
        annotations, level, width, height, downsample=slide.level_downsamples[level]
    )


def plan_for_slide(
    slide: SlideHandle, cfg: PipelineConfig
) -> tuple[int, list[PatchRecord]]:
    level = choose_level(slide, cfg.magnification)
    fg = foreground_for_slide(slide, cfg, level)
    if cfg.tissue_only:
        records = tiling.plan_tissue_patches(slide, fg, cfg.patch_size, cfg.overlap_min)
    else:
        if cfg.annotations is None:
            raise ConfigError("annotation file required unless tissue_only is set")
        annotations = load_annotations(
            cfg.annotations, bounds=(slide.base_width, slide.base_height)
        )
        labels = labels_for_slide(slide, annotations, level)
        records = tiling.plan_patches(
            slide, fg, labels, cfg.patch_size, cfg.overlap_min, cfg.magnification
        )
    return level, records


# -- extract stage -------------------------------------------------------------


def patch_filename(rec: PatchRecord) -> str:
    return f"{rec.slide_id}_{rec.x}_{rec.y}_{rec.level}.png"


def patch_relpath(rec: PatchRecord) -> str:
    label_dir = rec.ground_label.value if rec.ground_label else UNLABELED_DIR
    return f"{DATASET_DIR}/{label_dir}/{patch_filename(rec)}"


def _extract_chunk(args: tuple[str, list[dict]]) -> list[bytes]:
    """Worker body: extract a contiguous, sorted chunk of records."""
    slide_path, record_dicts = args
    slide = open_slide(slide_path)
    records = [PatchRecord.from_json_dict(d) for d in record_dicts]
    return [tile.pixels.tobytes() for _, tile in tiling.iter_patches(slide, records)]


def _iter_extracted_tiles(
    slide: SlideHandle, records: Sequence[PatchRecord], workers: int, slide_path: str
):
    """Yield (index, RgbTile) in record order, optionally via worker processes."""
    if workers <= 1 or len(records) < 2:
        yield from tiling.iter_patches(slide, records)
        return
    chunk_count = min(workers, len(records))
    bounds = np.linspace(0, len(records), chunk_count + 1, dtype=int)
    chunks = []
    for a, b in zip(bounds, bounds[1:]):
        if a < b:
            chunks.append((slide_path, [r.to_json_dict() for r in records[a:b]]))
    offsets = np.cumsum([0] + [len(c[1]) for c in chunks])
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for chunk_idx, chunk_tiles in enumerate(pool.map(_extract_chunk, chunks)):
            base = int(offsets[chunk_idx])
            for j, buf in enumerate(chunk_tiles):
                rec = records[base + j]
                ds = slide.level_downsamples[rec.level]
                pixels = np.frombuffer(buf, dtype=np.uint8).reshape(
                    rec.size_px, rec.size_px, 3
                )
                yield base + j, RgbTile(
                    origin_x=rec.x // ds,
                    origin_y=rec.y // ds,
                    width=rec.size_px,
                    height=rec.size_px,
                    pixels=pixels,
                )


def run_extract(cfg: PipelineConfig) -> Path:
    """Plan patches, export the dataset tree, and write the manifest."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    slide = open_slide(cfg.slide)
    level, records = plan_for_slide(slide, cfg)
    ds = slide.level_downsamples[level]
    level_w, level_h = slide.level_dimensions(level)

    n = 0
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    counts_by_label: dict[str, int] = {}
    for label in Label:
        (out / DATASET_DIR / label.value).mkdir(parents=True, exist_ok=True)
    (out / DATASET_DIR / UNLABELED_DIR).mkdir(parents=True, exist_ok=True)

    for idx, tile in _iter_extracted_tiles(slide, records, cfg.workers, cfg.slide):
        rec = records[idx]
        write_png(out / patch_relpath(rec), tile.pixels)
        arr = tile.pixels.reshape(-1, 3).astype(np.float64) / 255.0
        n += arr.shape[0]
        total += arr.sum(axis=0)
        total_sq += (arr * arr).sum(axis=0)
        key = rec.ground_label.value if rec.ground_label else UNLABELED_DIR
        counts_by_label[key] = counts_by_label.get(key, 0) + 1

    stats = None
    if n:
        mean = total / n
        var = total_sq / n - mean * mean
        if np.all(var >= 1e-12):
            std = np.sqrt(var)
            stats = {"mean": mean.tolist(), "std": std.tolist()}
        else:
            logger.warning("zero-variance channel; manifest carries no stats")

    augmented = []
    if cfg.balance and counts_by_label:
        augmented = _balance_dataset(out, records, counts_by_label, cfg.seed)

    manifest = {
        "slide_id": slide.id,
        "slide_path": str(cfg.slide),
        "annotation_path": cfg.annotations,
        "magnification": cfg.magnification,
        "level": level,
        "downsample": ds,
        "level_width": level_w,
        "level_height": level_h,
        "patch_size": cfg.patch_size,
        "stats": stats,
        "records": [r.to_json_dict() for r in records],
        "augmented": augmented,
    }
    _dump_json(manifest, out / MANIFEST_NAME)
    logger.info("extracted %d patches from %s at level %d", len(records), slide.id, level)
    return out / MANIFEST_NAME


def _balance_dataset(
    out: Path,
    records: Sequence[PatchRecord],
    counts: dict[str, int],
    seed: int,
) -> list[dict]:
    """Top up minority classes with augmented copies of their own patches."""
    labeled = {k: v for k, v in counts.items() if k != UNLABELED_DIR}
    if len(labeled) < 2:
        return []
    target = max(labeled.values())
    by_label: dict[str, list[PatchRecord]] = {}
    for rec in records:
        if rec.ground_label:
            by_label.setdefault(rec.ground_label.value, []).append(rec)
    augmented = []
    for label_name, members in sorted(by_label.items()):
        deficit = target - len(members)
        for k in range(deficit):
            src = members[k % len(members)]
            aug_seed = seed * 1_000_003 + len(augmented)
            tile_arr = read_png(out / patch_relpath(src))
            tile = RgbTile(0, 0, tile_arr.shape[1], tile_arr.shape[0], tile_arr)
            aug = tiling.augment_patch(tile, aug_seed)
            name = f"{src.slide_id}_{src.x}_{src.y}_{src.level}_aug{k}.png"
            rel = f"{DATASET_DIR}/{label_name}/{name}"
            write_png(out / rel, aug.pixels)
            augmented.append({"file": rel, "label": label_name, "seed": aug_seed})
    return augmented


# -- infer stage ---------------------------------------------------------------


def load_manifest(out_dir: str | Path) -> dict:
    path = Path(out_dir) / MANIFEST_NAME
    if not path.exists():
        raise PipelineError(f"missing manifest: {path} (run extract first)")
    return json.loads(path.read_text())


def stats_from_dict(d: dict | None) -> NormalizationStats:
    if not d:
        return tiling.IDENTITY_STATS
    return NormalizationStats(mean=tuple(d["mean"]), std=tuple(d["std"]))


def _predict_batches(
    backend: Backend,
    tensors: list[np.ndarray],
    batch_size: int,
    workers: int,
) -> list[ProbabilityVector]:
    batches = [tensors[i : i + batch_size] for i in range(0, len(tensors), batch_size)]
    if workers > 1 and backend.supports_concurrent_predict and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda b: predict(backend, b), batches))
    else:
        results = [predict(backend, b) for b in batches]
    return [vec for batch in results for vec in batch]


def run_infer(cfg: PipelineConfig) -> Path:
    """Classify every manifest record; one JSONL line per patch, in order."""
    out = Path(cfg.out)
    manifest = load_manifest(out)
    records = [PatchRecord.from_json_dict(d) for d in manifest["records"]]
    if cfg.stats_file:
        stats_doc = json.loads(Path(cfg.stats_file).read_text())
        stats = stats_from_dict(stats_doc.get("stats", stats_doc))
    else:
        stats = stats_from_dict(manifest.get("stats"))
    descriptor = BackendDescriptor(kind=cfg.backend, arity=cfg.arity, stats=stats)
    backend = load_backend(descriptor, cfg.model)

    lines = []
    if records:
        tensors = []
        for rec in records:
            arr = read_png(out / patch_relpath(rec))
            tile = RgbTile(0, 0, arr.shape[1], arr.shape[0], arr)
            tensors.append(tiling.normalize_patch(tile, stats))
        vectors = _predict_batches(backend, tensors, cfg.batch_size, cfg.workers)
        for i, (rec, vec) in enumerate(zip(records, vectors)):
            lines.append(
                json.dumps(
                    {
                        "index": i,
                        "slide_id": rec.slide_id,
                        "x": rec.x,
                        "y": rec.y,
                        "level": rec.level,
                        "probs": list(vec.probs),
                    },
                    sort_keys=True,
                )
            )
    (out / PROBS_NAME).write_text("\n".join(lines) + ("\n" if lines else ""))
    logger.info("classified %d patches with %s backend", len(records), cfg.backend)
    return out / PROBS_NAME


def load_probs(out_dir: str | Path) -> list[ProbabilityVector]:
    path = Path(out_dir) / PROBS_NAME
    if not path.exists():
        raise PipelineError(f"missing probabilities: {path} (run infer first)")
    vectors = []
    for line in path.read_text().splitlines():
        doc = json.loads(line)
        vectors.append(ProbabilityVector(probs=tuple(doc["probs"])))
    return vectors


# -- map / verdict stages --------------------------------------------------------


def run_map(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out)
    manifest = load_manifest(out)
    records = [PatchRecord.from_json_dict(d) for d in manifest["records"]]
    vectors = load_probs(out)
    if len(vectors) != len(records):
        raise PipelineError(
            f"{len(vectors)} probability lines for {len(records)} records; "
            "re-run infer after extract"
        )
    classes = decision.assign_classes(vectors, cfg.t_p)
    lmap = decision.build_map(
        records,
        classes,
        manifest["level_width"],
        manifest["level_height"],
        manifest["patch_size"],
        downsample=manifest["downsample"],
        slide_id=manifest["slide_id"],
    )
    _dump_json(lmap.to_json_dict(), out / MAP_JSON_NAME)
    rendered = decision.render_map(lmap, cfg.map_scale)
    write_png(out / MAP_PNG_NAME, rendered)
    if cfg.composite:
        slide = open_slide(manifest["slide_path"])
        write_png(out / MAP_COMPOSITE_NAME, _thumbnail_composite(slide, rendered))
    return out / MAP_JSON_NAME


def _thumbnail_composite(slide: SlideHandle, rendered: np.ndarray) -> np.ndarray:
    """Slide thumbnail (coarsest level) beside the rendered map."""
    from PIL import Image

    top = slide.level_count - 1
    w, h = slide.level_dimensions(top)
    thumb = read_region(slide, top, 0, 0, w, h).pixels
    target_h = rendered.shape[0]
    target_w = max(1, round(w * target_h / h))
    resized = Image.fromarray(thumb).resize((target_w, target_h), Image.BILINEAR)
    return np.concatenate([np.asarray(resized), rendered], axis=1)


def run_verdict(cfg: PipelineConfig) -> decision.SlideVerdict:
    out = Path(cfg.out)
    map_path = out / MAP_JSON_NAME
    if not map_path.exists():
        raise PipelineError(f"missing map: {map_path} (run map first)")
    lmap = decision.LocalizationMap.from_json_dict(json.loads(map_path.read_text()))
    verdict = decision.verdict_for_map(
        lmap, decision.Thresholds(t_p=cfg.t_p, t_r=cfg.t_r)
    )
    decision.write_verdict_json(verdict, out / VERDICT_NAME)
    logger.info("slide %s: %s (rho=%.4f)", verdict.slide_id, verdict.verdict.value, verdict.rho)
    return verdict


# -- evaluate stage --------------------------------------------------------------


def run_evaluate(cfg: PipelineConfig, apply_threshold: bool = False) -> Path:
    """Patch-wise metrics against manifest ground labels.

    By default predictions are raw argmax; `apply_threshold` routes
    low-confidence patches to unseen first (reported as coverage).
    """
    out = Path(cfg.out)
    manifest = load_manifest(out)
    records = [PatchRecord.from_json_dict(d) for d in manifest["records"]]
    vectors = load_probs(out)
    preds = []
    truths = []
    t_p = cfg.t_p if apply_threshold else 0.0  # 0.0 means raw argmax, never unseen
    for rec, vec in zip(records, vectors):
        if rec.ground_label is None:
            continue
        preds.append(decision.assign_class(vec, t_p))
        truths.append(rec.ground_label)
    if not preds:
        raise PipelineError("no ground-labeled records to evaluate")
    cm = evaluation.confusion(preds, truths)
    report = evaluation.metrics(cm)
    (out / METRICS_JSON_NAME).write_text(evaluation.report_json(report))
    (out / METRICS_CSV_NAME).write_text(
        evaluation.report_csv(report, model_name=f"{cfg.backend}-{cfg.arity}")
    )
    from . import figures

    figures.confusion_matrix_figure(cm, out / "confusion_matrix.png")
    return out / METRICS_JSON_NAME


# -- calibrate stage --------------------------------------------------------------


def load_calibration_slide(slide_dir: Path) -> decision.CalibrationSlide:
    manifest = load_manifest(slide_dir)
    records = tuple(PatchRecord.from_json_dict(d) for d in manifest["records"])
    vectors = tuple(load_probs(slide_dir))
    truth_path = slide_dir / "truth.json"
    if not truth_path.exists():
        raise PipelineError(f"missing truth record: {truth_path}")
    truth = json.loads(truth_path.read_text())
    return decision.CalibrationSlide(
        records=records,
        probabilities=vectors,
        truth=Verdict(truth["verdict"]),
    )


def run_calibrate(
    val_dir: str | Path,
    out_dir: str | Path,
    t_p_grid: Sequence[float] = decision.DEFAULT_T_P_GRID,
    t_r_grid: Sequence[float] = decision.DEFAULT_T_R_GRID,
) -> decision.Thresholds:
    """Grid-search thresholds over per-slide artifact directories.

    `val_dir` holds one subdirectory per slide, each with manifest.json,
    probs.jsonl, and truth.json.
    """
    val_dir = Path(val_dir)
    slide_dirs = sorted(p for p in val_dir.iterdir() if (p / MANIFEST_NAME).exists())
    if not slide_dirs:
        raise PipelineError(f"no calibration slides under {val_dir}")
    slides = [load_calibration_slide(p) for p in slide_dirs]
    thresholds = decision.calibrate(slides, t_p_grid, t_r_grid)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(
        {"t_p": thresholds.t_p, "t_r": thresholds.t_r}, out_dir / THRESHOLDS_NAME
    )
    from . import figures

    figures.calibration_figure(
        slides, t_p_grid, t_r_grid, thresholds, out_dir / "calibration.png"
    )
    return thresholds


# -- segment / synth stages -------------------------------------------------------


def run_segment(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    slide = open_slide(cfg.slide)
    level = choose_level(slide, cfg.magnification)
    fg = foreground_for_slide(slide, cfg, level)
    write_png(out / FOREGROUND_NAME, fg.bits.astype(np.uint8) * 255)
    return out / FOREGROUND_NAME


def run_synth(
    out_dir: str | Path,
    count: int = 1,
    seed: int = 0,
    width: int = 4096,
    height: int = 4096,
    level_count: int = 3,
) -> list[SynthSpec]:
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    specs = []
    for i in range(count):
        spec = random_spec(
            f"synth_{seed}_{i:03d}", rng, width=width, height=height, level_count=level_count
        )
        generate_slide(spec, out_dir)
        specs.append(spec)
    return specs


def run_synth_spec(spec_path: str | Path, out_dir: str | Path) -> list[SynthSpec]:
    """Generate slides from an explicit layout file.

    The file holds {"slides": [{slide_id, width, height, level_count, seed,
    jitter, blobs: [{label, cx, cy, r}]}]}, giving tests and demos exact
    control over lesion geometry.
    """
    from .synthgen import Blob, SynthError

    try:
        doc = json.loads(Path(spec_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read synth spec {spec_path}: {exc}") from exc
    specs = []
    for entry in doc.get("slides", []):
        try:
            blobs = tuple(
                Blob(
                    label=Label(b["label"]),
                    center_x=float(b["cx"]),
                    center_y=float(b["cy"]),
                    radius=float(b["r"]),
                )
                for b in entry.get("blobs", [])
            )
            spec = SynthSpec(
                slide_id=str(entry["slide_id"]),
                width=int(entry["width"]),
                height=int(entry["height"]),
                level_count=int(entry.get("level_count", 3)),
                blobs=blobs,
                jitter=int(entry.get("jitter", 6)),
                seed=int(entry.get("seed", 0)),
            )
        except (KeyError, ValueError, SynthError) as exc:
            raise ConfigError(f"bad synth spec entry: {exc}") from exc
        generate_slide(spec, out_dir)
        specs.append(spec)
    if not specs:
        raise ConfigError(f"synth spec {spec_path} lists no slides")
    return specs


# -- full pipeline ------------------------------------------------------------------


def run_pipeline(cfg: PipelineConfig) -> decision.SlideVerdict:
    """extract -> infer -> map -> verdict with timing sidecar."""
    started = time.time()
    timings = {}
    for name, stage in (
        ("extract", run_extract),
        ("infer", run_infer),
        ("map", run_map),
    ):
        t0 = time.time()
        stage(cfg)
        timings[name] = round(time.time() - t0, 3)
    t0 = time.time()
    verdict = run_verdict(cfg)
    timings["verdict"] = round(time.time() - t0, 3)
    elapsed = time.time() - started
    run_info = {
        "elapsed_seconds": round(elapsed, 3),
        "stage_seconds": timings,
        "workers": cfg.workers,
        "backend": cfg.backend,
    }
    _dump_json(run_info, Path(cfg.out) / RUN_INFO_NAME)
    if cfg.time_budget is not None and elapsed > cfg.time_budget:
        logger.warning(
            "pipeline took %.1fs, over the %.1fs budget", elapsed, cfg.time_budget
        )
    return verdict
