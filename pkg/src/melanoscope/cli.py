"""Command line interface.

Subcommands mirror the pipeline stages; `pipeline` chains
extract -> infer -> map -> verdict. All options can come from a JSON
config file (--config) with per-field flag overrides on top. Exit codes:
0 success, 1 invalid configuration or inputs, 2 runtime failure.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
from pathlib import Path

import click

from . import decision, pipeline
from .pipeline import ConfigError, PipelineConfig, PipelineError
from .slide_io import AnnotationError, SlideError

logger = logging.getLogger("melanoscope")

EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _setup_logging() -> None:
    level_name = os.environ.get("MELANOSCOPE_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handle_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ConfigError, SlideError, AnnotationError, FileNotFoundError) as exc:
            _fail(EXIT_CONFIG, str(exc))
        except PipelineError as exc:
            _fail(EXIT_RUNTIME, str(exc))
        except Exception as exc:  # noqa: BLE001 - CLI boundary
            logger.debug("unexpected failure", exc_info=True)
            _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")

    return wrapper


def config_options(func):
    """Shared --config plus per-field override flags."""
    options = [
        click.option("--config", "config_path", type=click.Path(), default=None,
                     help="JSON config file; flags override its fields."),
        click.option("--slide", default=None, help="Slide pyramid directory or PNG."),
        click.option("--annotations", default=None, help="GeoJSON annotation file."),
        click.option("--magnification", type=float, default=None),
        click.option("--patch-size", type=int, default=None),
        click.option("--overlap-min", type=float, default=None),
        click.option("--backend", type=click.Choice(["mock", "neural"]), default=None),
        click.option("--arity", type=click.Choice(["binary", "multiclass"]), default=None),
        click.option("--model", default=None, help="ONNX model file for the neural backend."),
        click.option("--t-p", type=float, default=None, help="Probability threshold."),
        click.option("--t-r", type=float, default=None, help="Malignancy ratio threshold."),
        click.option("--batch-size", type=int, default=None),
        click.option("--workers", type=int, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--out", default=None, help="Output directory."),
        click.option("--map-scale", type=int, default=None),
        click.option("--composite", is_flag=True, default=None,
                     help="Also write the map beside a slide thumbnail."),
        click.option("--stats-file", default=None,
                     help="Normalization stats JSON overriding the manifest's."),
        click.option("--tissue-only", is_flag=True, default=None,
                     help="Plan patches from tissue alone, ignoring annotations."),
        click.option("--balance", is_flag=True, default=None,
                     help="Augment minority classes in the exported dataset."),
        click.option("--time-budget", type=float, default=None,
                     help="Soft wall-clock budget in seconds (warn only)."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def build_config(config_path: str | None, **overrides) -> PipelineConfig:
    cfg = PipelineConfig.from_file(config_path) if config_path else PipelineConfig()
    return cfg.with_overrides(**overrides).validated()


@click.group()
def main() -> None:
    """Melanoma detection and localization for whole-slide images."""
    _setup_logging()


@main.command()
@config_options
@handle_errors
def segment(config_path, **overrides):
    """Write the foreground (tissue) mask PNG for a slide."""
    cfg = build_config(config_path, **overrides)
    path = pipeline.run_segment(cfg)
    click.echo(str(path))


@main.command()
@config_options
@handle_errors
def extract(config_path, **overrides):
    """Plan and export the patch dataset plus manifest."""
    cfg = build_config(config_path, **overrides)
    path = pipeline.run_extract(cfg)
    click.echo(str(path))


@main.command()
@config_options
@handle_errors
def infer(config_path, **overrides):
    """Classify extracted patches into per-patch probability vectors."""
    cfg = build_config(config_path, **overrides)
    path = pipeline.run_infer(cfg)
    click.echo(str(path))


@main.command(name="map")
@config_options
@handle_errors
def map_cmd(config_path, **overrides):
    """Assemble the localization map (JSON + rendered PNG)."""
    cfg = build_config(config_path, **overrides)
    path = pipeline.run_map(cfg)
    click.echo(str(path))


@main.command()
@config_options
@handle_errors
def verdict(config_path, **overrides):
    """Issue the slide-level melanoma / benign nevus verdict."""
    cfg = build_config(config_path, **overrides)
    result = pipeline.run_verdict(cfg)
    click.echo(json.dumps(result.to_json_dict(), sort_keys=True))


@main.command()
@click.option("--val-dir", required=True, type=click.Path(exists=True),
              help="Directory of per-slide artifact dirs with truth records.")
@click.option("--out", default="out", help="Where thresholds.json goes.")
@click.option("--t-p-grid", default=None, help="Comma-separated probability grid.")
@click.option("--t-r-grid", default=None, help="Comma-separated ratio grid.")
@handle_errors
def calibrate(val_dir, out, t_p_grid, t_r_grid):
    """Grid-search t_p and t_r on a validation set."""
    t_ps = decision.DEFAULT_T_P_GRID
    t_rs = decision.DEFAULT_T_R_GRID
    try:
        if t_p_grid:
            t_ps = tuple(float(v) for v in t_p_grid.split(","))
        if t_r_grid:
            t_rs = tuple(float(v) for v in t_r_grid.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad grid value: {exc}") from None
    thresholds = pipeline.run_calibrate(val_dir, out, t_ps, t_rs)
    click.echo(json.dumps({"t_p": thresholds.t_p, "t_r": thresholds.t_r}))


@main.command()
@config_options
@click.option("--apply-threshold", is_flag=True, default=False,
              help="Route sub-threshold patches to unseen before scoring.")
@handle_errors
def evaluate(config_path, apply_threshold, **overrides):
    """Patch-wise metrics (CSV + JSON + confusion figure) from artifacts."""
    cfg = build_config(config_path, **overrides)
    path = pipeline.run_evaluate(cfg, apply_threshold=apply_threshold)
    click.echo(str(path))


@main.command()
@click.option("--out", default="synth", help="Output directory for slides.")
@click.option("--count", type=int, default=1)
@click.option("--seed", type=int, default=0)
@click.option("--width", type=int, default=4096)
@click.option("--height", type=int, default=4096)
@click.option("--levels", "level_count", type=int, default=3)
@click.option("--spec", "spec_path", type=click.Path(exists=True), default=None,
              help="Explicit layout JSON; overrides the random options.")
@handle_errors
def synth(out, count, seed, width, height, level_count, spec_path):
    """Generate synthetic slides with annotations and truth records."""
    if spec_path:
        specs = pipeline.run_synth_spec(spec_path, out)
    else:
        specs = pipeline.run_synth(out, count, seed, width, height, level_count)
    for spec in specs:
        click.echo(str(Path(out) / spec.slide_id))


@main.command(name="pipeline")
@config_options
@handle_errors
def pipeline_cmd(config_path, **overrides):
    """Run extract, infer, map, and verdict end to end."""
    cfg = build_config(config_path, **overrides)
    result = pipeline.run_pipeline(cfg)
    click.echo(json.dumps(result.to_json_dict(), sort_keys=True))


if __name__ == "__main__":
    main()
