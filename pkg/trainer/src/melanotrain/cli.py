"""Command line entry points: train on a dataset export, then export ONNX."""

from __future__ import annotations

import json
import logging
import sys

import click

from .data import DataError
from .model import ModelError
from .onnx_export import ExportError, export_checkpoint
from .training import TrainConfig, TrainError, train


@click.group()
def main() -> None:
    """Patch classifier training for the melanoscope pipeline."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


@main.command(name="train")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--arity", type=click.Choice(["binary", "multiclass"]), default="multiclass")
@click.option("--freeze/--no-freeze", "freeze_backbone", default=False,
              help="Freeze the conv backbone and train the head only.")
@click.option("--lr", "learning_rate", type=float, default=0.0003)
@click.option("--batch-size", type=int, default=256)
@click.option("--patience", type=int, default=8)
@click.option("--max-epochs", type=int, default=50)
@click.option("--seed", type=int, default=0)
@click.option("--weights", "weights_path", type=click.Path(exists=True), default=None,
              help="VGG16 state-dict file for backbone initialization.")
@click.option("--cache", "cache_dir", type=click.Path(), default=None)
@click.option("--out", "out_dir", default="train_out")
def train_cmd(**kwargs):
    """Fine-tune the classifier on a dataset export."""
    try:
        result = train(TrainConfig(**kwargs))
    except (DataError, ModelError, TrainError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(
        json.dumps(
            {
                "checkpoint": str(result.checkpoint_path),
                "best_val_accuracy": result.best_val_accuracy,
                "best_epoch": result.best_epoch,
                "epochs_run": len(result.log),
            }
        )
    )


@main.command(name="export")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--arity", type=click.Choice(["binary", "multiclass"]), required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def export_cmd(checkpoint, arity, out_path):
    """Write the ONNX file the inference pipeline loads."""
    try:
        path = export_checkpoint(checkpoint, arity, out_path)
    except (ExportError, ModelError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(str(path))


if __name__ == "__main__":
    main()
