"""Patch classifier training and ONNX export for the melanoscope pipeline."""

from .data import PatchDataset, load_dataset, split_dataset
from .model import PatchClassifier
from .onnx_export import export_checkpoint, export_model
from .training import TrainConfig, TrainResult, train

__version__ = "0.1.0"
