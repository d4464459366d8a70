"""Patch classification backends.

Every backend maps normalized patch tensors to a probability vector over
the fixed class order (benign, malignant, normal). Two kinds exist:

- ``mock``: deterministic color-prototype classifier used for testing and
  synthetic end-to-end runs. It recovers the patch's mean RGB and scores
  classes by distance to fixed anchor colors, so slides generated from the
  same palette have a known-perfect classifier.
- ``neural``: an ONNX model file emitting logits; softmax is applied here
  so downstream thresholding sees probabilities from either kind.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import onnx_io
from .labels import Label
from .tiling import IDENTITY_STATS, TENSOR_SIZE, NormalizationStats

# Anchor colors (RGB) shared with the synthetic slide palette.
ANCHOR_COLORS: dict[Label, tuple[int, int, int]] = {
    Label.BENIGN: (90, 60, 150),
    Label.MALIGNANT: (150, 40, 90),
    Label.NORMAL: (230, 180, 200),
}

# Softmax temperature over anchor distances. Chosen so a patch sitting on
# an anchor scores essentially 1.0, glass-white patches stay below the 0.99
# probability threshold in binary mode, and mixes with less than ~3/4
# tissue drop to the unseen class.
MOCK_TEMPERATURE = 4.0

ARITIES = {"binary": 2, "multiclass": 3}


class BackendError(Exception):
    pass


@dataclass(frozen=True)
class ProbabilityVector:
    """Per-patch class probabilities in the fixed class order."""

    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.probs) not in (2, 3):
            raise ValueError(f"probability vector must have 2 or 3 entries, got {len(self.probs)}")
        if any(not 0.0 <= p <= 1.0 for p in self.probs):
            raise ValueError(f"probabilities outside [0, 1]: {self.probs}")
        if abs(sum(self.probs) - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {sum(self.probs)}, not 1")

    @property
    def argmax(self) -> int:
        return max(range(len(self.probs)), key=lambda i: (self.probs[i], -i))

    @property
    def max_prob(self) -> float:
        return max(self.probs)


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str  # "mock" | "neural"
    arity: str  # "binary" | "multiclass"
    stats: NormalizationStats = field(default=IDENTITY_STATS)

    def __post_init__(self):
        if self.kind not in ("mock", "neural"):
            raise BackendError(f"unknown backend kind {self.kind!r}")
        if self.arity not in ARITIES:
            raise BackendError(f"unknown arity {self.arity!r}")

    @property
    def width(self) -> int:
        return ARITIES[self.arity]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class MockBackend:
    """Pure function of pixel content; no model file involved."""

    outputs_are_logits = False
    supports_concurrent_predict = True

    def __init__(self, descriptor: BackendDescriptor, temperature: float = MOCK_TEMPERATURE):
        self.descriptor = descriptor
        self.temperature = temperature
        order = (Label.BENIGN, Label.MALIGNANT, Label.NORMAL)[: descriptor.width]
        self._anchors = np.asarray([ANCHOR_COLORS[label] for label in order], dtype=np.float64)

    def raw_outputs(self, batch: np.ndarray) -> np.ndarray:
        stats = self.descriptor.stats
        # Mean RGB of the un-normalized patch, back on the 0..255 scale.
        means = batch.mean(axis=(2, 3))  # (n, 3) of standardized values
        std = np.asarray(stats.std, dtype=np.float64)
        mean = np.asarray(stats.mean, dtype=np.float64)
        rgb = (means * std + mean) * 255.0
        dists = np.linalg.norm(rgb[:, np.newaxis, :] - self._anchors, axis=2)
        return softmax(-dists / self.temperature)


class NeuralBackend:
    """Executes an exported ONNX classifier; emits logits."""

    outputs_are_logits = True
    supports_concurrent_predict = False
    # VGG-sized conv buffers dominate memory; cap the per-call group size.
    _EXEC_GROUP = 8

    def __init__(self, descriptor: BackendDescriptor, model: onnx_io.OnnxModel):
        self.descriptor = descriptor
        self.model = model
        in_dims, out_dims = onnx_io.io_shapes(model)
        fixed_in = tuple(d for d in in_dims[1:])
        if fixed_in != (3, TENSOR_SIZE, TENSOR_SIZE):
            raise BackendError(
                f"model input is {in_dims}, expected [N, 3, {TENSOR_SIZE}, {TENSOR_SIZE}]"
            )
        if len(out_dims) != 2 or out_dims[1] != descriptor.width:
            raise BackendError(
                f"model output is {out_dims}, expected [N, {descriptor.width}] "
                f"for arity {descriptor.arity}"
            )
        self._input_name = model.inputs[0].name
        self._output_name = model.outputs[0].name

    def raw_outputs(self, batch: np.ndarray) -> np.ndarray:
        chunks = []
        for start in range(0, batch.shape[0], self._EXEC_GROUP):
            feeds = {self._input_name: batch[start : start + self._EXEC_GROUP]}
            chunks.append(onnx_io.run_model(self.model, feeds)[self._output_name])
        return np.concatenate(chunks, axis=0)


Backend = MockBackend | NeuralBackend


def load_backend(descriptor: BackendDescriptor, model_path=None) -> Backend:
    """Instantiate and shape-validate a backend."""
    if descriptor.kind == "mock":
        return MockBackend(descriptor)
    if model_path is None:
        raise BackendError("neural backend requires a model file")
    try:
        model = onnx_io.load_model(model_path)
    except (OSError, onnx_io.OnnxError) as exc:
        raise BackendError(f"cannot load model {model_path}: {exc}") from exc
    return NeuralBackend(descriptor, model)


def predict(
    backend: Backend, batch: Sequence[np.ndarray]
) -> list[ProbabilityVector]:
    """Classify a batch of (3, 224, 224) tensors, preserving input order."""
    if len(batch) == 0:
        raise BackendError("predict requires a non-empty batch")
    arr = np.stack([np.asarray(t, dtype=np.float32) for t in batch])
    if arr.shape[1:] != (3, TENSOR_SIZE, TENSOR_SIZE):
        raise BackendError(
            f"batch tensors are {arr.shape[1:]}, expected (3, {TENSOR_SIZE}, {TENSOR_SIZE})"
        )
    raw = np.asarray(backend.raw_outputs(arr), dtype=np.float64)
    if raw.shape != (arr.shape[0], backend.descriptor.width):
        raise BackendError(
            f"backend produced shape {raw.shape}, expected "
            f"({arr.shape[0]}, {backend.descriptor.width})"
        )
    if not np.all(np.isfinite(raw)):
        raise BackendError("backend produced non-finite outputs")
    probs = softmax(raw) if backend.outputs_are_logits else raw
    # Clamp float dust so rows satisfy the probability-vector contract.
    probs = np.clip(probs, 0.0, 1.0)
    probs /= probs.sum(axis=1, keepdims=True)
    return [ProbabilityVector(probs=tuple(float(v) for v in row)) for row in probs]
