"""ONNX export for trained patch classifiers.

Writes the model file the inference pipeline consumes: float32 input
``[N, 3, 224, 224]`` named ``input``, logits ``[N, width]`` named
``logits``. The protobuf encoding is done directly (field numbers from
onnx.proto3), so export works without the onnx package. Only inference
semantics are exported: dropout disappears, and the adaptive average pool
is a no-op at the fixed 224 input so it is elided.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .model import ARITY_WIDTH, PatchClassifier

OPSET = 13
INPUT_NAME = "input"
OUTPUT_NAME = "logits"

_ATTR_INT = 2
_ATTR_INTS = 7


class ExportError(Exception):
    pass


def _varint(value: int) -> bytes:
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _field(fieldno: int, wire: int) -> bytes:
    return _varint((fieldno << 3) | wire)


def _uint_field(fieldno: int, value: int) -> bytes:
    return _field(fieldno, 0) + _varint(value)


def _bytes_field(fieldno: int, payload: bytes) -> bytes:
    return _field(fieldno, 2) + _varint(len(payload)) + payload


def _str_field(fieldno: int, text: str) -> bytes:
    return _bytes_field(fieldno, text.encode("utf-8"))


def _tensor(name: str, array: np.ndarray) -> bytes:
    out = bytearray()
    for dim in array.shape:
        out += _uint_field(1, dim)
    out += _uint_field(2, 1)  # data_type FLOAT
    out += _str_field(8, name)
    out += _bytes_field(9, array.astype("<f4").tobytes())
    return bytes(out)


def _attr_int(name: str, value: int) -> bytes:
    return _str_field(1, name) + _uint_field(3, value) + _uint_field(20, _ATTR_INT)


def _attr_ints(name: str, values) -> bytes:
    out = bytearray(_str_field(1, name))
    for v in values:
        out += _uint_field(8, v)
    out += _uint_field(20, _ATTR_INTS)
    return bytes(out)


def _node(op: str, inputs, outputs, attrs: bytes = b"") -> bytes:
    out = bytearray()
    for name in inputs:
        out += _str_field(1, name)
    for name in outputs:
        out += _str_field(2, name)
    out += _str_field(4, op)
    if attrs:
        out += attrs
    return bytes(out)


def _value_info(name: str, dims) -> bytes:
    shape = bytearray()
    for dim in dims:
        if isinstance(dim, str):
            entry = _str_field(2, dim)
        else:
            entry = _uint_field(1, dim)
        shape += _bytes_field(1, entry)
    tensor_type = _uint_field(1, 1) + _bytes_field(2, bytes(shape))
    return _str_field(1, name) + _bytes_field(2, _bytes_field(1, tensor_type))


def export_model(model: PatchClassifier, out_path: str | Path) -> Path:
    """Serialize the network as Conv/Relu/MaxPool/Flatten/Gemm nodes."""
    model = model.eval()
    nodes: list[bytes] = []
    initializers: list[bytes] = []
    current = INPUT_NAME
    conv_attrs = (
        _bytes_field(5, _attr_ints("dilations", (1, 1)))
        + _bytes_field(5, _attr_int("group", 1))
        + _bytes_field(5, _attr_ints("kernel_shape", (3, 3)))
        + _bytes_field(5, _attr_ints("pads", (1, 1, 1, 1)))
        + _bytes_field(5, _attr_ints("strides", (1, 1)))
    )
    pool_attrs = _bytes_field(5, _attr_ints("kernel_shape", (2, 2))) + _bytes_field(
        5, _attr_ints("strides", (2, 2))
    )

    for i, layer in enumerate(model.features):
        if isinstance(layer, nn.Conv2d):
            w_name, b_name = f"conv{i}_w", f"conv{i}_b"
            initializers.append(_tensor(w_name, layer.weight.detach().numpy()))
            initializers.append(_tensor(b_name, layer.bias.detach().numpy()))
            nodes.append(
                _node("Conv", (current, w_name, b_name), (f"conv{i}",), conv_attrs)
            )
            current = f"conv{i}"
        elif isinstance(layer, nn.ReLU):
            nodes.append(_node("Relu", (current,), (f"relu{i}",)))
            current = f"relu{i}"
        elif isinstance(layer, nn.MaxPool2d):
            nodes.append(_node("MaxPool", (current,), (f"pool{i}",), pool_attrs))
            current = f"pool{i}"
        else:
            raise ExportError(f"unexpected backbone layer {type(layer).__name__}")

    # Adaptive average pool is identity for 7x7 feature maps (224 input).
    nodes.append(
        _node("Flatten", (current,), ("flat",), _bytes_field(5, _attr_int("axis", 1)))
    )
    current = "flat"

    linear_indices = [
        i for i, layer in enumerate(model.head) if isinstance(layer, nn.Linear)
    ]
    for j, idx in enumerate(linear_indices):
        layer = model.head[idx]
        w_name, b_name = f"fc{j}_w", f"fc{j}_b"
        initializers.append(_tensor(w_name, layer.weight.detach().numpy()))
        initializers.append(_tensor(b_name, layer.bias.detach().numpy()))
        last = j == len(linear_indices) - 1
        out_name = OUTPUT_NAME if last else f"fc{j}"
        gemm_attrs = _bytes_field(5, _attr_int("transB", 1))
        nodes.append(_node("Gemm", (current, w_name, b_name), (out_name,), gemm_attrs))
        current = out_name
        if not last:
            nodes.append(_node("Relu", (current,), (f"fcrelu{j}",)))
            current = f"fcrelu{j}"

    width = ARITY_WIDTH[model.arity]
    graph = bytearray()
    for node in nodes:
        graph += _bytes_field(1, node)
    graph += _str_field(2, "patch_classifier")
    for init in initializers:
        graph += _bytes_field(5, init)
    graph += _bytes_field(11, _value_info(INPUT_NAME, ("batch", 3, 224, 224)))
    graph += _bytes_field(12, _value_info(OUTPUT_NAME, ("batch", width)))

    blob = bytearray()
    blob += _uint_field(1, 8)  # ir_version
    blob += _str_field(2, "melanotrain")
    blob += _bytes_field(7, bytes(graph))
    blob += _bytes_field(8, _uint_field(2, OPSET))  # opset_import

    out_path = Path(out_path)
    out_path.write_bytes(bytes(blob))
    return out_path


def export_checkpoint(
    checkpoint_path: str | Path, arity: str, out_path: str | Path
) -> Path:
    """Load a training checkpoint and write the interchange model file."""
    checkpoint = torch.load(checkpoint_path, map_location="cpu", weights_only=True)
    if checkpoint.get("arity") != arity:
        raise ExportError(
            f"checkpoint was trained with arity {checkpoint.get('arity')!r}, "
            f"requested {arity!r}"
        )
    model = PatchClassifier(arity)
    model.load_state_dict(checkpoint["state_dict"])
    return export_model(model, out_path)
