"""Self-contained ONNX model file support.

Reads and executes the feed-forward subset of ONNX needed for exported
patch classifiers (Conv / Relu / pooling / Gemm graphs, float32), plus a
writer used to build such files. The protobuf wire format is handled
directly so no onnx/onnxruntime dependency is required; execution is
plain NumPy backed by BLAS matmuls.

Field numbers follow onnx.proto3. Unknown fields are ignored on read;
unknown ops fail loudly at execution.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DTYPE_FLOAT = 1
DTYPE_INT64 = 7

_NP_DTYPES = {DTYPE_FLOAT: np.dtype("<f4"), DTYPE_INT64: np.dtype("<i8")}

# AttributeProto.AttributeType values
_ATTR_FLOAT, _ATTR_INT, _ATTR_STRING, _ATTR_TENSOR = 1, 2, 3, 4
_ATTR_FLOATS, _ATTR_INTS = 6, 7


class OnnxError(Exception):
    pass


# -- protobuf wire primitives --------------------------------------------------


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise OnnxError("truncated varint")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise OnnxError("varint too long")


def _iter_fields(buf: bytes) -> Iterator[tuple[int, int, bytes | int]]:
    """Yield (field_number, wire_type, value) over a serialized message."""
    pos = 0
    while pos < len(buf):
        key, pos = _read_varint(buf, pos)
        fieldno, wire = key >> 3, key & 7
        if wire == 0:  # varint
            value, pos = _read_varint(buf, pos)
            yield fieldno, wire, value
        elif wire == 2:  # length-delimited
            length, pos = _read_varint(buf, pos)
            yield fieldno, wire, buf[pos : pos + length]
            pos += length
        elif wire == 5:  # fixed32
            yield fieldno, wire, buf[pos : pos + 4]
            pos += 4
        elif wire == 1:  # fixed64
            yield fieldno, wire, buf[pos : pos + 8]
            pos += 8
        else:
            raise OnnxError(f"unsupported protobuf wire type {wire}")


def _signed64(value: int) -> int:
    return value - (1 << 64) if value >= (1 << 63) else value


def _varint(value: int) -> bytes:
    if value < 0:
        value += 1 << 64
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _field_varint(fieldno: int, value: int) -> bytes:
    return _varint((fieldno << 3) | 0) + _varint(value)


def _field_bytes(fieldno: int, payload: bytes) -> bytes:
    return _varint((fieldno << 3) | 2) + _varint(len(payload)) + payload


def _field_str(fieldno: int, text: str) -> bytes:
    return _field_bytes(fieldno, text.encode("utf-8"))


# -- model structures ----------------------------------------------------------


@dataclass(frozen=True)
class OnnxNode:
    op_type: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: dict


@dataclass(frozen=True)
class OnnxValueInfo:
    name: str
    dims: tuple[int | str, ...]  # str entries are symbolic (dynamic) dims


@dataclass
class OnnxModel:
    nodes: list[OnnxNode] = field(default_factory=list)
    initializers: dict[str, np.ndarray] = field(default_factory=dict)
    inputs: list[OnnxValueInfo] = field(default_factory=list)
    outputs: list[OnnxValueInfo] = field(default_factory=list)
    opset: int = 13
    producer: str = ""


def _parse_tensor(buf: bytes) -> tuple[str, np.ndarray]:
    dims: list[int] = []
    dtype = DTYPE_FLOAT
    name = ""
    raw = b""
    float_data: list[float] = []
    int64_data: list[int] = []
    for fieldno, wire, value in _iter_fields(buf):
        if fieldno == 1 and wire == 0:
            dims.append(_signed64(value))
        elif fieldno == 2 and wire == 0:
            dtype = value
        elif fieldno == 8 and wire == 2:
            name = value.decode("utf-8")
        elif fieldno == 9 and wire == 2:
            raw = value
        elif fieldno == 4:
            if wire == 2:  # packed floats
                float_data.extend(
                    struct.unpack(f"<{len(value) // 4}f", value)
                )
            else:
                float_data.append(struct.unpack("<f", value)[0])
        elif fieldno == 7 and wire == 0:
            int64_data.append(_signed64(value))
    if dtype not in _NP_DTYPES:
        raise OnnxError(f"unsupported tensor data type {dtype} for {name!r}")
    np_dtype = _NP_DTYPES[dtype]
    if raw:
        arr = np.frombuffer(raw, dtype=np_dtype).copy()
    elif float_data:
        arr = np.asarray(float_data, dtype=np_dtype)
    elif int64_data:
        arr = np.asarray(int64_data, dtype=np_dtype)
    else:
        arr = np.zeros(0, dtype=np_dtype)
    return name, arr.reshape(dims) if dims else arr


def _parse_attr(buf: bytes) -> tuple[str, object]:
    name = ""
    atype = None
    ival = 0
    fval = 0.0
    sval = b""
    tval = None
    ints: list[int] = []
    floats: list[float] = []
    for fieldno, wire, value in _iter_fields(buf):
        if fieldno == 1 and wire == 2:
            name = value.decode("utf-8")
        elif fieldno == 20 and wire == 0:
            atype = value
        elif fieldno == 2 and wire == 5:
            fval = struct.unpack("<f", value)[0]
        elif fieldno == 3 and wire == 0:
            ival = _signed64(value)
        elif fieldno == 4 and wire == 2:
            sval = value
        elif fieldno == 5 and wire == 2:
            tval = _parse_tensor(value)[1]
        elif fieldno == 7:
            if wire == 2:
                floats.extend(struct.unpack(f"<{len(value) // 4}f", value))
            else:
                floats.append(struct.unpack("<f", value)[0])
        elif fieldno == 8 and wire == 0:
            ints.append(_signed64(value))
    if atype == _ATTR_INT:
        return name, ival
    if atype == _ATTR_FLOAT:
        return name, fval
    if atype == _ATTR_STRING:
        return name, sval.decode("utf-8")
    if atype == _ATTR_TENSOR:
        return name, tval
    if atype == _ATTR_INTS:
        return name, tuple(ints)
    if atype == _ATTR_FLOATS:
        return name, tuple(floats)
    # Fall back on whichever payload is present (writers may omit `type`).
    if ints:
        return name, tuple(ints)
    if floats:
        return name, tuple(floats)
    if tval is not None:
        return name, tval
    return name, ival


def _parse_value_info(buf: bytes) -> OnnxValueInfo:
    name = ""
    dims: list[int | str] = []
    for fieldno, wire, value in _iter_fields(buf):
        if fieldno == 1 and wire == 2:
            name = value.decode("utf-8")
        elif fieldno == 2 and wire == 2:  # TypeProto
            for f2, w2, v2 in _iter_fields(value):
                if f2 == 1 and w2 == 2:  # tensor_type
                    for f3, w3, v3 in _iter_fields(v2):
                        if f3 == 2 and w3 == 2:  # shape
                            for f4, w4, v4 in _iter_fields(v3):
                                if f4 == 1 and w4 == 2:  # dimension
                                    dim: int | str = 0
                                    for f5, w5, v5 in _iter_fields(v4):
                                        if f5 == 1 and w5 == 0:
                                            dim = _signed64(v5)
                                        elif f5 == 2 and w5 == 2:
                                            dim = v5.decode("utf-8")
                                    dims.append(dim)
    return OnnxValueInfo(name=name, dims=tuple(dims))


def _parse_node(buf: bytes) -> OnnxNode:
    inputs: list[str] = []
    outputs: list[str] = []
    op_type = ""
    attrs: dict = {}
    for fieldno, wire, value in _iter_fields(buf):
        if fieldno == 1 and wire == 2:
            inputs.append(value.decode("utf-8"))
        elif fieldno == 2 and wire == 2:
            outputs.append(value.decode("utf-8"))
        elif fieldno == 4 and wire == 2:
            op_type = value.decode("utf-8")
        elif fieldno == 5 and wire == 2:
            key, val = _parse_attr(value)
            attrs[key] = val
    return OnnxNode(
        op_type=op_type, inputs=tuple(inputs), outputs=tuple(outputs), attrs=attrs
    )


def load_model(path: str | Path) -> OnnxModel:
    data = Path(path).read_bytes()
    model = OnnxModel()
    graph_buf = None
    for fieldno, wire, value in _iter_fields(data):
        if fieldno == 7 and wire == 2:
            graph_buf = value
        elif fieldno == 2 and wire == 2:
            model.producer = value.decode("utf-8")
        elif fieldno == 8 and wire == 2:
            for f2, w2, v2 in _iter_fields(value):
                if f2 == 2 and w2 == 0:
                    model.opset = v2
    if graph_buf is None:
        raise OnnxError(f"{path}: no graph in model file")
    init_names = set()
    for fieldno, wire, value in _iter_fields(graph_buf):
        if fieldno == 1 and wire == 2:
            model.nodes.append(_parse_node(value))
        elif fieldno == 5 and wire == 2:
            name, arr = _parse_tensor(value)
            model.initializers[name] = arr
            init_names.add(name)
        elif fieldno == 11 and wire == 2:
            model.inputs.append(_parse_value_info(value))
        elif fieldno == 12 and wire == 2:
            model.outputs.append(_parse_value_info(value))
    # Graph inputs may redundantly list initializers; keep true inputs only.
    model.inputs = [vi for vi in model.inputs if vi.name not in init_names]
    return model


# -- serialization -------------------------------------------------------------


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    if arr.dtype == np.float32:
        dtype = DTYPE_FLOAT
    elif arr.dtype == np.int64:
        dtype = DTYPE_INT64
    else:
        raise OnnxError(f"unsupported dtype {arr.dtype} for initializer {name!r}")
    out = bytearray()
    for d in arr.shape:
        out += _field_varint(1, d)
    out += _field_varint(2, dtype)
    out += _field_str(8, name)
    out += _field_bytes(9, np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return bytes(out)


def _encode_attr(name: str, value: object) -> bytes:
    out = bytearray(_field_str(1, name))
    if isinstance(value, bool):
        raise OnnxError("boolean attributes are not part of the subset")
    if isinstance(value, int):
        out += _field_varint(3, value)
        out += _field_varint(20, _ATTR_INT)
    elif isinstance(value, float):
        out += _varint((2 << 3) | 5) + struct.pack("<f", value)
        out += _field_varint(20, _ATTR_FLOAT)
    elif isinstance(value, str):
        out += _field_str(4, value)
        out += _field_varint(20, _ATTR_STRING)
    elif isinstance(value, np.ndarray):
        out += _field_bytes(5, _encode_tensor("", value))
        out += _field_varint(20, _ATTR_TENSOR)
    elif isinstance(value, (tuple, list)) and all(isinstance(v, int) for v in value):
        for v in value:
            out += _field_varint(8, v)
        out += _field_varint(20, _ATTR_INTS)
    elif isinstance(value, (tuple, list)):
        for v in value:
            out += _varint((7 << 3) | 5) + struct.pack("<f", float(v))
        out += _field_varint(20, _ATTR_FLOATS)
    else:
        raise OnnxError(f"unsupported attribute value {value!r}")
    return bytes(out)


def _encode_value_info(info: OnnxValueInfo) -> bytes:
    dims = bytearray()
    for d in info.dims:
        if isinstance(d, str):
            dim = _field_str(2, d)
        else:
            dim = _field_varint(1, d)
        dims += _field_bytes(1, dim)
    shape = _field_bytes(2, bytes(dims))
    tensor_type = _field_varint(1, DTYPE_FLOAT) + shape
    type_proto = _field_bytes(1, tensor_type)
    return _field_str(1, info.name) + _field_bytes(2, type_proto)


def save_model(model: OnnxModel, path: str | Path) -> None:
    graph = bytearray()
    for node in model.nodes:
        buf = bytearray()
        for name in node.inputs:
            buf += _field_str(1, name)
        for name in node.outputs:
            buf += _field_str(2, name)
        buf += _field_str(4, node.op_type)
        for key in node.attrs:
            buf += _field_bytes(5, _encode_attr(key, node.attrs[key]))
        graph += _field_bytes(1, bytes(buf))
    graph += _field_str(2, "graph")
    for name, arr in model.initializers.items():
        graph += _field_bytes(5, _encode_tensor(name, arr))
    for info in model.inputs:
        graph += _field_bytes(11, _encode_value_info(info))
    for info in model.outputs:
        graph += _field_bytes(12, _encode_value_info(info))

    out = bytearray()
    out += _field_varint(1, 8)  # ir_version
    out += _field_str(2, model.producer or "melanoscope")
    out += _field_bytes(7, bytes(graph))
    out += _field_bytes(8, _field_varint(2, model.opset))  # opset_import
    Path(path).write_bytes(bytes(out))


# -- execution -----------------------------------------------------------------


def _pair(value, default) -> tuple[int, int]:
    if value is None:
        return default
    return int(value[0]), int(value[1])


def _conv2d(x, w, b, pads, strides):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    pt, pl, pb, pr = pads
    sh, sw = strides
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    oh = (h + pt + pb - kh) // sh + 1
    ow = (wd + pl + pr - kw) // sw + 1
    wmat = w.reshape(f, c * kh * kw)
    out = np.empty((n, f, oh, ow), dtype=np.float32)
    for i in range(n):
        windows = np.lib.stride_tricks.sliding_window_view(xp[i], (kh, kw), axis=(1, 2))
        windows = windows[:, ::sh, ::sw]  # (c, oh, ow, kh, kw)
        col = windows.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow)
        out[i] = (wmat @ col).reshape(f, oh, ow)
    if b is not None:
        out += b.reshape(1, f, 1, 1)
    return out


def _pool2d(x, kernel, strides, pads, reduce_fn):
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = strides
    pt, pl, pb, pr = pads
    if (pt, pl, pb, pr) != (0, 0, 0, 0):
        fill = -np.inf if reduce_fn is np.max else 0.0
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=fill)
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]
    return np.ascontiguousarray(reduce_fn(windows, axis=(4, 5)).astype(np.float32))


def run_model(
    model: OnnxModel, feeds: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Execute the graph on NumPy arrays; returns the graph outputs."""
    env: dict[str, np.ndarray] = {}
    env.update(model.initializers)
    for info in model.inputs:
        if info.name not in feeds:
            raise OnnxError(f"missing model input {info.name!r}")
    for name, arr in feeds.items():
        env[name] = np.asarray(arr, dtype=np.float32)

    for node in model.nodes:
        ins = [env[name] if name else None for name in node.inputs]
        op = node.op_type
        if op == "Conv":
            if node.attrs.get("group", 1) != 1:
                raise OnnxError("grouped Conv not supported")
            kh, kw = ins[1].shape[2], ins[1].shape[3]
            pads = tuple(node.attrs.get("pads", (0, 0, 0, 0)))
            strides = _pair(node.attrs.get("strides"), (1, 1))
            dil = node.attrs.get("dilations", (1, 1))
            if tuple(dil) != (1, 1):
                raise OnnxError("dilated Conv not supported")
            bias = ins[2] if len(ins) > 2 else None
            result = _conv2d(ins[0], ins[1], bias, pads, strides)
        elif op == "Relu":
            result = np.maximum(ins[0], 0.0)
        elif op == "MaxPool":
            kernel = _pair(node.attrs.get("kernel_shape"), (2, 2))
            strides = _pair(node.attrs.get("strides"), kernel)
            pads = tuple(node.attrs.get("pads", (0, 0, 0, 0)))
            result = _pool2d(ins[0], kernel, strides, pads, np.max)
        elif op == "AveragePool":
            kernel = _pair(node.attrs.get("kernel_shape"), (2, 2))
            strides = _pair(node.attrs.get("strides"), kernel)
            pads = tuple(node.attrs.get("pads", (0, 0, 0, 0)))
            result = _pool2d(ins[0], kernel, strides, pads, np.mean)
        elif op == "GlobalAveragePool":
            result = ins[0].mean(axis=(2, 3), keepdims=True).astype(np.float32)
        elif op == "Gemm":
            a, b = ins[0], ins[1]
            if node.attrs.get("transA", 0):
                a = a.T
            if node.attrs.get("transB", 0):
                b = b.T
            result = (
                node.attrs.get("alpha", 1.0) * (a @ b)
            ).astype(np.float32)
            if len(ins) > 2 and ins[2] is not None:
                result = result + np.float32(node.attrs.get("beta", 1.0)) * ins[2]
        elif op == "MatMul":
            result = (ins[0] @ ins[1]).astype(np.float32)
        elif op == "Add":
            result = ins[0] + ins[1]
        elif op == "Flatten":
            axis = node.attrs.get("axis", 1)
            lead = int(np.prod(ins[0].shape[:axis])) if axis else 1
            result = ins[0].reshape(lead, -1)
        elif op == "Reshape":
            shape = [int(v) for v in np.asarray(env[node.inputs[1]]).ravel()]
            shape = [
                ins[0].shape[i] if v == 0 else v for i, v in enumerate(shape)
            ]
            result = ins[0].reshape(shape)
        elif op in ("Identity", "Dropout"):
            result = ins[0]
        elif op == "Constant":
            result = node.attrs["value"]
        elif op == "Softmax":
            axis = node.attrs.get("axis", -1)
            shifted = ins[0] - ins[0].max(axis=axis, keepdims=True)
            e = np.exp(shifted)
            result = (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)
        else:
            raise OnnxError(f"unsupported op {op!r} in model graph")
        env[node.outputs[0]] = result
        if op == "Dropout" and len(node.outputs) > 1:
            env[node.outputs[1]] = np.ones_like(ins[0], dtype=bool)

    missing = [info.name for info in model.outputs if info.name not in env]
    if missing:
        raise OnnxError(f"graph did not produce outputs {missing}")
    return {info.name: env[info.name] for info in model.outputs}


def io_shapes(model: OnnxModel) -> tuple[tuple[int | str, ...], tuple[int | str, ...]]:
    """Declared (input, output) dims of a single-input single-output model."""
    if len(model.inputs) != 1 or len(model.outputs) != 1:
        raise OnnxError(
            f"expected one input and one output, found {len(model.inputs)} "
            f"and {len(model.outputs)}"
        )
    return model.inputs[0].dims, model.outputs[0].dims
