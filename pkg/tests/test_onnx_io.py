import numpy as np
import pytest

from melanoscope.onnx_io import (
    OnnxError,
    OnnxModel,
    OnnxNode,
    OnnxValueInfo,
    io_shapes,
    load_model,
    run_model,
    save_model,
)


def conv_oracle(x, w, b, stride=1):
    """Direct nested-loop convolution for small fixtures."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    out = np.zeros((n, f, oh, ow), dtype=np.float64)
    for ni in range(n):
        for fi in range(f):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += (
                                    x[ni, ci, i * stride + a, j * stride + bb]
                                    * w[fi, ci, a, bb]
                                )
                    out[ni, fi, i, j] = acc + (b[fi] if b is not None else 0.0)
    return out.astype(np.float32)


def maxpool_oracle(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=np.float32)
    for ni in range(n):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[ni, ci, i, j] = x[ni, ci, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
    return out


def small_cnn_model(rng, out_width=2):
    w_conv = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b_conv = rng.normal(size=(4,)).astype(np.float32)
    w_fc = rng.normal(size=(out_width, 4 * 3 * 3)).astype(np.float32)
    b_fc = rng.normal(size=(out_width,)).astype(np.float32)
    model = OnnxModel(
        nodes=[
            OnnxNode("Conv", ("input", "w0", "b0"), ("c0",), {
                "kernel_shape": (3, 3), "pads": (1, 1, 1, 1), "strides": (1, 1),
            }),
            OnnxNode("Relu", ("c0",), ("r0",), {}),
            OnnxNode("MaxPool", ("r0",), ("p0",), {"kernel_shape": (2, 2), "strides": (2, 2)}),
            OnnxNode("Flatten", ("p0",), ("flat",), {"axis": 1}),
            OnnxNode("Gemm", ("flat", "wfc", "bfc"), ("logits",), {"transB": 1}),
        ],
        initializers={"w0": w_conv, "b0": b_conv, "wfc": w_fc, "bfc": b_fc},
        inputs=[OnnxValueInfo("input", ("batch", 3, 6, 6))],
        outputs=[OnnxValueInfo("logits", ("batch", out_width))],
    )
    return model, (w_conv, b_conv, w_fc, b_fc)


def test_conv_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 2, 5, 5)).astype(np.float32)
    w = rng.normal(size=(3, 2, 2, 2)).astype(np.float32)
    b = rng.normal(size=(3,)).astype(np.float32)
    model = OnnxModel(
        nodes=[OnnxNode("Conv", ("x", "w", "b"), ("y",), {"kernel_shape": (2, 2)})],
        initializers={"w": w, "b": b},
        inputs=[OnnxValueInfo("x", ("batch", 2, 5, 5))],
        outputs=[OnnxValueInfo("y", ("batch", 3, 4, 4))],
    )
    got = run_model(model, {"x": x})["y"]
    assert np.allclose(got, conv_oracle(x, w, b), atol=1e-5)


def test_conv_stride_and_pad(rng):
    x = rng.normal(size=(1, 1, 6, 6)).astype(np.float32)
    w = rng.normal(size=(2, 1, 3, 3)).astype(np.float32)
    model = OnnxModel(
        nodes=[OnnxNode("Conv", ("x", "w"), ("y",), {
            "kernel_shape": (3, 3), "pads": (1, 1, 1, 1), "strides": (2, 2),
        })],
        initializers={"w": w},
        inputs=[OnnxValueInfo("x", ("batch", 1, 6, 6))],
        outputs=[OnnxValueInfo("y", ("batch", 2, 3, 3))],
    )
    got = run_model(model, {"x": x})["y"]
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = conv_oracle(padded, w, None, stride=2)
    assert np.allclose(got, expected, atol=1e-5)


def test_maxpool_matches_oracle(rng):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    model = OnnxModel(
        nodes=[OnnxNode("MaxPool", ("x",), ("y",), {"kernel_shape": (2, 2), "strides": (2, 2)})],
        inputs=[OnnxValueInfo("x", ("batch", 3, 8, 8))],
        outputs=[OnnxValueInfo("y", ("batch", 3, 4, 4))],
    )
    got = run_model(model, {"x": x})["y"]
    assert np.array_equal(got, maxpool_oracle(x))


def test_gemm_matches_numpy(rng):
    a = rng.normal(size=(4, 6)).astype(np.float32)
    w = rng.normal(size=(3, 6)).astype(np.float32)
    b = rng.normal(size=(3,)).astype(np.float32)
    model = OnnxModel(
        nodes=[OnnxNode("Gemm", ("a", "w", "b"), ("y",), {"transB": 1})],
        initializers={"w": w, "b": b},
        inputs=[OnnxValueInfo("a", ("batch", 6))],
        outputs=[OnnxValueInfo("y", ("batch", 3))],
    )
    got = run_model(model, {"a": a})["y"]
    assert np.allclose(got, a @ w.T + b, atol=1e-6)


def test_save_load_round_trip(tmp_path, rng):
    model, _ = small_cnn_model(rng)
    x = rng.normal(size=(3, 3, 6, 6)).astype(np.float32)
    before = run_model(model, {"input": x})["logits"]
    path = tmp_path / "m.onnx"
    save_model(model, path)
    loaded = load_model(path)
    assert [n.op_type for n in loaded.nodes] == [n.op_type for n in model.nodes]
    assert io_shapes(loaded) == (("batch", 3, 6, 6), ("batch", 2))
    after = run_model(loaded, {"input": x})["logits"]
    assert np.array_equal(before, after)


def test_attrs_survive_round_trip(tmp_path, rng):
    model, _ = small_cnn_model(rng)
    save_model(model, tmp_path / "m.onnx")
    loaded = load_model(tmp_path / "m.onnx")
    conv = loaded.nodes[0]
    assert conv.attrs["pads"] == (1, 1, 1, 1)
    assert conv.attrs["kernel_shape"] == (3, 3)
    assert loaded.nodes[-1].attrs["transB"] == 1


def test_unsupported_op(rng):
    model = OnnxModel(
        nodes=[OnnxNode("LSTM", ("x",), ("y",), {})],
        inputs=[OnnxValueInfo("x", ("batch", 4))],
        outputs=[OnnxValueInfo("y", ("batch", 4))],
    )
    with pytest.raises(OnnxError, match="LSTM"):
        run_model(model, {"x": np.zeros((1, 4), dtype=np.float32)})


def test_missing_input(rng):
    model, _ = small_cnn_model(rng)
    with pytest.raises(OnnxError, match="missing model input"):
        run_model(model, {})


def test_not_a_model(tmp_path):
    path = tmp_path / "junk.onnx"
    path.write_bytes(b"\x00\x01junk")
    with pytest.raises(OnnxError):
        load_model(path)


def test_reshape_and_global_pool(rng):
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    model = OnnxModel(
        nodes=[
            OnnxNode("GlobalAveragePool", ("x",), ("g",), {}),
            OnnxNode("Reshape", ("g", "shape"), ("y",), {}),
        ],
        initializers={"shape": np.array([0, 3], dtype=np.int64)},
        inputs=[OnnxValueInfo("x", ("batch", 3, 4, 4))],
        outputs=[OnnxValueInfo("y", ("batch", 3))],
    )
    got = run_model(model, {"x": x})["y"]
    assert np.allclose(got, x.mean(axis=(2, 3)), atol=1e-6)
