import io

import numpy as np
import pytest
from PIL import Image

from melanoscope.png_io import (
    PngFormatError,
    PngRowReader,
    PngRowWriter,
    png_info,
    read_png,
    write_png,
)

from conftest import encode_png_with_filters


def test_round_trip_rgb(tmp_path, rng):
    arr = rng.integers(0, 256, (37, 53, 3), dtype=np.uint8)
    path = tmp_path / "a.png"
    write_png(path, arr)
    assert np.array_equal(read_png(path), arr)


def test_round_trip_gray(tmp_path, rng):
    arr = rng.integers(0, 256, (17, 9), dtype=np.uint8)
    path = tmp_path / "g.png"
    write_png(path, arr)
    assert np.array_equal(read_png(path)[:, :, 0], arr)


def test_pil_reads_our_files(tmp_path, rng):
    arr = rng.integers(0, 256, (40, 25, 3), dtype=np.uint8)
    path = tmp_path / "ours.png"
    write_png(path, arr)
    assert np.array_equal(np.asarray(Image.open(path).convert("RGB")), arr)


def test_we_read_pil_files(tmp_path, rng):
    arr = rng.integers(0, 256, (31, 64, 3), dtype=np.uint8)
    path = tmp_path / "pil.png"
    Image.fromarray(arr).save(path)
    assert np.array_equal(read_png(path), arr)


def test_we_read_pil_rgba(tmp_path, rng):
    arr = rng.integers(0, 256, (12, 15, 4), dtype=np.uint8)
    path = tmp_path / "rgba.png"
    Image.fromarray(arr, mode="RGBA").save(path)
    assert np.array_equal(read_png(path), arr[:, :, :3])


@pytest.mark.parametrize("filters", [[0], [1], [2], [3], [4], [0, 1, 2, 3, 4]])
def test_all_filter_types(tmp_path, rng, filters):
    arr = rng.integers(0, 256, (23, 19, 3), dtype=np.uint8)
    path = tmp_path / "filt.png"
    path.write_bytes(encode_png_with_filters(arr, filters))
    # cross-check the reference encoder itself against PIL
    assert np.array_equal(np.asarray(Image.open(path).convert("RGB")), arr)
    assert np.array_equal(read_png(path), arr)


def test_filtered_gray(tmp_path, rng):
    arr = rng.integers(0, 256, (14, 11, 1), dtype=np.uint8)
    path = tmp_path / "fg.png"
    path.write_bytes(encode_png_with_filters(arr, [4, 3, 1]))
    assert np.array_equal(read_png(path), arr)


def test_streaming_bands_match_full_read(tmp_path, rng):
    arr = rng.integers(0, 256, (101, 47, 3), dtype=np.uint8)
    path = tmp_path / "s.png"
    write_png(path, arr)
    with PngRowReader(path) as reader:
        got = [(y0, band.copy()) for y0, band in reader.iter_bands(13)]
    assembled = np.concatenate([band for _, band in got], axis=0)
    assert [y for y, _ in got] == list(range(0, 101, 13))
    assert np.array_equal(assembled, arr)


def test_skip_then_read(tmp_path, rng):
    arr = rng.integers(0, 256, (60, 20, 3), dtype=np.uint8)
    path = tmp_path / "skip.png"
    write_png(path, arr)
    with PngRowReader(path) as reader:
        reader.skip_rows(25)
        band = reader.read_rows(10)
    assert np.array_equal(band, arr[25:35])


def test_skip_with_filters(tmp_path, rng):
    arr = rng.integers(0, 256, (30, 8, 3), dtype=np.uint8)
    path = tmp_path / "sf.png"
    path.write_bytes(encode_png_with_filters(arr, [2, 4]))
    with PngRowReader(path) as reader:
        reader.skip_rows(11)
        band = reader.read_rows(7)
    assert np.array_equal(band, arr[11:18])


def test_png_info_header_only(tmp_path, rng):
    arr = rng.integers(0, 256, (6, 7, 3), dtype=np.uint8)
    path = tmp_path / "i.png"
    write_png(path, arr)
    info = png_info(path)
    assert (info.width, info.height, info.channels) == (7, 6, 3)


def test_not_a_png(tmp_path):
    path = tmp_path / "bad.png"
    path.write_bytes(b"definitely not a png")
    with pytest.raises(PngFormatError):
        png_info(path)


def test_truncated_stream(tmp_path, rng):
    arr = rng.integers(0, 256, (20, 20, 3), dtype=np.uint8)
    path = tmp_path / "t.png"
    write_png(path, arr)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(PngFormatError):
        read_png(path)


def test_writer_rejects_wrong_row_count(tmp_path, rng):
    buf = io.BytesIO()
    writer = PngRowWriter(buf, width=4, height=10, channels=3)
    writer.write_rows(np.zeros((3, 4, 3), dtype=np.uint8))
    with pytest.raises(PngFormatError):
        writer.close()


def test_read_past_height(tmp_path, rng):
    arr = rng.integers(0, 256, (5, 5, 3), dtype=np.uint8)
    path = tmp_path / "p.png"
    write_png(path, arr)
    with PngRowReader(path) as reader:
        reader.read_rows(5)
        with pytest.raises(PngFormatError):
            reader.read_rows(1)


def test_deterministic_bytes(tmp_path, rng):
    arr = rng.integers(0, 256, (33, 29, 3), dtype=np.uint8)
    p1, p2 = tmp_path / "d1.png", tmp_path / "d2.png"
    write_png(p1, arr)
    write_png(p2, arr)
    assert p1.read_bytes() == p2.read_bytes()
