import struct
import sys
import zlib
from pathlib import Path

import numpy as np
import pytest

from melanoscope.slide_io import write_pyramid


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when == "call" and "test_acceptance" in report.nodeid:
        status = "PASS" if report.passed else "FAIL"
        name = report.nodeid.split("::")[-1]
        sys.stderr.write(f"[{status}] {name}\n")
        sys.stderr.flush()


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def make_pyramid(tmp_path: Path, slide_id: str, levels: list[np.ndarray], **kwargs) -> Path:
    return write_pyramid(tmp_path / slide_id, slide_id, levels, **kwargs)


def box_downsample(level0: np.ndarray, factor: int) -> np.ndarray:
    """Independent reference: plain block mean, rounded half up."""
    h, w = level0.shape[:2]
    blocks = level0[: h // factor * factor, : w // factor * factor].astype(np.float64)
    blocks = blocks.reshape(h // factor, factor, w // factor, factor, 3).mean(axis=(1, 3))
    return np.floor(blocks + 0.5).astype(np.uint8)


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def encode_png_with_filters(array: np.ndarray, filter_types: list[int]) -> bytes:
    """Reference PNG encoder applying a chosen filter per scanline.

    Used to exercise every unfilter path in the reader; written from the
    PNG spec independently of the package's decoder.
    """
    h, w, c = array.shape
    bpp = c
    color_type = {1: 0, 3: 2, 4: 6}[c]
    raw_rows = array.reshape(h, w * c).astype(np.int64)
    prev = np.zeros(w * c, dtype=np.int64)
    stream = bytearray()
    for y in range(h):
        ft = filter_types[y % len(filter_types)]
        row = raw_rows[y]
        filt = np.zeros(w * c, dtype=np.int64)
        for i in range(w * c):
            left = row[i - bpp] if i >= bpp else 0
            up = prev[i]
            upleft = prev[i - bpp] if i >= bpp else 0
            if ft == 0:
                pred = 0
            elif ft == 1:
                pred = left
            elif ft == 2:
                pred = up
            elif ft == 3:
                pred = (left + up) // 2
            else:
                pred = _paeth(left, up, upleft)
            filt[i] = (row[i] - pred) % 256
        stream.append(ft)
        stream += filt.astype(np.uint8).tobytes()
        prev = row

    def chunk(ctype: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + ctype
            + data
            + struct.pack(">I", zlib.crc32(ctype + data) & 0xFFFFFFFF)
        )

    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(bytes(stream)))
        + chunk(b"IEND", b"")
    )
