"""Streaming PNG reading and writing.

Slide pyramids store one PNG per level, and gigapixel levels must never be
decoded whole. PNG is a scanline format, so this module exposes row-band
streaming in both directions:

- :class:`PngRowReader` decompresses and unfilters rows incrementally,
  keeping only the previous scanline in memory.
- :class:`PngRowWriter` accepts row bands and emits IDAT chunks as the
  compressor produces output.

Supported subset: 8-bit depth, grayscale / RGB / RGBA (alpha is dropped on
read), no interlacing, no palette. That covers everything this package
writes plus PIL-authored RGB(A) files.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

_COLOR_TYPE_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}
_IDAT_FLUSH_BYTES = 1 << 20


class PngFormatError(ValueError):
    """Raised for malformed or unsupported PNG content."""


@dataclass(frozen=True)
class PngInfo:
    width: int
    height: int
    channels: int
    bit_depth: int
    color_type: int
    interlace: int


def _read_chunk(fh: BinaryIO) -> tuple[bytes, bytes]:
    header = fh.read(8)
    if len(header) < 8:
        raise PngFormatError("truncated PNG: missing chunk header")
    (length,) = struct.unpack(">I", header[:4])
    ctype = header[4:8]
    data = fh.read(length)
    if len(data) < length:
        raise PngFormatError(f"truncated PNG: incomplete {ctype!r} chunk")
    fh.read(4)  # CRC; not verified on read
    return ctype, data


def _parse_ihdr(data: bytes) -> PngInfo:
    if len(data) != 13:
        raise PngFormatError("invalid IHDR length")
    width, height, bit_depth, color_type, _comp, _filt, interlace = struct.unpack(
        ">IIBBBBB", data
    )
    if bit_depth != 8:
        raise PngFormatError(f"unsupported bit depth {bit_depth} (only 8-bit)")
    if color_type not in _COLOR_TYPE_CHANNELS:
        raise PngFormatError(f"unsupported color type {color_type}")
    if interlace != 0:
        raise PngFormatError("interlaced PNG not supported")
    return PngInfo(
        width=width,
        height=height,
        channels=_COLOR_TYPE_CHANNELS[color_type],
        bit_depth=bit_depth,
        color_type=color_type,
        interlace=interlace,
    )


def png_info(path: str | Path) -> PngInfo:
    """Parse image geometry from the PNG header without touching pixel data."""
    with open(path, "rb") as fh:
        if fh.read(8) != PNG_SIGNATURE:
            raise PngFormatError(f"not a PNG file: {path}")
        ctype, data = _read_chunk(fh)
        if ctype != b"IHDR":
            raise PngFormatError("PNG missing IHDR chunk")
        return _parse_ihdr(data)


def _unfilter_row(
    ftype: int, raw: np.ndarray, prev: np.ndarray, bpp: int
) -> np.ndarray:
    """Reverse one scanline filter. `raw` and `prev` are uint8 of equal length."""
    if ftype == 0:
        return raw
    if ftype == 2:  # Up
        return raw + prev
    if ftype == 1:  # Sub: per-channel prefix sum
        cols = raw.reshape(-1, bpp).astype(np.uint64)
        return (np.cumsum(cols, axis=0) & 0xFF).astype(np.uint8).reshape(-1)
    recon = np.empty_like(raw)
    if ftype == 3:  # Average: left-recursive, loop over pixels
        left = np.zeros(bpp, dtype=np.uint16)
        prev16 = prev.astype(np.uint16)
        for x in range(0, raw.size, bpp):
            px = (raw[x : x + bpp] + ((left + prev16[x : x + bpp]) >> 1)).astype(
                np.uint8
            )
            recon[x : x + bpp] = px
            left = px.astype(np.uint16)
        return recon
    if ftype == 4:  # Paeth
        left = np.zeros(bpp, dtype=np.int32)
        upleft = np.zeros(bpp, dtype=np.int32)
        prev32 = prev.astype(np.int32)
        for x in range(0, raw.size, bpp):
            up = prev32[x : x + bpp]
            p = left + up - upleft
            pa, pb, pc = np.abs(p - left), np.abs(p - up), np.abs(p - upleft)
            pred = np.where((pa <= pb) & (pa <= pc), left, np.where(pb <= pc, up, upleft))
            px = ((raw[x : x + bpp].astype(np.int32) + pred) & 0xFF).astype(np.uint8)
            recon[x : x + bpp] = px
            upleft = up
            left = px.astype(np.int32)
        return recon
    raise PngFormatError(f"unknown scanline filter {ftype}")


class PngRowReader:
    """Sequential scanline reader; one pass, top to bottom.

    Memory use is bounded by the decompressor window plus two scanlines,
    independent of image height.
    """

    _READ_BLOCK = 1 << 16

    def __init__(self, path: str | Path):
        self._fh: BinaryIO = open(path, "rb")
        try:
            if self._fh.read(8) != PNG_SIGNATURE:
                raise PngFormatError(f"not a PNG file: {path}")
            ctype, data = _read_chunk(self._fh)
            if ctype != b"IHDR":
                raise PngFormatError("PNG missing IHDR chunk")
            self.info = _parse_ihdr(data)
        except Exception:
            self._fh.close()
            raise
        self._decomp = zlib.decompressobj()
        self._pending = bytearray()
        self._offset = 0
        self._idat_remaining = 0
        self._done_idat = False
        self._row = 0
        self._stride = self.info.width * self.info.channels
        self._prev = np.zeros(self._stride, dtype=np.uint8)

    @property
    def width(self) -> int:
        return self.info.width

    @property
    def height(self) -> int:
        return self.info.height

    @property
    def channels(self) -> int:
        return self.info.channels

    def __enter__(self) -> "PngRowReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        self._fh.close()

    def _next_compressed_block(self) -> bytes:
        """Return the next slice of raw deflate bytes from the IDAT stream."""
        while True:
            if self._idat_remaining > 0:
                take = min(self._idat_remaining, self._READ_BLOCK)
                data = self._fh.read(take)
                if len(data) < take:
                    raise PngFormatError("truncated PNG: incomplete IDAT chunk")
                self._idat_remaining -= take
                if self._idat_remaining == 0:
                    self._fh.read(4)  # chunk CRC
                return data
            header = self._fh.read(8)
            if len(header) < 8:
                raise PngFormatError("truncated PNG: missing chunk header")
            (length,) = struct.unpack(">I", header[:4])
            ctype = header[4:8]
            if ctype == b"IDAT":
                self._idat_remaining = length
                if length == 0:
                    self._fh.read(4)
                continue
            self._fh.read(length + 4)
            if ctype == b"IEND":
                self._done_idat = True
                return b""

    def _fill(self, need: int) -> None:
        # Compact the consumed prefix before growing the buffer.
        if self._offset > 0 and self._offset >= len(self._pending) // 2:
            del self._pending[: self._offset]
            self._offset = 0
        while len(self._pending) - self._offset < need:
            # Cap output per step so highly compressible runs (blank slide
            # background) cannot balloon the buffer.
            budget = need - (len(self._pending) - self._offset) + self._READ_BLOCK
            if self._decomp.unconsumed_tail:
                self._pending += self._decomp.decompress(
                    self._decomp.unconsumed_tail, budget
                )
                continue
            if self._done_idat:
                tail = self._decomp.decompress(b"", budget)
                if tail:
                    self._pending += tail
                    continue
                if len(self._pending) - self._offset < need:
                    raise PngFormatError("PNG pixel stream ended early")
                return
            block = self._next_compressed_block()
            if block:
                self._pending += self._decomp.decompress(block, budget)

    def _next_scanline(self) -> tuple[int, np.ndarray]:
        need = 1 + self._stride
        self._fill(need)
        start = self._offset
        ftype = self._pending[start]
        raw = np.frombuffer(
            self._pending, dtype=np.uint8, count=self._stride, offset=start + 1
        ).copy()
        self._offset = start + need
        return ftype, raw

    def read_rows(self, count: int) -> np.ndarray:
        """Read `count` rows as a (count, width, channels) uint8 array."""
        if self._row + count > self.info.height:
            raise PngFormatError("read past image height")
        out = np.empty((count, self.info.width, self.info.channels), dtype=np.uint8)
        for i in range(count):
            ftype, raw = self._next_scanline()
            recon = _unfilter_row(ftype, raw, self._prev, self.info.channels)
            self._prev = recon
            out[i] = recon.reshape(self.info.width, self.info.channels)
        self._row += count
        return out

    def skip_rows(self, count: int) -> None:
        """Advance without materializing rows (filters still need unfiltering)."""
        if self._row + count > self.info.height:
            raise PngFormatError("skip past image height")
        for _ in range(count):
            ftype, raw = self._next_scanline()
            if ftype == 0:
                self._prev = raw
            else:
                self._prev = _unfilter_row(ftype, raw, self._prev, self.info.channels)
        self._row += count

    def iter_bands(
        self, band_rows: int, y_start: int = 0, y_stop: int | None = None
    ) -> Iterator[tuple[int, np.ndarray]]:
        """Yield (y0, rows) bands covering [y_start, y_stop)."""
        stop = self.info.height if y_stop is None else y_stop
        if y_start > self._row:
            self.skip_rows(y_start - self._row)
        y = y_start
        while y < stop:
            n = min(band_rows, stop - y)
            yield y, self.read_rows(n)
            y += n


def _chunk(ctype: bytes, data: bytes) -> bytes:
    crc = zlib.crc32(ctype + data) & 0xFFFFFFFF
    return struct.pack(">I", len(data)) + ctype + data + struct.pack(">I", crc)


class PngRowWriter:
    """Sequential scanline writer using filter type 0 for every row."""

    def __init__(
        self,
        fh: BinaryIO,
        width: int,
        height: int,
        channels: int = 3,
        compress_level: int = 6,
    ):
        if channels not in (1, 3):
            raise PngFormatError("writer supports 1 (gray) or 3 (RGB) channels")
        if width <= 0 or height <= 0:
            raise PngFormatError("image dimensions must be positive")
        self.width = width
        self.height = height
        self.channels = channels
        self._fh = fh
        self._rows_written = 0
        self._comp = zlib.compressobj(compress_level)
        self._buf = bytearray()
        color_type = 0 if channels == 1 else 2
        fh.write(PNG_SIGNATURE)
        ihdr = struct.pack(">IIBBBBB", width, height, 8, color_type, 0, 0, 0)
        fh.write(_chunk(b"IHDR", ihdr))

    def write_rows(self, rows: np.ndarray) -> None:
        rows = np.ascontiguousarray(rows, dtype=np.uint8)
        if rows.ndim == 2:
            rows = rows[:, :, np.newaxis]
        n, w, c = rows.shape
        if w != self.width or c != self.channels:
            raise PngFormatError(
                f"row shape ({w},{c}) does not match image ({self.width},{self.channels})"
            )
        if self._rows_written + n > self.height:
            raise PngFormatError("wrote past declared image height")
        filtered = np.zeros((n, 1 + w * c), dtype=np.uint8)
        filtered[:, 1:] = rows.reshape(n, w * c)
        self._buf += self._comp.compress(filtered.tobytes())
        self._rows_written += n
        while len(self._buf) >= _IDAT_FLUSH_BYTES:
            self._fh.write(_chunk(b"IDAT", bytes(self._buf[:_IDAT_FLUSH_BYTES])))
            del self._buf[:_IDAT_FLUSH_BYTES]

    def close(self) -> None:
        if self._rows_written != self.height:
            raise PngFormatError(
                f"wrote {self._rows_written} of {self.height} declared rows"
            )
        self._buf += self._comp.flush()
        if self._buf:
            self._fh.write(_chunk(b"IDAT", bytes(self._buf)))
            self._buf.clear()
        self._fh.write(_chunk(b"IEND", b""))

    def __enter__(self) -> "PngRowWriter":
        return self

    def __exit__(self, exc_type, *exc) -> None:
        if exc_type is None:
            self.close()


def write_png(path: str | Path, array: np.ndarray, compress_level: int = 6) -> None:
    """Write a full (h, w) or (h, w, 3) uint8 array as a PNG."""
    array = np.asarray(array)
    channels = 1 if array.ndim == 2 else array.shape[2]
    with open(path, "wb") as fh:
        with PngRowWriter(
            fh, array.shape[1], array.shape[0], channels, compress_level
        ) as writer:
            writer.write_rows(array)


def read_png(path: str | Path) -> np.ndarray:
    """Read a whole PNG as (h, w, channels) uint8; alpha is dropped."""
    with PngRowReader(path) as reader:
        data = reader.read_rows(reader.height)
    if data.shape[2] == 4:
        data = data[:, :, :3]
    elif data.shape[2] == 2:
        data = data[:, :, :1]
    return data
