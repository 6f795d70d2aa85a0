"""
Binary portable pixmap (P6) and graymap (P5) reading & writing, 8-bit only.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from errors import ParseError

MAXVAL = 255
WHITESPACE = b" \t\n\r\v\f"


def _encode(magic: bytes, raster: np.ndarray) -> bytes:
    height, width = raster.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, MAXVAL)
    return header + np.ascontiguousarray(raster, dtype=np.uint8).tobytes()


def write_ppm(path, rgb: np.ndarray) -> None:
    """ Write an (h, w, 3) uint8 array as binary P6. """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"P6 raster must be (h, w, 3) uint8, got {rgb.shape} {rgb.dtype}")
    Path(path).write_bytes(_encode(b"P6", rgb))


def write_pgm(path, gray: np.ndarray) -> None:
    """ Write an (h, w) uint8 array as binary P5. """
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"P5 raster must be (h, w) uint8, got {gray.shape} {gray.dtype}")
    Path(path).write_bytes(_encode(b"P5", gray))


class _HeaderReader:

    def __init__(self, path, data: bytes) -> None:
        self.path = path
        self.data = data
        self.pos = 0

    def skip_space(self) -> None:
        while self.pos < len(self.data):
            byte = self.data[self.pos:self.pos + 1]
            if byte == b"#":
                end = self.data.find(b"\n", self.pos)
                self.pos = len(self.data) if end < 0 else end + 1
            elif byte in WHITESPACE:
                self.pos += 1
            else:
                return

    def integer(self, what: str) -> int:
        self.skip_space()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos:self.pos + 1].isdigit():
            self.pos += 1
        if start == self.pos:
            raise ParseError(self.path, start, f"expected {what}")
        return int(self.data[start:self.pos])


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise ParseError(path, 0, "file not found") from None
    if data[:2] != magic:
        raise ParseError(path, 0, f"expected magic {magic.decode()}, got {data[:2]!r}")

    reader = _HeaderReader(path, data)
    reader.pos = 2
    width = reader.integer("width")
    height = reader.integer("height")
    maxval_at = reader.pos
    maxval = reader.integer("maxval")
    if maxval != MAXVAL:
        raise ParseError(path, maxval_at, f"only maxval {MAXVAL} is supported, got {maxval}")
    if reader.pos >= len(data) or data[reader.pos:reader.pos + 1] not in WHITESPACE:
        raise ParseError(path, reader.pos, "expected a single whitespace byte before the raster")
    start = reader.pos + 1

    expected = width * height * channels
    available = len(data) - start
    if available < expected:
        raise ParseError(path, len(data), f"truncated raster: expected {expected} bytes, found {available}")
    if available > expected:
        raise ParseError(path, start + expected, f"{available - expected} trailing bytes after the raster")
    raster = np.frombuffer(data, dtype=np.uint8, count=expected, offset=start)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return raster.reshape(shape).copy()


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5", 1)
