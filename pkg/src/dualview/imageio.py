"""Image value types and binary NetPBM (P5/P6) IO.

Intensities are float64 in [0, 1]. Files are read and written with maxval
255 (depth 8) or 65535 (depth 16); 16-bit samples are big-endian.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "GrayImage",
    "RgbImage",
    "NetpbmError",
    "HeaderError",
    "TruncatedError",
    "UnsupportedFormatError",
    "read_pgm",
    "write_pgm",
    "read_ppm",
    "write_ppm",
    "encode_netpbm",
    "decode_netpbm",
]


class NetpbmError(ValueError):
    """Base class for NetPBM decoding failures."""


class HeaderError(NetpbmError):
    pass


class TruncatedError(NetpbmError):
    pass


class UnsupportedFormatError(NetpbmError):
    pass


def _check_range(data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise ValueError("image contains non-finite values")
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise ValueError("image intensities must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class GrayImage:
    """A single-plane raster; ``data`` has shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"GrayImage needs a non-empty 2-D array, got shape {data.shape}")
        _check_range(data)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_flat(cls, width: int, height: int, values) -> "GrayImage":
        values = np.asarray(values, dtype=np.float64)
        if values.size != width * height:
            raise ValueError("data length must equal width*height")
        return cls(values.reshape(height, width))

    def __eq__(self, other):
        return isinstance(other, GrayImage) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class RgbImage:
    """Three planes (r, g, b) stacked as an array of shape (3, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] != 3 or data.shape[1] < 1 or data.shape[2] < 1:
            raise ValueError(f"RgbImage needs shape (3, H, W), got {data.shape}")
        _check_range(data)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_planes(cls, r: GrayImage, g: GrayImage, b: GrayImage) -> "RgbImage":
        if not (r.data.shape == g.data.shape == b.data.shape):
            raise ValueError("planes must share dimensions")
        return cls(np.stack([r.data, g.data, b.data]))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def r(self) -> GrayImage:
        return GrayImage(self.data[0])

    @property
    def g(self) -> GrayImage:
        return GrayImage(self.data[1])

    @property
    def b(self) -> GrayImage:
        return GrayImage(self.data[2])

    def __eq__(self, other):
        return isinstance(other, RgbImage) and np.array_equal(self.data, other.data)


_MAXVAL = {8: 255, 16: 65535}


def _quantize(data: np.ndarray, depth: int) -> np.ndarray:
    try:
        maxval = _MAXVAL[depth]
    except KeyError:
        raise ValueError(f"depth must be 8 or 16, got {depth}") from None
    # round half up
    q = np.floor(data * maxval + 0.5)
    q = np.clip(q, 0, maxval)
    return q.astype(">u2" if depth == 16 else "u1")


def encode_netpbm(samples: np.ndarray, channels: int, depth: int) -> bytes:
    """Serialize (H, W) or (H, W, 3) float samples to canonical P5/P6 bytes."""
    magic = b"P5" if channels == 1 else b"P6"
    height, width = samples.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, _MAXVAL[depth])
    return header + _quantize(samples, depth).tobytes()


def _parse_header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    magic = buf[:2]
    if len(magic) < 2:
        raise HeaderError("file too short for a NetPBM header")
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormatError(f"unsupported NetPBM magic {magic!r}")
    pos = 2
    fields = []
    n = len(buf)
    while len(fields) < 3:
        # skip whitespace and comments
        while pos < n:
            c = buf[pos : pos + 1]
            if c.isspace():
                pos += 1
            elif c == b"#":
                end = buf.find(b"\n", pos)
                pos = n if end < 0 else end + 1
            else:
                break
        start = pos
        while pos < n and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise HeaderError("malformed NetPBM header")
        fields.append(int(buf[start:pos]))
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise HeaderError("header must end with a single whitespace byte")
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise HeaderError("image dimensions must be positive")
    if maxval not in (255, 65535):
        raise UnsupportedFormatError(f"unsupported maxval {maxval}")
    return magic, width, height, maxval, pos


def decode_netpbm(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode P5/P6 bytes into float samples ((H, W) or (H, W, 3)) and channel count."""
    magic, width, height, maxval, offset = _parse_header(buf)
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype("u1") if maxval == 255 else np.dtype(">u2")
    count = width * height * channels
    need = count * dtype.itemsize
    payload = buf[offset : offset + need]
    if len(payload) < need:
        raise TruncatedError(f"expected {need} payload bytes, found {len(payload)}")
    samples = np.frombuffer(payload, dtype=dtype).astype(np.float64) / maxval
    shape = (height, width) if channels == 1 else (height, width, 3)
    return samples.reshape(shape), channels


def read_pgm(path) -> GrayImage:
    samples, channels = decode_netpbm(Path(path).read_bytes())
    if channels != 1:
        raise UnsupportedFormatError("expected a P5 (grayscale) file")
    return GrayImage(samples)


def write_pgm(img: GrayImage, path, depth: int = 16) -> None:
    Path(path).write_bytes(encode_netpbm(img.data, 1, depth))


def read_ppm(path) -> RgbImage:
    samples, channels = decode_netpbm(Path(path).read_bytes())
    if channels != 3:
        raise UnsupportedFormatError("expected a P6 (RGB) file")
    return RgbImage(np.moveaxis(samples, -1, 0))


def write_ppm(img: RgbImage, path, depth: int = 16) -> None:
    Path(path).write_bytes(encode_netpbm(np.moveaxis(img.data, 0, -1), 3, depth))
