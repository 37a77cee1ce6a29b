"""Binary PPM (P6) images and PGM (P5) masks, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

_WHITESPACE = b" \t\n\r\x0b\x0c"


def _parse_header(data: bytes, magic: bytes) -> tuple[int, int, int]:
    """Return (width, height, offset of the first raster byte)."""
    if data[:2] != magic:
        raise FormatError(f"expected magic {magic.decode()}, found {data[:2]!r}", 0)
    pos = 2
    values = []
    while len(values) < 3:
        # at least one whitespace byte separates fields; comments run to end of line
        start = pos
        while pos < len(data) and (data[pos] in _WHITESPACE or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < len(data) and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        if pos >= len(data):
            raise FormatError("truncated header", pos)
        if pos == start:
            raise FormatError("missing whitespace between header fields", pos)
        field_start = pos
        while pos < len(data) and chr(data[pos]).isdigit():
            pos += 1
        if pos == field_start:
            raise FormatError(f"expected a decimal number, found {data[pos:pos + 1]!r}", pos)
        values.append((int(data[field_start:pos]), field_start))
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise FormatError("header must end in a single whitespace byte", pos)
    (width, w_at), (height, h_at), (maxval, m_at) = values
    if width < 1:
        raise FormatError("width must be positive", w_at)
    if height < 1:
        raise FormatError("height must be positive", h_at)
    if maxval != 255:
        raise FormatError(f"only 8-bit files with maxval 255 are supported, got {maxval}", m_at)
    return width, height, pos + 1


def _read_raster(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    width, height, offset = _parse_header(data, magic)
    need = width * height * channels
    if len(data) - offset < need:
        raise FormatError(f"raster needs {need} bytes, file has {len(data) - offset}", len(data))
    raster = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset)
    return raster.reshape(height, width, channels)


def to_bytes(values) -> np.ndarray:
    """Quantise [0, 1] floats to bytes by rounding ``v * 255``."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(image) -> bytes:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"PPM needs a [3,H,W] image, got shape {image.shape}")
    _, h, w = image.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + to_bytes(image).transpose(1, 2, 0).tobytes()


def encode_pgm(mask) -> bytes:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise FormatError(f"PGM needs a 2-D mask, got shape {mask.shape}")
    h, w = mask.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + np.where(mask, 255, 0).astype(np.uint8).tobytes()


def write_ppm(path, image) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    """[3, H, W] float64 image with byte v mapped to v / 255."""
    raster = _read_raster(path, b"P6", 3)
    # C order matters: summation order in matmul and convolution follows the memory layout
    return np.ascontiguousarray(raster.transpose(2, 0, 1), dtype=np.float64) / 255.0


def write_pgm(path, mask) -> None:
    Path(path).write_bytes(encode_pgm(mask))


def read_pgm(path) -> np.ndarray:
    """Binary [H, W] mask; bytes of 128 and above are foreground."""
    return _read_raster(path, b"P5", 1)[..., 0] >= 128
