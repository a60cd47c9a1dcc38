"""Uncompressed RGB raster input (binary PPM) and bilinear resizing.

The accepted file is a binary PPM: the ASCII header ``P6 <width> <height>
<maxval>`` (whitespace separated, ``#`` comments allowed) followed by a
single whitespace byte and ``width * height * 3`` raw bytes in RGB row
order. ``maxval`` must be at most 255.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class RasterError(ValueError):
    pass


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise RasterError("truncated PPM header")
        tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise RasterError("PPM header must end with one whitespace byte")
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    """Decode binary PPM bytes to a ``(H, W, 3)`` uint8 array scaled to 0..255."""
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != b"P6":
        raise RasterError(f"expected a binary PPM (P6), got magic {tokens[0][:8]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise RasterError("PPM dimensions must be integers") from None
    if w < 1 or h < 1:
        raise RasterError(f"PPM dimensions must be positive, got {w}x{h}")
    if not 1 <= maxval <= 255:
        raise RasterError(f"PPM maxval must be in 1..255, got {maxval}")
    body = data[offset:]
    need = w * h * 3
    if len(body) != need:
        raise RasterError(f"PPM pixel data has {len(body)} bytes, expected {need}")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    if img.max(initial=0) > maxval:
        raise RasterError("PPM sample exceeds maxval")
    if maxval != 255:
        img = np.round(img.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return img


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise RasterError(f"expected (H, W, 3) uint8 pixels, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def to_uint8(chw: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` floats in [0, 1] to ``(H, W, 3)`` bytes."""
    return np.clip(np.round(np.moveaxis(chw, 0, -1) * 255.0), 0, 255).astype(np.uint8)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of ``(H, W, C)`` with half-pixel centers and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fy, fx = fy[:, None, None], fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def image_to_input(img: np.ndarray, resolution: int, dtype=np.float32) -> np.ndarray:
    """``(H, W, 3)`` bytes to a ``(3, R, R)`` model input in [0, 1]."""
    resized = resize_bilinear(img, resolution, resolution) / 255.0
    return np.ascontiguousarray(np.moveaxis(resized, -1, 0)).astype(dtype)
