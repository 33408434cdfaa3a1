"""Image file IO: binary PPM (P6, 8-bit) required, PNG optional via Pillow.

Pixels are float32 in [0, 1] internally and 8-bit per channel on disk.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ShapeError

try:  # PNG support is optional; PPM is the native format.
    from PIL import Image as _PILImage
except ImportError:  # pragma: no cover
    _PILImage = None


def to_bytes_img(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


def from_bytes_img(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32)) / np.float32(255.0)


def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {pixels.shape}")
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_bytes_img(pixels).tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    # header = magic, width, height, maxval; '#' comments allowed between fields
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ShapeError(f"truncated PPM header in {path}")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise ShapeError(f"not a binary PPM (P6) file: {path}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ShapeError(f"only 8-bit PPM supported, got maxval={maxval}")
    need = w * h * 3
    if len(data) - pos < need:
        raise ShapeError(f"PPM pixel data truncated in {path}")
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return from_bytes_img(raw.reshape(h, w, 3))


def write_png(path: str | os.PathLike, pixels: np.ndarray) -> None:
    if _PILImage is None:
        raise RuntimeError("PNG support requires Pillow (install extra 'png')")
    _PILImage.fromarray(to_bytes_img(pixels), mode="RGB").save(path, format="PNG")


def read_png(path: str | os.PathLike) -> np.ndarray:
    if _PILImage is None:
        raise RuntimeError("PNG support requires Pillow (install extra 'png')")
    with _PILImage.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return from_bytes_img(arr)


def png_available() -> bool:
    return _PILImage is not None


def write_image(path: str | os.PathLike, pixels: np.ndarray) -> None:
    if str(path).lower().endswith(".png"):
        write_png(path, pixels)
    else:
        write_ppm(path, pixels)


def read_image(path: str | os.PathLike) -> np.ndarray:
    if str(path).lower().endswith(".png"):
        return read_png(path)
    return read_ppm(path)
