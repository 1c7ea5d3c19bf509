"""Binary PPM/PGM image files.

Images are written as P6 (maxval 255, 8-bit RGB); instance masks as P5
(maxval 65535, big-endian 16-bit) so up to 65535 instance ids round-trip.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ShapeError


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary P6."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, maxval, data = _read_pnm(f)
    if magic != b"P6":
        raise ShapeError(f"{path}: not a P6 file")
    arr = np.frombuffer(data, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    return arr.astype(np.float64) / float(maxval)


def write_pgm16(path: str | Path, grid: np.ndarray) -> None:
    """Write an (H, W) non-negative integer grid as binary P5, 16-bit big-endian."""
    if grid.ndim != 2:
        raise ShapeError(f"expected (H, W) grid, got {grid.shape}")
    if grid.min() < 0 or grid.max() > 65535:
        raise ShapeError("mask ids must be within [0, 65535]")
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(grid.astype(">u2").tobytes())


def read_pgm16(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, maxval, data = _read_pnm(f)
    if magic != b"P5":
        raise ShapeError(f"{path}: not a P5 file")
    dtype = ">u2" if maxval > 255 else np.uint8
    arr = np.frombuffer(data, dtype=dtype, count=h * w).reshape(h, w)
    return arr.astype(np.int32)


def _read_pnm(f):
    magic = f.read(2)
    fields: list[int] = []
    while len(fields) < 3:
        tok = _next_token(f)
        fields.append(int(tok))
    w, h, maxval = fields
    return magic, w, h, maxval, f.read()


def _next_token(f) -> bytes:
    """Next whitespace-delimited token, skipping '#' comment lines."""
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise ShapeError("truncated PNM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch
