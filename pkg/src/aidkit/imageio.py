"""Binary PGM (P5) images and simple grid layouts."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArchiveError, DimensionError

SEPARATOR = 255


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 0..255 with round-half-up and clamping."""
    v = np.floor((np.asarray(img, dtype=np.float64) + 1.0) / 2.0 * 255.0 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def from_bytes(px: np.ndarray) -> np.ndarray:
    return px.astype(np.float64) / 255.0 * 2.0 - 1.0


def encode_pgm(px: np.ndarray) -> bytes:
    if px.dtype != np.uint8 or px.ndim != 2:
        raise DimensionError("PGM payload must be a 2-D uint8 array")
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def decode_pgm(blob: bytes) -> np.ndarray:
    match = _HEADER.match(blob)
    if not match:
        raise ArchiveError("not a binary PGM file")
    w, h, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise ArchiveError(f"unsupported PGM maxval {maxval}")
    body = blob[match.end():]
    if len(body) != w * h:
        raise ArchiveError(f"PGM body has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def write_pgm(path, img: np.ndarray) -> None:
    """Write a [-1, 1] image."""
    Path(path).write_bytes(encode_pgm(to_bytes(img)))


def read_pgm(path) -> np.ndarray:
    """Read a PGM back into [-1, 1]."""
    return from_bytes(decode_pgm(Path(path).read_bytes()))


def render_grid(rows: Sequence[Sequence[np.ndarray]], sep: int = 1) -> np.ndarray:
    """Tile images into a uint8 canvas with ``sep``-pixel separators.

    ``rows`` is a list of rows; pass ``[images]`` for a single strip.
    """
    rows = [list(r) for r in rows]
    if not rows or not rows[0]:
        raise DimensionError("nothing to render")
    h, w = np.shape(rows[0][0])
    for r in rows:
        for img in r:
            if np.shape(img) != (h, w):
                raise DimensionError(f"image of shape {np.shape(img)} in a {h}x{w} grid")
    ncols = max(len(r) for r in rows)
    canvas = np.full((len(rows) * (h + sep) - sep, ncols * (w + sep) - sep), SEPARATOR, dtype=np.uint8)
    for ri, r in enumerate(rows):
        for ci, img in enumerate(r):
            y, x = ri * (h + sep), ci * (w + sep)
            canvas[y:y + h, x:x + w] = to_bytes(img)
    return canvas
