"""Float images in [0, 1] and netpbm (PPM/PGM) reading and writing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class Image:
    """``pixels`` has shape (H, W, C) with C in {1, 3}; values are clamped to [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3) or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image pixels must be H x W x (1|3), got shape {px.shape}")
        object.__setattr__(self, "pixels", np.clip(px, 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)


def read_netpbm(path) -> Image:
    """Read a binary PPM (P6) or PGM (P5) file."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated netpbm header")
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm type {magic!r}")
    c = 3 if magic == b"P6" else 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = h * w * c
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
    return Image(data.reshape(h, w, c).astype(np.float64) / maxval)


def write_netpbm(path, img: Image):
    """Write 8-bit P6 (colour) or P5 (grey)."""
    q = np.round(img.pixels * 255.0).astype(np.uint8)
    magic = b"P6" if img.channels == 3 else b"P5"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{img.width} {img.height}\n255\n".encode())
        fh.write(q.tobytes())
