"""Dynamic-resolution tiling and the four-vector sub-image position embedding.

An H x W image is up-sampled onto the smallest N_h x N_w grid of
H_t x W_t tiles that covers it, cut into row-major tiles, and paired with a
global tile (the whole image resized to H_t x W_t).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .image import Image
from .kernel import Tensor, add, matmul, parameter, scale, stack

DEFAULT_TILE = 224


@dataclass(frozen=True)
class Cell:
    row: int
    col: int
    rect: tuple[int, int, int, int]  # top, left, bottom, right (exclusive) on the upsampled canvas
    center: tuple[float, float]  # (x_c, y_c), normalised


@dataclass(frozen=True)
class GridPlan:
    n_h: int
    n_w: int
    target_res: tuple[int, int]
    cells: list[Cell] = field(default_factory=list)

    @property
    def upsampled_size(self) -> tuple[int, int]:
        return self.n_h * self.target_res[0], self.n_w * self.target_res[1]

    def to_json(self) -> dict:
        return {
            "n_h": self.n_h,
            "n_w": self.n_w,
            "tile": list(self.target_res),
            "upsampled_size": list(self.upsampled_size),
            "centers": [list(c.center) for c in self.cells],
        }


def select_grid(H: int, W: int, H_t: int, W_t: int) -> tuple[int, int]:
    """Smallest grid (N_h, N_w) with H <= N_h*H_t and W <= N_w*W_t.

    The two constraints are independent, so the componentwise ceilings are
    feasible and minimise the product.
    """
    for name, v in (("H", H), ("W", W), ("H_t", H_t), ("W_t", W_t)):
        if int(v) != v or v < 1:
            raise ValueError(f"select_grid: {name} must be a positive integer, got {v!r}")
    return -(-int(H) // int(H_t)), -(-int(W) // int(W_t))


def cell_centers(n_h: int, n_w: int) -> list[tuple[float, float]]:
    return [((c + 0.5) / n_w, (r + 0.5) / n_h) for r in range(n_h) for c in range(n_w)]


def plan_grid(H: int, W: int, H_t: int = DEFAULT_TILE, W_t: int = DEFAULT_TILE) -> GridPlan:
    n_h, n_w = select_grid(H, W, H_t, W_t)
    cells = []
    for r in range(n_h):
        for c in range(n_w):
            rect = (r * H_t, c * W_t, (r + 1) * H_t, (c + 1) * W_t)
            cells.append(Cell(r, c, rect, ((c + 0.5) / n_w, (r + 0.5) / n_h)))
    return GridPlan(n_h, n_w, (H_t, W_t), cells)


def _axis_weights(n_in: int, n_out: int):
    # corner-aligned: output sample i sits at i*(n_in-1)/(n_out-1) in input coordinates
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out) if n_in == 1 else np.full(n_out, (n_in - 1) / 2.0)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def upsample(img: Image, size: tuple[int, int]) -> Image:
    """Bilinear resize with corner-aligned sampling (also used for shrinking)."""
    Hn, Wn = int(size[0]), int(size[1])
    if Hn < 1 or Wn < 1:
        raise ValueError(f"upsample: target size must be positive, got {size}")
    px = img.pixels
    if (Hn, Wn) == px.shape[:2]:
        return Image(px.copy())
    r0, r1, fr = _axis_weights(px.shape[0], Hn)
    c0, c1, fc = _axis_weights(px.shape[1], Wn)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = px[r0][:, c0] * (1 - fc) + px[r0][:, c1] * fc
    bot = px[r1][:, c0] * (1 - fc) + px[r1][:, c1] * fc
    return Image(top * (1 - fr) + bot * fr)


def partition(img: Image, H_t: int = DEFAULT_TILE, W_t: int = DEFAULT_TILE):
    """Return ``(plan, sub_images, global_image)``; sub-images in row-major order."""
    plan = plan_grid(img.height, img.width, H_t, W_t)
    canvas = upsample(img, plan.upsampled_size).pixels
    tiles = [Image(canvas[t:b, l:r].copy()) for (t, l, b, r) in (c.rect for c in plan.cells)]
    return plan, tiles, upsample(img, (H_t, W_t))


def reassemble(plan: GridPlan, tiles: list[Image]) -> np.ndarray:
    H, W = plan.upsampled_size
    out = np.zeros((H, W, tiles[0].channels))
    for cell, tile in zip(plan.cells, tiles):
        t, l, b, r = cell.rect
        out[t:b, l:r] = tile.pixels
    return out


@dataclass
class PositionEmbeddingParams:
    """Learnable left/right/top/bottom vectors, all of the visual-feature width."""

    left: Tensor
    right: Tensor
    top: Tensor
    bottom: Tensor

    def __post_init__(self):
        dims = {v.shape for v in self.tensors()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValueError(f"position embedding vectors must share one 1-D shape, got {dims}")

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, std: float = 0.02):
        return cls(*(parameter(rng.normal(0.0, std, dim)) for _ in range(4)))

    def tensors(self) -> list[Tensor]:
        return [self.left, self.right, self.top, self.bottom]

    @property
    def dim(self) -> int:
        return self.left.shape[0]


def position_embedding(x_c: float, y_c: float, params: PositionEmbeddingParams) -> Tensor:
    """p = x_c*l + (1-x_c)*r + y_c*t + (1-y_c)*b for a center strictly inside the unit square."""
    if not (0.0 < x_c < 1.0 and 0.0 < y_c < 1.0):
        raise ValueError(f"position_embedding: center ({x_c}, {y_c}) outside the open unit square")
    p = params
    return add(add(scale(p.left, x_c), scale(p.right, 1.0 - x_c)),
               add(scale(p.top, y_c), scale(p.bottom, 1.0 - y_c)))


def position_embeddings(centers, params: PositionEmbeddingParams) -> Tensor:
    """Batched form: one row per center, shape [n, d]."""
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if np.any(c <= 0.0) or np.any(c >= 1.0):
        raise ValueError("position_embeddings: every center must lie strictly inside (0, 1)^2")
    x, y = c[:, 0], c[:, 1]
    weights = np.stack([x, 1.0 - x, y, 1.0 - y], axis=1)
    return matmul(Tensor(weights), stack(params.tensors()))
