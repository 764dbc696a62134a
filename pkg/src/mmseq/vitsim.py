"""Frozen visual tokenizer stand-in: patchify, seeded linear projection, pool to 64 rows."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import kernel
from .image import Image

N_POOLED = 64


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VisualTokenizerConfig:
    tile: int = 16
    patch_size: int = 2
    channels: int = 3
    embed_dim: int = 16
    seed: int = 0
    pooled_count: int = N_POOLED

    def validate(self):
        if self.pooled_count != N_POOLED:
            raise ConfigError(f"pooled_count must be {N_POOLED}, got {self.pooled_count}")
        if self.tile % self.patch_size:
            raise ConfigError(f"tile {self.tile} not divisible by patch size {self.patch_size}")
        if self.n_patches % N_POOLED:
            raise ConfigError(f"{self.n_patches} patches per tile is not divisible by {N_POOLED}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def n_patches(self) -> int:
        return (self.tile // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True, eq=False)
class VisualEmbeddingSet:
    source: str
    embeddings: np.ndarray  # [64, d_v]


def patchify(img: Image | np.ndarray, patch_size: int) -> np.ndarray:
    """Row-major patches, each flattened as (row, col, channel)."""
    px = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    H, W, C = px.shape
    if H % patch_size or W % patch_size:
        raise ValueError(f"patchify: image {H}x{W} not divisible by patch size {patch_size}")
    gh, gw = H // patch_size, W // patch_size
    x = px.reshape(gh, patch_size, gw, patch_size, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(gh * gw, patch_size * patch_size * C)


def unpatchify(patches: np.ndarray, H: int, W: int, patch_size: int, channels: int) -> np.ndarray:
    gh, gw = H // patch_size, W // patch_size
    x = np.asarray(patches).reshape(gh, gw, patch_size, patch_size, channels).transpose(0, 2, 1, 3, 4)
    return x.reshape(H, W, channels)


def avg_pool_1d(x, groups: int = N_POOLED):
    """Mean over contiguous row groups: [P, d] -> [groups, d]. Accepts arrays or Tensors."""
    P = x.shape[0]
    if P % groups:
        raise ValueError(f"avg_pool_1d: {P} rows not divisible into {groups} groups")
    k = P // groups
    if isinstance(x, kernel.Tensor):
        return kernel.mean(kernel.reshape(x, (groups, k, x.shape[1])), axis=1)
    return np.asarray(x).reshape(groups, k, -1).mean(axis=1)


class VisualTokenizer:
    """Read-only after construction; the projection is never exposed as a trainable tensor."""

    def __init__(self, cfg: VisualTokenizerConfig = VisualTokenizerConfig(), projection: np.ndarray | None = None):
        cfg.validate()
        self.cfg = cfg
        if projection is None:
            rng = np.random.default_rng(cfg.seed)
            projection = rng.normal(0.0, 1.0 / np.sqrt(cfg.patch_dim), (cfg.patch_dim, cfg.embed_dim))
        projection = np.array(projection, dtype=np.float64)
        if projection.shape != (cfg.patch_dim, cfg.embed_dim):
            raise ConfigError(f"projection shape {projection.shape} != {(cfg.patch_dim, cfg.embed_dim)}")
        projection.setflags(write=False)
        self._proj = projection

    @property
    def projection(self) -> np.ndarray:
        return self._proj

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def checksum(self) -> str:
        return hashlib.sha256(self._proj.tobytes()).hexdigest()

    def tokenize(self, img: Image, source: str = "") -> VisualEmbeddingSet:
        return vit_tokenize(img, self, source)

    def save(self, path):
        kernel.save(path, self._proj)

    @classmethod
    def load(cls, path, cfg: VisualTokenizerConfig):
        return cls(cfg, kernel.load(path))


def vit_tokenize(img: Image, vit: VisualTokenizer, source: str = "") -> VisualEmbeddingSet:
    cfg = vit.cfg
    if (img.height, img.width) != (cfg.tile, cfg.tile):
        raise ValueError(f"vit_tokenize: expected one {cfg.tile}x{cfg.tile} tile, got {img.height}x{img.width}")
    if img.channels != cfg.channels:
        raise ValueError(f"vit_tokenize: expected {cfg.channels} channels, got {img.channels}")
    projected = patchify(img, cfg.patch_size) @ vit.projection
    return VisualEmbeddingSet(source, avg_pool_1d(projected, N_POOLED))
