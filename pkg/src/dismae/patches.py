"""Patch grid conversion: images <-> flat per-patch pixel tokens."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .config import ConfigError, ModelConfig


@dataclass
class PatchGrid:
    """Row-major patch tokens, shape (B, L, P) with P = patch_size**2 * channels."""

    tokens: Tensor
    rows: int
    cols: int

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols


def patchify(images: Tensor, cfg: ModelConfig) -> PatchGrid:
    """Split a (B, C, H, W) image batch into row-major flat patches."""
    if images.ndim != 4:
        raise ConfigError(f"expected 4-d image batch (B, C, H, W), got shape {tuple(images.shape)}")
    b, c, h, w = images.shape
    if c != cfg.channels:
        raise ConfigError(f"channels mismatch: images have {c}, config expects {cfg.channels}")
    if h != cfg.image_size:
        raise ConfigError(f"image height mismatch: images have {h}, config expects {cfg.image_size}")
    if w != cfg.image_size:
        raise ConfigError(f"image width mismatch: images have {w}, config expects {cfg.image_size}")
    p = cfg.patch_size
    rows = h // p
    cols = w // p
    x = images.reshape(b, c, rows, p, cols, p)
    x = x.permute(0, 2, 4, 3, 5, 1)  # (B, rows, cols, p, p, C)
    tokens = x.reshape(b, rows * cols, p * p * c)
    return PatchGrid(tokens=tokens, rows=rows, cols=cols)


def unpatchify(grid: PatchGrid, cfg: ModelConfig) -> Tensor:
    """Inverse of :func:`patchify`."""
    tokens = grid.tokens
    if tokens.ndim != 3:
        raise ConfigError(f"expected 3-d patch tokens (B, L, P), got shape {tuple(tokens.shape)}")
    b, l, pv = tokens.shape
    p = cfg.patch_size
    c = cfg.channels
    if grid.rows * grid.cols != l:
        raise ConfigError(f"patch layout {grid.rows}x{grid.cols} does not match token count {l}")
    if l != cfg.num_patches:
        raise ConfigError(f"token count {l} does not match config num_patches {cfg.num_patches}")
    if pv != p * p * c:
        raise ConfigError(f"patch value size {pv} does not match patch_size**2 * channels = {p * p * c}")
    x = tokens.reshape(b, grid.rows, grid.cols, p, p, c)
    x = x.permute(0, 5, 1, 3, 2, 4)  # (B, C, rows, p, cols, p)
    return x.reshape(b, c, grid.rows * p, grid.cols * p)


def patch_tokens(images: Tensor, cfg: ModelConfig) -> Tensor:
    return patchify(images, cfg).tokens


def grid_from_tokens(tokens: Tensor, cfg: ModelConfig) -> PatchGrid:
    side = cfg.image_size // cfg.patch_size
    return PatchGrid(tokens=tokens, rows=side, cols=side)
