"""Frozen toy vision encoder over symbol grids.

An image is a ``g x g`` grid of small integer symbols. The encoder emits one
feature row per cell: a symbol embedding plus a cell-position embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor


@dataclass
class VisionConfig:
    grid: int = 4
    alphabet: int = 16
    d_v: int = 32
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        if self.grid < 1 or self.d_v < 1:
            raise ValueError("vision.grid and vision.d_v must be >= 1")
        if not 1 <= self.alphabet <= 64:
            raise ValueError("vision.alphabet must be in [1, 64]")

    @property
    def n_cells(self) -> int:
        return self.grid * self.grid


@dataclass
class VisionWeights:
    cfg: VisionConfig
    sym_emb: Tensor
    pos_emb: Tensor

    def named_parameters(self, prefix: str = "vision") -> dict[str, Tensor]:
        return {f"{prefix}.sym_emb": self.sym_emb, f"{prefix}.pos_emb": self.pos_emb}


def init_vision(cfg: VisionConfig, rng: Rng) -> VisionWeights:
    dt = T.DTYPES[cfg.dtype]
    return VisionWeights(
        cfg=cfg,
        sym_emb=Tensor(rng.child("sym_emb").normal((cfg.alphabet, cfg.d_v), cfg.init_std, dt)),
        pos_emb=Tensor(rng.child("pos_emb").normal((cfg.n_cells, cfg.d_v), cfg.init_std, dt)),
    )


def check_image(img, cfg: VisionConfig) -> np.ndarray:
    img = np.asarray(img, dtype=np.int64)
    if img.shape[-2:] != (cfg.grid, cfg.grid):
        raise ValueError(f"image grid {img.shape[-2:]} is not {cfg.grid}x{cfg.grid}")
    if img.size and (img.min() < 0 or img.max() >= cfg.alphabet):
        raise ValueError(f"symbol outside alphabet [0, {cfg.alphabet})")
    return img


def encode_image(img, weights: VisionWeights) -> Tensor:
    """Features ``z`` of shape ``[c, d_v]`` (or ``[B, c, d_v]`` for a batch)."""
    cfg = weights.cfg
    img = check_image(img, cfg)
    cells = img.reshape(*img.shape[:-2], cfg.n_cells)
    return T.embedding(weights.sym_emb, cells) + weights.pos_emb


def parse_image(line: str, grid: int) -> np.ndarray:
    """Parse the text form: one line of ``grid**2`` space-separated integers."""
    vals = [int(v) for v in line.split()]
    if len(vals) != grid * grid:
        raise ValueError(f"expected {grid * grid} symbols, got {len(vals)}")
    return np.array(vals, dtype=np.int64).reshape(grid, grid)


def format_image(img) -> str:
    return " ".join(str(int(v)) for v in np.asarray(img).reshape(-1))
