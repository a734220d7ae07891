"""Perceptual weights generator.

``k`` learnable queries run through ``N`` pre-norm blocks (self-attention,
cross-attention over the visual features, FFN). Each resulting vector is
mapped by one shared linear layer to an ``h_in x r`` down factor; ``k``
independent, zero-initialized ``r x h_out`` up factors complete the deltas.
One generator serves one weight kind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .deltas import LowRankDelta, WeightKind
from .llm import attention, ffn_forward
from .tensor import Rng, Tensor


@dataclass
class GeneratorConfig:
    h_p: int = 512
    N: int = 8
    k: int = 8
    r: int = 64
    n_heads_p: int = 8
    h_ff_p: int | None = None
    init_std: float = 0.02
    norm_eps: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self):
        if self.h_ff_p is None:
            self.h_ff_p = 4 * self.h_p
        for name in ("h_p", "N", "k", "r", "n_heads_p", "h_ff_p"):
            if getattr(self, name) < 1:
                raise ValueError(f"generator.{name} must be >= 1")
        if self.h_p % self.n_heads_p:
            raise ValueError(f"h_p={self.h_p} is not divisible by n_heads_p={self.n_heads_p}")


_BLOCK_KEYS = (
    "sa_norm", "sa_wq", "sa_wk", "sa_wv", "sa_wo",
    "ca_norm", "ctx_norm", "ca_wq", "ca_wk", "ca_wv", "ca_wo",
    "ffn_norm", "w1", "w2",
)  # fmt: skip


@dataclass
class GeneratorWeights:
    cfg: GeneratorConfig
    kind: WeightKind
    h_in: int
    h_out: int
    queries: Tensor
    blocks: list[dict[str, Tensor]]
    out_norm: Tensor
    w_share: Tensor
    w_s: list[Tensor]

    def named_parameters(self, prefix: str | None = None) -> dict[str, Tensor]:
        prefix = prefix or f"pwg.{self.kind.value}"
        out = {f"{prefix}.queries": self.queries}
        for i, b in enumerate(self.blocks):
            for key in _BLOCK_KEYS:
                out[f"{prefix}.block{i}.{key}"] = b[key]
        out[f"{prefix}.out_norm"] = self.out_norm
        out[f"{prefix}.w_share"] = self.w_share
        for i, w in enumerate(self.w_s):
            out[f"{prefix}.w_s{i}"] = w
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def generator_shapes(cfg: GeneratorConfig, kind: WeightKind, h: int, h_ff: int, d_v: int) -> dict[str, tuple[int, ...]]:
    """Parameter shapes keyed by checkpoint suffix (no allocation)."""
    h_in, h_out = kind.target_shape(h, h_ff)
    hp, f = cfg.h_p, cfg.h_ff_p
    shapes: dict[str, tuple[int, ...]] = {"queries": (cfg.k, hp)}
    for i in range(cfg.N):
        block = {
            "sa_norm": (hp,), "sa_wq": (hp, hp), "sa_wk": (hp, hp), "sa_wv": (hp, hp), "sa_wo": (hp, hp),
            "ca_norm": (hp,), "ctx_norm": (d_v,), "ca_wq": (hp, hp), "ca_wk": (d_v, hp), "ca_wv": (d_v, hp),
            "ca_wo": (hp, hp), "ffn_norm": (hp,), "w1": (hp, f), "w2": (f, hp),
        }  # fmt: skip
        shapes.update({f"block{i}.{k}": v for k, v in block.items()})
    shapes["out_norm"] = (hp,)
    shapes["w_share"] = (hp, h_in * cfg.r)
    shapes.update({f"w_s{i}": (cfg.r, h_out) for i in range(cfg.k)})
    return shapes


def init_generator(cfg: GeneratorConfig, kind: WeightKind, h: int, h_ff: int, d_v: int, rng: Rng) -> GeneratorWeights:
    """Random init (std ``cfg.init_std``), norm gains at one, up factors exactly zero."""
    dt = T.DTYPES[cfg.dtype]
    rng = rng.child(f"pwg.{kind.value}")
    h_in, h_out = kind.target_shape(h, h_ff)
    params = {}
    for name, shape in generator_shapes(cfg, kind, h, h_ff, d_v).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            data = np.ones(shape, dtype=dt)
        elif leaf.startswith("w_s") and leaf != "w_share":
            data = np.zeros(shape, dtype=dt)
        else:
            data = rng.child(name).normal(shape, cfg.init_std, dt)
        params[name] = Tensor(data, requires_grad=True)
    blocks = [{key: params[f"block{i}.{key}"] for key in _BLOCK_KEYS} for i in range(cfg.N)]
    return GeneratorWeights(
        cfg=cfg,
        kind=kind,
        h_in=h_in,
        h_out=h_out,
        queries=params["queries"],
        blocks=blocks,
        out_norm=params["out_norm"],
        w_share=params["w_share"],
        w_s=[params[f"w_s{i}"] for i in range(cfg.k)],
    )


def generator_blocks_forward(queries: Tensor, z: Tensor, weights: GeneratorWeights) -> Tensor:
    """Run the queries through all blocks; returns ``p_v`` of shape ``[..., k, h_p]``."""
    cfg = weights.cfg
    if z.ndim < 2 or z.shape[-2] < 1:
        raise T.ShapeError("visual features must be non-empty [c, d_v]")
    eps = cfg.norm_eps
    x = queries
    for b in weights.blocks:
        if z.shape[-1] != b["ca_wk"].shape[0]:
            raise T.ShapeError(f"feature dim {z.shape[-1]} does not match cross-attention input {b['ca_wk'].shape[0]}")
        a = T.rms_norm(x, b["sa_norm"], eps)
        x = x + attention(a @ b["sa_wq"], a @ b["sa_wk"], a @ b["sa_wv"], cfg.n_heads_p) @ b["sa_wo"]
        a = T.rms_norm(x, b["ca_norm"], eps)
        ctx = T.rms_norm(z, b["ctx_norm"], eps)
        x = x + attention(a @ b["ca_wq"], ctx @ b["ca_wk"], ctx @ b["ca_wv"], cfg.n_heads_p) @ b["ca_wo"]
        a = T.rms_norm(x, b["ffn_norm"], eps)
        x = x + ffn_forward(a, b["w1"], b["w2"])
    return x


def generate_deltas(z: Tensor, weights: GeneratorWeights, target_blocks) -> list[LowRankDelta]:
    """One delta per query, bound to ``target_blocks[i]``.

    The shared layer yields ``p_v[i] @ w_share`` of length ``h_in * r``;
    entry ``a * r + b`` becomes ``down[a, b]``.
    """
    cfg = weights.cfg
    target_blocks = list(target_blocks)
    if len(target_blocks) != cfg.k:
        raise ValueError(f"plan has {len(target_blocks)} blocks, generator has k={cfg.k}")
    p_v = generator_blocks_forward(weights.queries, z, weights)
    p_v = T.rms_norm(p_v, weights.out_norm, cfg.norm_eps)
    flat = p_v @ weights.w_share
    lead = flat.shape[:-2]
    downs = flat.reshape(*lead, cfg.k, weights.h_in, cfg.r)
    out = []
    for i, blk in enumerate(target_blocks):
        down = downs[..., i, :, :] if lead else downs[i]
        out.append(LowRankDelta(down=down, up=weights.w_s[i], kind=weights.kind, block_index=int(blk)))
    return out
