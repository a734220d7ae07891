"""Toy decoder-only language model.

Pre-norm residual blocks with RMS normalization, multi-head causal
self-attention (no biases) and a two-layer SiLU feed-forward network.
Positions use a learned absolute embedding added to the token embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .deltas import LowRankDelta, WeightKind, index_deltas
from .tensor import Rng, Tensor


@dataclass
class LlmConfig:
    d_blocks: int = 8
    h: int = 64
    n_heads: int = 4
    h_ff: int | None = None
    vocab: int = 64
    max_seq: int = 32
    init_std: float = 0.02
    # None -> h ** -0.5, so logits start at roughly unit scale
    head_std: float | None = None
    norm_eps: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self):
        if self.h_ff is None:
            self.h_ff = 4 * self.h
        for name in ("d_blocks", "h", "n_heads", "h_ff", "vocab", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"llm.{name} must be >= 1")
        if self.h % self.n_heads:
            raise ValueError(f"h={self.h} is not divisible by n_heads={self.n_heads}")
        if self.dtype not in T.DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.h // self.n_heads


@dataclass
class DecoderBlockWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    w2: Tensor
    norm1: Tensor
    norm2: Tensor

    def named(self):
        return {k: getattr(self, k) for k in ("wq", "wk", "wv", "wo", "w1", "w2", "norm1", "norm2")}


@dataclass
class LlmWeights:
    cfg: LlmConfig
    tok_emb: Tensor
    pos_emb: Tensor
    blocks: list[DecoderBlockWeights]
    norm_f: Tensor
    head: Tensor

    def named_parameters(self, prefix: str = "llm") -> dict[str, Tensor]:
        out = {f"{prefix}.tok_emb": self.tok_emb, f"{prefix}.pos_emb": self.pos_emb}
        for i, b in enumerate(self.blocks):
            for k, t in b.named().items():
                out[f"{prefix}.block{i}.{k}"] = t
        out[f"{prefix}.norm_f"] = self.norm_f
        out[f"{prefix}.head"] = self.head
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def init_llm(cfg: LlmConfig, rng: Rng) -> LlmWeights:
    dt = T.DTYPES[cfg.dtype]
    h, f = cfg.h, cfg.h_ff

    def w(label, shape, std=cfg.init_std):
        return Tensor(rng.child(label).normal(shape, std, dt), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=dt), requires_grad=True)

    blocks = []
    for i in range(cfg.d_blocks):
        p = f"block{i}"
        blocks.append(
            DecoderBlockWeights(
                wq=w(f"{p}.wq", (h, h)),
                wk=w(f"{p}.wk", (h, h)),
                wv=w(f"{p}.wv", (h, h)),
                wo=w(f"{p}.wo", (h, h)),
                w1=w(f"{p}.w1", (h, f)),
                w2=w(f"{p}.w2", (f, h)),
                norm1=ones(h),
                norm2=ones(h),
            )
        )
    head_std = cfg.head_std if cfg.head_std is not None else h**-0.5
    return LlmWeights(
        cfg=cfg,
        tok_emb=w("tok_emb", (cfg.vocab, h)),
        pos_emb=w("pos_emb", (cfg.max_seq, h)),
        blocks=blocks,
        norm_f=ones(h),
        head=w("head", (h, cfg.vocab), head_std),
    )


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, h = x.shape
    x = x.reshape(*lead, n, n_heads, h // n_heads)
    r = x.ndim
    return T.transpose(x, tuple(range(r - 3)) + (r - 2, r - 3, r - 1))


def _merge_heads(x: Tensor) -> Tensor:
    r = x.ndim
    x = T.transpose(x, tuple(range(r - 3)) + (r - 2, r - 3, r - 1))
    *lead, n, nh, hd = x.shape
    return x.reshape(*lead, n, nh * hd)


def attention(xq: Tensor, xk: Tensor, xv: Tensor, n_heads: int = 1, causal: bool = False, max_seq: int | None = None) -> Tensor:
    """Scaled dot-product attention per head; heads are concatenated.

    Inputs are ``[..., n, h]`` (keys/values may have a different length).
    The output projection is left to the caller.
    """
    n, m = xq.shape[-2], xk.shape[-2]
    if max_seq is not None and max(n, m) > max_seq:
        raise ValueError(f"sequence length {max(n, m)} exceeds max_seq={max_seq}")
    if xk.shape[-1] != xq.shape[-1] or xv.shape[-2:] != xk.shape[-2:]:
        raise T.ShapeError(f"attention shapes disagree: {xq.shape}, {xk.shape}, {xv.shape}")
    hd = xq.shape[-1] // n_heads
    q = _split_heads(xq, n_heads)
    k = _split_heads(xk, n_heads)
    v = _split_heads(xv, n_heads)
    scores = (q @ T.transpose(k)) * (1.0 / math.sqrt(hd))
    probs = T.softmax_rows(scores, T.causal_mask(n, m) if causal else None)
    return _merge_heads(probs @ v)


def linear(x: Tensor, w: Tensor, delta: LowRankDelta | None = None, mode: str = "factored") -> Tensor:
    """``x @ w`` plus the low-rank branch of ``delta`` when given.

    ``mode="factored"`` computes ``(x @ down) @ up``; ``mode="dense"``
    materializes ``down @ up`` first (used to match closed-form cost counts).
    """
    out = x @ w
    if delta is None:
        return out
    if delta.shape != w.shape[-2:]:
        raise T.ShapeError(f"delta {delta.shape} does not match weight {w.shape[-2:]}")
    down = delta.down
    if down.ndim == 3 and x.ndim == 2:
        raise T.ShapeError("batched delta applied to unbatched input")
    with T.flop_tag("delta_apply"):
        if mode == "factored":
            branch = (x @ down) @ delta.up
        elif mode == "dense":
            with T.flop_tag("delta_product"):
                dw = down @ delta.up
            branch = x @ dw
        else:
            raise ValueError(f"unknown branch mode {mode!r}")
        return out + branch


def ffn_forward(x: Tensor, w1: Tensor, w2: Tensor, d1=None, d2=None, mode="factored") -> Tensor:
    return linear(T.silu(linear(x, w1, d1, mode)), w2, d2, mode)


def block_forward(x: Tensor, bw: DecoderBlockWeights, cfg: LlmConfig, deltas=None, mode: str = "factored") -> Tensor:
    """One pre-norm residual decoder block; ``deltas`` maps WeightKind to a delta."""
    d = deltas or {}
    a = T.rms_norm(x, bw.norm1, cfg.norm_eps)
    q = linear(a, bw.wq, d.get(WeightKind.Q), mode)
    k = linear(a, bw.wk, d.get(WeightKind.K), mode)
    v = linear(a, bw.wv, d.get(WeightKind.V), mode)
    att = attention(q, k, v, cfg.n_heads, causal=True, max_seq=cfg.max_seq)
    x = x + linear(att, bw.wo, d.get(WeightKind.O), mode)
    m = T.rms_norm(x, bw.norm2, cfg.norm_eps)
    return x + ffn_forward(m, bw.w1, bw.w2, d.get(WeightKind.FFN_UP), d.get(WeightKind.FFN_DOWN), mode)


def check_tokens(tokens, cfg: LlmConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim not in (1, 2):
        raise ValueError("tokens must be [n] or [B, n]")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise IndexError(f"token id out of range [0, {cfg.vocab})")
    if tokens.shape[-1] > cfg.max_seq:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_seq={cfg.max_seq}")
    if tokens.shape[-1] < 1:
        raise ValueError("empty token sequence")
    return tokens


def llm_forward(tokens, weights: LlmWeights, deltas=None, mode: str = "factored") -> Tensor:
    """Causal logits ``[..., n, vocab]`` for ``tokens`` (``[n]`` or ``[B, n]``).

    ``deltas`` is an iterable of :class:`LowRankDelta`; each is applied as a
    branch on its block's matrix.
    """
    cfg = weights.cfg
    tokens = check_tokens(tokens, cfg)
    by_block = index_deltas(deltas or ())
    for i in by_block:
        if not 0 <= i < cfg.d_blocks:
            raise IndexError(f"delta targets block {i}, model has {cfg.d_blocks}")
    n = tokens.shape[-1]
    x = T.embedding(weights.tok_emb, tokens) + weights.pos_emb[:n]
    for i, bw in enumerate(weights.blocks):
        x = block_forward(x, bw, cfg, by_block.get(i), mode)
    x = T.rms_norm(x, weights.norm_f, cfg.norm_eps)
    with T.flop_tag("lm_head"):
        return x @ weights.head


def lm_loss(logits: Tensor, targets) -> Tensor:
    return T.cross_entropy(logits, targets)


def copy_weights(weights: LlmWeights) -> LlmWeights:
    """Deep copy with fresh leaf tensors."""
    def c(t):
        return Tensor(t.data, requires_grad=t.requires_grad)

    blocks = [DecoderBlockWeights(**{k: c(v) for k, v in b.named().items()}) for b in weights.blocks]
    return replace(
        weights,
        tok_emb=c(weights.tok_emb),
        pos_emb=c(weights.pos_emb),
        blocks=blocks,
        norm_f=c(weights.norm_f),
        head=c(weights.head),
    )
