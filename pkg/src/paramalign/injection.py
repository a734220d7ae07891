"""Binding deltas to LM blocks; merged and branch application."""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import tensor as T
from .deltas import WeightKind, index_deltas
from .llm import LlmWeights, llm_forward


@dataclass(frozen=True)
class InjectionPlan:
    target_blocks: tuple[int, ...]
    kinds: tuple[WeightKind, ...]

    def __post_init__(self):
        tb = self.target_blocks
        if any(b < 0 for b in tb) or any(a >= b for a, b in zip(tb, tb[1:])):
            raise ValueError(f"target blocks must be strictly increasing and >= 0: {tb}")

    @property
    def k(self) -> int:
        return len(self.target_blocks)

    def deltas_per_step(self) -> int:
        return self.k * len(self.kinds)


def build_plan(d_blocks: int, k: int, kinds) -> InjectionPlan:
    """Every ``d_blocks // k``-th block starting at block 0."""
    if k < 1 or k > d_blocks:
        raise ValueError(f"k={k} must be in [1, d_blocks={d_blocks}]")
    if d_blocks % k:
        raise ValueError(f"d_blocks={d_blocks} is not divisible by k={k}")
    stride = d_blocks // k
    return InjectionPlan(tuple(range(0, d_blocks, stride)), tuple(kinds))


def merge(weights: LlmWeights, deltas) -> LlmWeights:
    """Return weights with ``W + down @ up`` materialized for each delta.

    ``weights`` is left untouched; untargeted tensors are shared. A batched
    ``down`` yields a batched merged matrix ``[B, h_in, h_out]``.
    """
    by_block = index_deltas(deltas)
    blocks = list(weights.blocks)
    for i, per_kind in by_block.items():
        if not 0 <= i < len(blocks):
            raise IndexError(f"delta targets block {i}, model has {len(blocks)}")
        updates = {}
        for kind, d in per_kind.items():
            w = getattr(blocks[i], kind.attr)
            if d.shape != w.shape:
                raise T.ShapeError(f"block {i} {kind.value}: delta {d.shape} vs weight {w.shape}")
            with T.flop_tag("merge"):
                updates[kind.attr] = w + d.down @ d.up
        blocks[i] = replace(blocks[i], **updates)
    return replace(weights, blocks=blocks)


class WeightMerger:
    """Holds a base model and swaps per-image merged snapshots over it.

    Unmerging returns the retained base rather than subtracting the delta,
    so repeated swaps never accumulate rounding drift.
    """

    def __init__(self, base: LlmWeights):
        self.base = base
        self.current = base

    def merge(self, deltas) -> LlmWeights:
        self.current = merge(self.base, deltas)
        return self.current

    def unmerge(self) -> LlmWeights:
        self.current = self.base
        return self.base


def branch_forward(weights: LlmWeights, deltas, tokens, mode: str = "factored") -> T.Tensor:
    """Logits with each delta applied as a parallel low-rank path."""
    return llm_forward(tokens, weights, deltas, mode=mode)


def merged_forward(weights: LlmWeights, deltas, tokens) -> T.Tensor:
    return llm_forward(tokens, merge(weights, deltas))

