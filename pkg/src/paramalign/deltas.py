"""Weight kinds of a decoder block and low-rank deltas that target them."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class WeightKind(enum.Enum):
    Q = "q"
    K = "k"
    V = "v"
    O = "o"
    FFN_UP = "up"
    FFN_DOWN = "down"

    @property
    def attr(self) -> str:
        return _ATTRS[self]

    def target_shape(self, h: int, h_ff: int) -> tuple[int, int]:
        if self is WeightKind.FFN_UP:
            return (h, h_ff)
        if self is WeightKind.FFN_DOWN:
            return (h_ff, h)
        return (h, h)


_ATTRS = {
    WeightKind.Q: "wq",
    WeightKind.K: "wk",
    WeightKind.V: "wv",
    WeightKind.O: "wo",
    WeightKind.FFN_UP: "w1",
    WeightKind.FFN_DOWN: "w2",
}

# Ablation labels: one letter per generator slot, "m" covers both FFN matrices.
_LETTERS = {
    "q": (WeightKind.Q,),
    "k": (WeightKind.K,),
    "v": (WeightKind.V,),
    "o": (WeightKind.O,),
    "m": (WeightKind.FFN_UP, WeightKind.FFN_DOWN),
}
ABLATION_SETS = ("qkvom", "qkvm", "qkv", "qko", "qk")


def parse_kinds(label: str) -> tuple[WeightKind, ...]:
    """Map an ablation label such as ``"qkvm"`` to weight kinds.

    Only the five labels in :data:`ABLATION_SETS` are accepted.
    """
    if label not in ABLATION_SETS:
        raise ValueError(f"unknown weight-type set {label!r}; expected one of {', '.join(ABLATION_SETS)}")
    return tuple(kind for ch in label for kind in _LETTERS[ch])


def kinds_label(kinds) -> str:
    kinds = set(kinds)
    for label in ABLATION_SETS:
        if set(parse_kinds(label)) == kinds:
            return label
    return ",".join(sorted(k.value for k in kinds))


@dataclass
class LowRankDelta:
    """``delta W = down @ up`` for one matrix of one block.

    ``down`` is image-dependent and may carry a leading batch axis
    (``[B, h_in, r]``); ``up`` is shared, ``[r, h_out]``.
    """

    down: Tensor
    up: Tensor
    kind: WeightKind
    block_index: int

    @property
    def rank(self) -> int:
        return self.up.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.down.shape[-2], self.up.shape[-1])

    def dense(self) -> np.ndarray:
        """``down @ up`` evaluated in float64."""
        return np.matmul(self.down.data.astype(np.float64), self.up.data.astype(np.float64))


def index_deltas(deltas) -> dict[int, dict[WeightKind, LowRankDelta]]:
    """Group a flat delta list by block index, rejecting duplicates."""
    out: dict[int, dict[WeightKind, LowRankDelta]] = {}
    for d in deltas:
        per_block = out.setdefault(d.block_index, {})
        if d.kind in per_block:
            raise ValueError(f"two deltas for block {d.block_index} kind {d.kind.value}")
        per_block[d.kind] = d
    return out
