"""Closed-form FLOPs of the LM part: visual tokens in the input vs merged weights.

Only self-attention and FFN matmuls are counted. A sequence of ``n`` tokens
through one block costs ``8nh^2 + 4n^2h`` (attention) plus ``16nh^2`` (FFN).
All values are exact Python integers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, Iterable

from .tensor import FlopCounter, count_flops

CSV_HEADER = ("L", "C", "flops_baseline", "flops_vlora_train", "flops_vlora_infer", "ratio_train", "ratio_infer")


@dataclass(frozen=True)
class CostParams:
    d_blocks: int = 32
    h: int = 4096
    C: int = 32
    L: int = 576
    k: int = 8
    r: int = 64

    def __post_init__(self):
        for name in ("d_blocks", "h", "C", "L", "k", "r"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.d_blocks < 1 or self.h < 1:
            raise ValueError("d_blocks and h must be >= 1")


def flops_block_parts(n: int, h: int) -> tuple[int, int]:
    return 8 * n * h * h + 4 * n * n * h, 16 * n * h * h


def _text_only(p: CostParams) -> int:
    d, h, C = p.d_blocks, p.h, p.C
    return 24 * C * d * h * h + 4 * C * C * d * h


def flops_baseline(p: CostParams) -> int:
    """Visual tokens concatenated with text: ``24(L+C)dh^2 + 4(L+C)^2dh``."""
    n = p.L + p.C
    return 24 * n * p.d_blocks * p.h**2 + 4 * n * n * p.d_blocks * p.h


def flops_vlora_train(p: CostParams) -> int:
    """Deltas as branches: text-only cost + ``24krh^2 + 12Ckh^2 + 14Ckh``."""
    k, r, h, C = p.k, p.r, p.h, p.C
    return _text_only(p) + 24 * k * r * h * h + 12 * C * k * h * h + 14 * C * k * h


def flops_vlora_infer(p: CostParams) -> int:
    """Deltas merged: text-only cost + ``24krh^2 + 12kh^2``."""
    k, r, h = p.k, p.r, p.h
    return _text_only(p) + 24 * k * r * h * h + 12 * k * h * h


def sweep(p: CostParams, L_values: Iterable[int]) -> list[dict]:
    L_values = list(L_values)
    if not L_values:
        raise ValueError("L_values is empty")
    rows = []
    for L in L_values:
        q = replace(p, L=int(L))
        base = flops_baseline(q)
        train = flops_vlora_train(q)
        infer = flops_vlora_infer(q)
        rows.append(
            {
                "L": q.L,
                "C": q.C,
                "flops_baseline": base,
                "flops_vlora_train": train,
                "flops_vlora_infer": infer,
                "ratio_train": train / base,
                "ratio_infer": infer / base,
            }
        )
    return rows


def write_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_HEADER)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{row[k]:.6f}" if k.startswith("ratio") else row[k]) for k in CSV_HEADER})


# 7B-class rows (d_blocks=32, h=4096, C=32) with the printed GFLOPs.
TABLE1 = (
    ("InstructBLIP", "baseline", 32, 827),
    ("MiniGPT-4-v2", "baseline", 256, 3754),
    ("LLaVA-v1.5", "baseline", 576, 8027),
    ("merged-weights", "infer", 0, 619),
)


def table1_rows(p: CostParams | None = None) -> list[dict]:
    p = p or CostParams()
    out = []
    for name, kind, L, printed in TABLE1:
        q = replace(p, L=L)
        flops = flops_baseline(q) if kind == "baseline" else flops_vlora_infer(q)
        g = flops / 1e9
        out.append({"model": name, "L": L, "gflops": g, "printed": printed, "rel_err": abs(g - printed) / printed})
    return out


def instrumented_count(run: Callable[[], object]) -> FlopCounter:
    """Execute ``run`` with the matmul counter active and return the tallies."""
    with count_flops() as counter:
        run()
    return counter
