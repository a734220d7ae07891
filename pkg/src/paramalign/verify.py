"""Invariant suites run by ``paramalign verify``.

Each check returns a :class:`CheckResult`; the CLI prints one line per check
and exits non-zero if any fails.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .deltas import parse_kinds
from .generator import GeneratorConfig
from .llm import LlmConfig, llm_forward
from .model import AlignedModel, init_model
from .tensor import Rng
from .train import make_caption
from .vision import VisionConfig


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def tiny_model(seed: int = 0, dtype: str = "float64", kinds: str = "qkvom", init_std: float = 0.02) -> AlignedModel:
    """h=16, h_ff=32, 4 blocks, k=2, r=2, h_p=16, N=2, vocab=16, 2x2 grids."""
    return init_model(
        LlmConfig(d_blocks=4, h=16, n_heads=2, h_ff=32, vocab=16, max_seq=8, init_std=init_std, dtype=dtype),
        VisionConfig(grid=2, alphabet=8, d_v=8, dtype=dtype),
        GeneratorConfig(h_p=16, N=2, k=2, r=2, n_heads_p=2, init_std=init_std, dtype=dtype),
        parse_kinds(kinds),
        seed,
    )


def randomize_up_factors(model: AlignedModel, rng: Rng, std: float = 0.1):
    """Give every up factor random values (stand-in for a trained generator)."""
    for kind, g in model.generators.items():
        for i, w in enumerate(g.w_s):
            w.data[...] = rng.child(f"{kind.value}.{i}").normal(w.shape, std, w.dtype)


def random_inputs(model: AlignedModel, rng: Rng, n: int, batch: bool = False):
    vc = model.vision.cfg
    imgs = rng.integers(vc.alphabet, size=(n, vc.grid, vc.grid))
    toks = rng.integers(model.llm.cfg.vocab, size=(n, min(model.llm.cfg.max_seq, vc.n_cells + 1)))
    return imgs, toks


def check_zero_init(model: AlignedModel, rng: Rng, n: int = 100) -> CheckResult:
    imgs, toks = random_inputs(model, rng, n)
    with T.no_grad():
        for img, tok in zip(imgs, toks):
            a = model.logits(img, tok).data
            b = llm_forward(tok, model.llm).data
            if not np.array_equal(a, b):
                diff = float(np.abs(a - b).max())
                return CheckResult("zero-init identity", False, f"max |diff| {diff:.3e}")
    return CheckResult("zero-init identity", True, f"{n} pairs bitwise equal")


def max_rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


def check_merge_branch(model: AlignedModel, rng: Rng, n: int = 20, tol: float | None = None) -> CheckResult:
    if tol is None:
        tol = 1e-10 if model.llm.cfg.dtype == "float64" else 1e-5
    imgs, toks = random_inputs(model, rng, n)
    worst = 0.0
    with T.no_grad():
        for img, tok in zip(imgs, toks):
            a = model.logits(img, tok, mode="branch").data
            b = model.logits(img, tok, mode="merge").data
            worst = max(worst, max_rel_diff(a, b))
    return CheckResult("merge == branch", worst <= tol, f"max rel diff {worst:.2e} (tol {tol:.0e})")


def check_rank(model: AlignedModel, rng: Rng, n: int = 4, rel: float = 1e-6) -> CheckResult:
    imgs, _ = random_inputs(model, rng, n)
    worst = 0.0
    with T.no_grad():
        for img in imgs:
            for d in model.deltas(img):
                s = np.linalg.svd(d.dense().astype(np.float64), compute_uv=False)
                if s[0] == 0 or len(s) <= d.rank:
                    continue
                worst = max(worst, float(s[d.rank:].max() / s[0]))
    return CheckResult("rank bound", worst < rel, f"max sigma_(r+1)/sigma_1 {worst:.2e}")


def check_causality(model: AlignedModel, rng: Rng, n: int = 5) -> CheckResult:
    imgs, toks = random_inputs(model, rng, n)
    vocab = model.llm.cfg.vocab
    with T.no_grad():
        for img, tok in zip(imgs, toks):
            base = model.logits(img, tok).data
            for t in range(1, len(tok)):
                pert = tok.copy()
                pert[t] = (pert[t] + 1) % vocab
                out = model.logits(img, pert).data
                if not np.array_equal(out[:t], base[:t]):
                    return CheckResult("causality", False, f"position < {t} changed")
    return CheckResult("causality", True, f"{n} sequences")


def gradcheck_params(model: AlignedModel):
    """Parameters whose gradients the full-pipeline check samples."""
    named = model.named_parameters()
    picks = []
    for kind, g in model.generators.items():
        p = f"pwg.{kind.value}"
        picks += [f"{p}.queries", f"{p}.w_share", f"{p}.w_s0", f"{p}.block0.ca_wq", f"{p}.block0.ca_wk", f"{p}.block1.ca_wv"]
    picks += ["llm.block0.wq", "llm.block1.w1", "llm.block3.wo", "llm.head"]
    return [(name, named[name]) for name in picks]


def full_pipeline_gradcheck(model: AlignedModel, rng: Rng, per_tensor: int = 3, batch: int = 2) -> tuple[float, int]:
    """Max relative error of the caption loss over ``per_tensor`` coordinates
    of every tensor from :func:`gradcheck_params`; returns (error, n_coords)."""
    if model.llm.cfg.dtype != "float64":
        raise TypeError("gradcheck needs a float64 model")
    vc = model.vision.cfg
    imgs = rng.integers(vc.alphabet, size=(batch, vc.grid, vc.grid))
    caps = np.stack([make_caption(i) for i in imgs])
    chosen = gradcheck_params(model)
    for p in model.named_parameters().values():
        p.requires_grad = False
    for _, p in chosen:
        p.requires_grad = True
    pick = rng.child("coords")
    coords = []
    for i, (_, p) in enumerate(chosen):
        m = min(per_tensor, p.data.size)
        coords += [(i, int(j)) for j in pick.gen.choice(p.data.size, size=m, replace=False)]

    def loss():
        logits = model.logits(imgs, caps[:, :-1])
        return T.cross_entropy(logits, caps[:, 1:])

    err = T.finite_diff_check(loss, [p for _, p in chosen], h_step=1e-5, coords=coords)
    return err, len(coords)


def check_gradients(model: AlignedModel, rng: Rng, tol: float = 1e-4) -> CheckResult:
    err, n = full_pipeline_gradcheck(model, rng)
    return CheckResult("gradcheck", err < tol, f"max rel err {err:.2e} over {n} coordinates (tol {tol:.0e})")


def run_all(seed: int = 0, dtype: str = "float32", fault: str | None = None) -> list[CheckResult]:
    """Run every suite on the tiny configuration.

    ``fault="flip_ws"`` writes one nonzero entry into an up factor right after
    init (negative control: the zero-init identity must then fail).
    """
    rng = Rng(seed).child("verify")
    model = tiny_model(seed, dtype)
    if fault == "flip_ws":
        g = next(iter(model.generators.values()))
        g.w_s[0].data[0, 0] = 1.0
    elif fault is not None:
        raise ValueError(f"unknown fault {fault!r}")
    results = [check_zero_init(model, rng.child("zero"))]

    randomize_up_factors(model, rng.child("ws"))
    results.append(check_merge_branch(model, rng.child("merge")))
    results.append(check_rank(model, rng.child("rank")))
    results.append(check_causality(model, rng.child("causal")))

    gmodel = tiny_model(seed, "float64", init_std=0.3)
    randomize_up_factors(gmodel, rng.child("ws64"), std=0.3)
    tol = 1e-6 if dtype == "float64" else 1e-4
    results.append(check_gradients(gmodel, rng.child("grad"), tol))
    return results
