"""Synthetic captioning data, stage-wise freezing, AdamW and the training loop.

A caption is the grid read out in row-major order: ``[BOS, 1 + s_0, ...,
1 + s_{c-1}]`` with ``BOS = 0``. The LM never sees the grid as tokens, so the
only route for the symbols is through the merged perceptual weights.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import AlignedModel
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

BOS = 0
STAGES = ("pretrain", "finetune")


@dataclass
class SyntheticPair:
    image: np.ndarray
    caption: np.ndarray


def make_caption(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.int64)
    return np.concatenate([[BOS], 1 + grid.reshape(-1)])


def make_dataset(rng: Rng, n: int, grid: int = 4, alphabet: int = 16) -> list[SyntheticPair]:
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    imgs = rng.integers(alphabet, size=(n, grid, grid))
    return [SyntheticPair(image=img, caption=make_caption(img)) for img in imgs]


def stack(pairs) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.image for p in pairs]), np.stack([p.caption for p in pairs])


# --------------------------------------------------------------------------
# Freezing


@dataclass(frozen=True)
class FreezePolicy:
    """Pretrain trains only the generators; finetune adds the LM.

    The vision encoder is frozen in both stages.
    """

    stage: str = "pretrain"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected pretrain or finetune")

    def trainable(self, model: AlignedModel) -> dict[str, Tensor]:
        params = dict(model.generator_parameters())
        if self.stage == "finetune":
            params.update(model.llm.named_parameters())
        return params


def apply_policy(model: AlignedModel, params: dict[str, Tensor]):
    for name, t in model.named_parameters().items():
        t.requires_grad = name in params
        t.zero_grad()


# --------------------------------------------------------------------------
# Optimizer and schedule


class AdamW:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if lr == 0.0:
                continue
            if self.wd:
                p.data -= (lr * self.wd) * p.data
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def lr_at(step: int, total: int, peak: float, warmup: int) -> float:
    """Linear warm-up to ``peak`` over ``warmup`` steps, then cosine decay to 0."""
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min((step - warmup) / span, 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    warmup: int = 100
    batch_size: int = 16
    stage: str = "pretrain"
    n_train: int = 4096
    n_eval: int = 256
    data_seed: int = 1
    blind: bool = False
    mode: str = "branch"
    log_every: int = 100
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not 1 <= self.batch_size <= 32:
            raise ValueError("train.batch_size must be in [1, 32]")
        if self.mode not in ("branch", "merge"):
            raise ValueError(f"unknown mode {self.mode!r}")


def sequence_loss(model: AlignedModel, images, captions, blind=False, mode="branch") -> Tensor:
    captions = np.asarray(captions)
    logits = model.logits(images, captions[..., :-1], mode=mode, blind=blind)
    return T.cross_entropy(logits, captions[..., 1:])


@dataclass
class TrainState:
    model: AlignedModel
    policy: FreezePolicy
    optimizer: AdamW
    blind: bool = False
    mode: str = "branch"
    step: int = 0


def make_state(model: AlignedModel, policy: FreezePolicy, blind=False, mode="branch", weight_decay=0.0) -> TrainState:
    params = policy.trainable(model)
    if blind:
        # generators cannot influence a blind model; train the LM instead so the
        # control still learns the caption marginals
        params = dict(model.llm.named_parameters())
    apply_policy(model, params)
    return TrainState(model, policy, AdamW(params.values(), weight_decay=weight_decay), blind, mode)


def train_step(batch, state: TrainState, lr: float) -> float:
    """One forward/backward/update on ``batch`` (a pair or list of pairs)."""
    pairs = [batch] if isinstance(batch, SyntheticPair) else list(batch)
    images, captions = stack(pairs)
    state.optimizer.zero_grad()
    try:
        loss = sequence_loss(state.model, images, captions, state.blind, state.mode)
    except T.NonFiniteError as e:
        raise T.NonFiniteError(f"step {state.step}: non-finite forward ({e})") from None
    value = loss.item()
    if not math.isfinite(value):
        raise T.NonFiniteError(f"step {state.step}: loss is {value}")
    loss.backward()
    state.optimizer.step(lr)
    state.step += 1
    return value


@dataclass
class TrainResult:
    records: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]


def train_loop(
    model: AlignedModel,
    dataset: list[SyntheticPair],
    cfg: TrainConfig,
    out_dir=None,
    shuffle_seed: int = 0,
) -> TrainResult:
    """Run ``cfg.steps`` updates over reshuffled passes of ``dataset``.

    Writes ``metrics.jsonl`` (one ``{step, lr, loss}`` record per step) and
    ``model.ckpt`` into ``out_dir`` when given.
    """
    state = make_state(model, FreezePolicy(cfg.stage), cfg.blind, cfg.mode, cfg.weight_decay)
    rng = Rng(shuffle_seed).child("shuffle")
    order = np.empty(0, dtype=np.int64)
    result = TrainResult()
    sink = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        sink = open(out_dir / "metrics.jsonl", "w")
    try:
        for step in range(cfg.steps):
            while len(order) < cfg.batch_size:
                order = np.concatenate([order, rng.permutation(len(dataset))])
            idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
            lr = lr_at(step, cfg.steps, cfg.lr, cfg.warmup)
            loss = train_step([dataset[i] for i in idx], state, lr)
            rec = {"step": step, "lr": lr, "loss": loss}
            result.records.append(rec)
            if sink is not None:
                sink.write(json.dumps(rec) + "\n")
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d lr %.3g loss %.4f", step, lr, loss)
    finally:
        if sink is not None:
            sink.close()
    if out_dir is not None:
        model.save(out_dir / "model.ckpt")
    return result


def eval_perplexity(
    model: AlignedModel,
    pairs: list[SyntheticPair],
    blind: bool = False,
    shuffle_images: bool = False,
    batch_size: int = 32,
    mode: str = "branch",
) -> float:
    """Teacher-forced perplexity over every caption token after BOS.

    ``shuffle_images`` rotates the images by one position so each caption is
    paired with another pair's image.
    """
    images, captions = stack(pairs)
    if shuffle_images:
        images = np.roll(images, 1, axis=0)
    total, count = 0.0, 0
    with T.no_grad():
        for s in range(0, len(pairs), batch_size):
            img, cap = images[s : s + batch_size], captions[s : s + batch_size]
            loss = sequence_loss(model, img, cap, blind, mode).item()
            n = cap[:, 1:].size
            total += loss * n
            count += n
    return math.exp(total / count)
