"""Full pipeline: vision features -> generators -> deltas -> LM logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .deltas import WeightKind
from .generator import GeneratorConfig, GeneratorWeights, generate_deltas, init_generator
from .injection import InjectionPlan, build_plan, merge
from .llm import LlmConfig, LlmWeights, init_llm, llm_forward
from .tensor import Rng, Tensor
from .vision import VisionConfig, VisionWeights, encode_image, init_vision


@dataclass
class AlignedModel:
    llm: LlmWeights
    vision: VisionWeights
    generators: dict[WeightKind, GeneratorWeights]
    plan: InjectionPlan

    def deltas(self, images):
        z = encode_image(images, self.vision)
        out = []
        for kind in self.plan.kinds:
            out.extend(generate_deltas(z, self.generators[kind], self.plan.target_blocks))
        return out

    def logits(self, images, tokens, mode: str = "branch", blind: bool = False) -> Tensor:
        """``mode`` is ``"branch"`` or ``"merge"``; ``blind`` drops all deltas."""
        if blind:
            return llm_forward(tokens, self.llm)
        deltas = self.deltas(images)
        if mode == "branch":
            return llm_forward(tokens, self.llm, deltas)
        if mode == "merge":
            return llm_forward(tokens, merge(self.llm, deltas))
        raise ValueError(f"unknown mode {mode!r}")

    def generator_parameters(self) -> dict[str, Tensor]:
        out = {}
        for g in self.generators.values():
            out.update(g.named_parameters())
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            **self.llm.named_parameters(),
            **self.vision.named_parameters(),
            **self.generator_parameters(),
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} vs {t.shape}")
            t.data[...] = state[k]

    def save(self, path):
        checkpoint.save(path, self.state_dict())


def init_model(
    llm_cfg: LlmConfig,
    vision_cfg: VisionConfig,
    gen_cfg: GeneratorConfig,
    kinds,
    seed: int,
) -> AlignedModel:
    rng = Rng(seed)
    llm = init_llm(llm_cfg, rng.child("llm"))
    vision = init_vision(vision_cfg, rng.child("vision"))
    plan = build_plan(llm_cfg.d_blocks, gen_cfg.k, kinds)
    gens = {
        kind: init_generator(gen_cfg, kind, llm_cfg.h, llm_cfg.h_ff, vision_cfg.d_v, rng.child("pwg"))
        for kind in plan.kinds
    }
    return AlignedModel(llm=llm, vision=vision, generators=gens, plan=plan)

