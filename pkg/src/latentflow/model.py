"""Assembly of the full parameter set and shared model plumbing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import RoleSchedule, StreamConfig, init_backbone_params
from .flowgen import FlowConfig, init_flow_params
from .params import Parameters
from .policy import init_policy_params
from .priors import PriorConfig, init_prior_params
from .scene import FIELD_TAGS, SceneConfig
from .vocab import vocab_for


@dataclass(frozen=True)
class ModelConfig:
    scene: SceneConfig = SceneConfig()
    stream: StreamConfig = StreamConfig()
    schedule: RoleSchedule = field(default_factory=RoleSchedule)
    prior: PriorConfig = PriorConfig()
    flow: FlowConfig = FlowConfig()
    init_seed: int = 0

    def __post_init__(self):
        vocab = vocab_for(self.scene)
        if self.stream.vocab_size != vocab.size:
            raise ValueError(f"stream vocab_size {self.stream.vocab_size} != grammar size {vocab.size}")
        if self.flow.d_x != self.scene.flat_dim:
            raise ValueError("flow d_x must equal the scene's flat dimension")
        if self.flow.d_cond != self.stream.d_model:
            raise ValueError("flow d_cond must equal the stream width")
        need = vocab.max_prompt_len + self.scene.k_slots + self.schedule.max_total + 1
        if self.stream.max_positions < need:
            raise ValueError(f"max_positions {self.stream.max_positions} < required {need}")


def init_sft_aux_params(params: Parameters, d_model: int, seed: int = 0) -> None:
    # linear probe for the alternative anchor loss (field-tag classification)
    rng = np.random.default_rng([seed, 0xD7])
    params.add("anchor_probe.w", rng.standard_normal((len(FIELD_TAGS), d_model)) * 0.02)
    params.add("anchor_probe.b", np.zeros(len(FIELD_TAGS)))


def init_model_params(cfg: ModelConfig) -> Parameters:
    params = Parameters()
    init_backbone_params(params, cfg.stream, d_v=cfg.scene.d_v, seed=cfg.init_seed)
    init_policy_params(params, cfg.stream.d_model, seed=cfg.init_seed)
    init_prior_params(params, cfg.prior, cfg.stream.d_model, cfg.scene.d_v, seed=cfg.init_seed)
    init_flow_params(params, cfg.flow, seed=cfg.init_seed)
    init_sft_aux_params(params, cfg.stream.d_model, seed=cfg.init_seed)
    return params


FROZEN_PREFIXES = ("prior.hash_a", "prior.hash_b", "prior.draft_proj")
HALTING_PREFIX = "halt."
