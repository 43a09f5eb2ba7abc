"""Run configuration: nested YAML sections, strict validation, defaults,
and the config hash recorded in checkpoints.

The config file is the source of truth; CLI flags override individual keys.
Unknown sections or keys fail fast. Every default below is documented in
docs/config_reference.md (a test keeps that file exhaustive).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import yaml

from .backbone import RoleSchedule, StreamConfig
from .flowgen import FlowConfig
from .model import ModelConfig
from .grpo import RLConfig
from .priors import PriorConfig
from .scene import SceneConfig
from .sft import SftConfig
from .vocab import vocab_for

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SeedsSection:
    data: int = 0  # task generation
    init: int = 0  # parameter initialization
    rollout: int = 0  # training-time sampling (rollouts, noise, batching)


@dataclass(frozen=True)
class SceneSection:
    k_slots: int = 4
    n_colors: int = 6
    rel_margin: float = 0.05
    d_v: int = 16


@dataclass(frozen=True)
class StreamSection:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_positions: int = 48


@dataclass(frozen=True)
class ScheduleSection:
    plan_min: int = 1
    plan_max: int = 4
    diagnosis_min: int = 1
    diagnosis_max: int = 3
    refine_min: int = 1
    refine_max: int = 3


@dataclass(frozen=True)
class PriorSection:
    sigma_q: float = 0.1
    alpha_ld: float = 1.0
    d_prior: int = 64
    n_buckets: int = 4096


@dataclass(frozen=True)
class FlowSection:
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    n_time: int = 16
    m_steps: int = 20
    n_sde: int = 5
    sigma_sde: float = 0.2
    sigma_time_power: float = 1.0


@dataclass(frozen=True)
class SftSection:
    lambda_var: float = 1.0
    lambda_anc: float = 0.1
    lambda_halt: float = 0.5
    lambda_img: float = 1.0
    lr: float = 3e-3
    batch_size: int = 8
    n_eps: int = 1
    grad_clip: float = 1.0
    phase1_steps: int = 500
    phase2_steps: int = 800
    warm_start_frac: float = 0.8
    anchor_mode: str = "cosine"
    checkpoint_every: int = 100


@dataclass(frozen=True)
class RlSection:
    group_size: int = 8
    kappa: float = 5.0
    eps: float = 0.2
    eps_x: float = 0.2
    beta_z: float = 0.01
    beta_vel: float = 0.1
    lambda_z: float = 1.0
    lambda_x: float = 1.0
    updates: int = 100
    b_prompts: int = 4
    lr: float = 1e-3
    grad_clip: float = 1.0
    kl_direction: str = "current_first"
    ref_refresh: int = 0
    inner_epochs: int = 1
    reward_name: str = "constraints"
    guard_drop: float = 0.3
    guard_patience: int = 50
    eval_every: int = 25
    eval_n: int = 30
    checkpoint_every: int = 50


@dataclass(frozen=True)
class DataSection:
    n_tasks: int = 2000


@dataclass(frozen=True)
class EvalSection:
    n_per_category: int = 50
    intervention_prompts: int = 200
    ablate_phase1_steps: int = 100
    ablate_phase2_steps: int = 200


@dataclass(frozen=True)
class PathsSection:
    run_dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seeds: SeedsSection = SeedsSection()
    scene: SceneSection = SceneSection()
    stream: StreamSection = StreamSection()
    schedule: ScheduleSection = ScheduleSection()
    prior: PriorSection = PriorSection()
    flow: FlowSection = FlowSection()
    sft: SftSection = SftSection()
    rl: RlSection = RlSection()
    data: DataSection = DataSection()
    eval: EvalSection = EvalSection()
    paths: PathsSection = PathsSection()

    # -- conversions ------------------------------------------------------------

    def scene_config(self) -> SceneConfig:
        s = self.scene
        return SceneConfig(k_slots=s.k_slots, n_colors=s.n_colors, rel_margin=s.rel_margin, d_v=s.d_v)

    def role_schedule(self) -> RoleSchedule:
        s = self.schedule
        return RoleSchedule(
            bounds={
                "plan": (s.plan_min, s.plan_max),
                "draft": (1, 1),
                "diagnosis": (s.diagnosis_min, s.diagnosis_max),
                "refine": (s.refine_min, s.refine_max),
            }
        )

    def model_config(self) -> ModelConfig:
        scene = self.scene_config()
        stream = StreamConfig(
            d_model=self.stream.d_model,
            n_layers=self.stream.n_layers,
            n_heads=self.stream.n_heads,
            vocab_size=vocab_for(scene).size,
            max_positions=self.stream.max_positions,
        )
        prior = PriorConfig(
            sigma_q=self.prior.sigma_q,
            alpha_ld=self.prior.alpha_ld,
            d_prior=self.prior.d_prior,
            n_buckets=self.prior.n_buckets,
        )
        flow = FlowConfig(
            d_x=scene.flat_dim,
            n_tokens=scene.k_slots,
            d_cond=stream.d_model,
            d_model=self.flow.d_model,
            n_blocks=self.flow.n_blocks,
            n_heads=self.flow.n_heads,
            n_time=self.flow.n_time,
            M=self.flow.m_steps,
            n_sde=self.flow.n_sde,
            sigma_sde=self.flow.sigma_sde,
            sigma_time_power=self.flow.sigma_time_power,
        )
        return ModelConfig(
            scene=scene,
            stream=stream,
            schedule=self.role_schedule(),
            prior=prior,
            flow=flow,
            init_seed=self.seeds.init,
        )

    def sft_config(self) -> SftConfig:
        s = self.sft
        return SftConfig(
            lambda_var=s.lambda_var,
            lambda_anc=s.lambda_anc,
            lambda_halt=s.lambda_halt,
            lambda_img=s.lambda_img,
            lr=s.lr,
            batch_size=s.batch_size,
            n_eps=s.n_eps,
            grad_clip=s.grad_clip,
            phase1_steps=s.phase1_steps,
            phase2_steps=s.phase2_steps,
            warm_start_frac=s.warm_start_frac,
            anchor_mode=s.anchor_mode,
        )

    def rl_config(self) -> RLConfig:
        r = self.rl
        return RLConfig(
            G=r.group_size,
            kappa=r.kappa,
            eps=r.eps,
            eps_x=r.eps_x,
            beta_z=r.beta_z,
            beta_vel=r.beta_vel,
            lambda_z=r.lambda_z,
            lambda_x=r.lambda_x,
            updates=r.updates,
            b_prompts=r.b_prompts,
            lr=r.lr,
            grad_clip=r.grad_clip,
            kl_direction=r.kl_direction,
            ref_refresh=r.ref_refresh,
            inner_epochs=r.inner_epochs,
            reward_name=r.reward_name,
            guard_drop=r.guard_drop,
            guard_patience=r.guard_patience,
            eval_every=r.eval_every,
            eval_n=r.eval_n,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {f.name: f.type for f in fields(RunConfig) if f.name != "schema_version"}


class ConfigError(ValueError):
    pass


def _coerce(section: str, key: str, expected, value):
    if isinstance(expected, int) and isinstance(value, bool):
        raise ConfigError(f"{section}.{key}: expected {type(expected).__name__}, got bool")
    if isinstance(expected, float) and isinstance(value, int):
        return float(value)
    if not isinstance(value, type(expected)):
        raise ConfigError(
            f"{section}.{key}: expected {type(expected).__name__}, got {type(value).__name__}"
        )
    return value


def from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig from a nested dict, rejecting unknown keys."""
    raw = dict(raw or {})
    version = raw.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    sections = {}
    defaults = RunConfig()
    for name, value in raw.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section {name!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        default_section = getattr(defaults, name)
        known = {f.name: getattr(default_section, f.name) for f in fields(default_section)}
        merged = dict(known)
        for key, v in value.items():
            if key not in known:
                raise ConfigError(f"unknown key {name}.{key}")
            merged[key] = _coerce(name, key, known[key], v)
        sections[name] = type(default_section)(**merged)
    return RunConfig(schema_version=SCHEMA_VERSION, **sections)


def load_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    """Read YAML config (all keys optional) and apply `section.key=value` overrides."""
    raw: dict = {}
    if path is not None:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, value = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, key = parts
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        raw[section][key] = yaml.safe_load(value)
    return from_dict(raw)


def render_config_reference() -> str:
    """Markdown table of every config key and its default."""
    lines = [
        "# Configuration reference",
        "",
        f"Schema version: {SCHEMA_VERSION}. Config files are YAML with the nested",
        "sections below; every key is optional and unknown keys are rejected.",
        "CLI `--set section.key=value` flags override file values.",
        "",
    ]
    defaults = RunConfig()
    for name in _SECTIONS:
        section = getattr(defaults, name)
        lines.append(f"## `{name}`")
        lines.append("")
        lines.append("| key | default | type |")
        lines.append("|---|---|---|")
        for f in fields(section):
            v = getattr(section, f.name)
            lines.append(f"| `{f.name}` | `{v}` | {type(v).__name__} |")
        lines.append("")
    return "\n".join(lines)
