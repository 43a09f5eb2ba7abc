"""Teacher-free inference, benchmark tables, intervention reports, and
ablation schedule variants."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .backbone import RoleSchedule
from .data import Task, build_task
from .engine import Tensor, no_grad
from .flowgen import default_omega, sample_ode, sample_sde
from .model import ModelConfig
from .params import Parameters
from .policy import INTERVENTION_MODES, intervene, run_rollout
from .scene import CATEGORIES, Scene, SceneConfig, decode_scene, make_teacher_records, reward


@dataclass
class SampleOutput:
    scene: Scene
    reward: float
    T: int
    role_lengths: dict[str, int]
    x0: np.ndarray


def flow_noise(seed: int, d_x: int) -> np.ndarray:
    return np.random.default_rng([seed, 0x0D1]).standard_normal(d_x)


def sample_scene(
    params: Parameters,
    mc: ModelConfig,
    task: Task,
    seed: int,
    mode: str = "mean",
    stochastic_flow: bool = False,
) -> SampleOutput:
    """Pure inference: prompt in, scene out. No teacher data is touched —
    only the task's token_ids and (for scoring) its spec are read."""
    with no_grad():
        res = run_rollout(params, mc.stream, mc.schedule, task.token_ids, mode=mode, seed=seed)
        x_init = flow_noise(seed, mc.flow.d_x)
        if stochastic_flow:
            traj = sample_sde(
                params, mc.flow, res.H, x_init, default_omega(mc.flow.M, mc.flow.n_sde), seed=seed
            )
            x0 = traj.x0
        else:
            x0 = sample_ode(params, mc.flow, res.H, x_init)
    scene = decode_scene(x0, mc.scene)
    return SampleOutput(
        scene=scene,
        reward=reward(task.spec, scene, mc.scene),
        T=res.rollout.T,
        role_lengths=dict(res.rollout.role_lengths),
        x0=x0,
    )


def held_out_tasks(mc: ModelConfig, n_per_category: int, seed: int) -> list[Task]:
    """Evaluation prompts drawn from a seed range disjoint from training
    (training task seeds are derived from seed * 1_000_003 + index)."""
    bounds = {r: mc.schedule.bounds[r] for r in mc.schedule.active}
    tasks = []
    i = 0
    for cat_i, category in enumerate(CATEGORIES):
        for j in range(n_per_category):
            tasks.append(build_task(i, (seed + 7_777_001) * 977 + cat_i * 10_007 + j, category, bounds, mc.scene))
            i += 1
    return tasks


def evaluate(params: Parameters, mc: ModelConfig, tasks: list[Task], seed: int) -> dict:
    """Per-category mean reward and the overall mean, deterministic in seed."""
    per_cat: dict[str, list[float]] = {c: [] for c in CATEGORIES}
    for i, task in enumerate(tasks):
        out = sample_scene(params, mc, task, seed=seed * 104_729 + i)
        per_cat[task.spec.category].append(out.reward)
    table = {c: float(np.mean(v)) if v else float("nan") for c, v in per_cat.items()}
    all_rewards = [r for v in per_cat.values() for r in v]
    table["overall"] = float(np.mean(all_rewards))
    table["n"] = len(all_rewards)
    return table


def intervention_report(
    params: Parameters,
    mc: ModelConfig,
    tasks: list[Task],
    seed: int,
    modes: tuple[str, ...] = INTERVENTION_MODES,
) -> dict:
    """Mean reward per intervention mode against the intact rollout, with
    matched flow noise within each prompt. Deltas are intact - mode."""
    for m in modes:
        if m not in INTERVENTION_MODES:
            raise ValueError(f"unknown intervention mode {m!r}")
    sums = {"intact": 0.0, **{m: 0.0 for m in modes}}
    for i, task in enumerate(tasks):
        rollout_seed = seed * 31_337 + i
        x_init = flow_noise(rollout_seed, mc.flow.d_x)
        with no_grad():
            intact = run_rollout(params, mc.stream, mc.schedule, task.token_ids, mode="mean", seed=rollout_seed)
            x0 = sample_ode(params, mc.flow, intact.H, x_init)
            sums["intact"] += reward(task.spec, decode_scene(x0, mc.scene), mc.scene)
            for mode in modes:
                modified = intervene(params, mc.stream, mc.schedule, intact, mode, seed=rollout_seed + 1)
                x0m = sample_ode(params, mc.flow, modified.H, x_init)
                sums[mode] += reward(task.spec, decode_scene(x0m, mc.scene), mc.scene)
    n = len(tasks)
    means = {k: v / n for k, v in sums.items()}
    return {
        "n_prompts": n,
        "mean_reward": means,
        "delta_vs_intact": {m: means["intact"] - means[m] for m in modes},
    }


ABLATION_VARIANTS = ("no_plan", "no_draft", "no_diagnosis", "no_refine", "fixed_8", "fixed_15")

# draft stays single-step; the remaining budget spreads as evenly as possible
FIXED_LENGTHS = {
    "fixed_8": {"plan": 3, "draft": 1, "diagnosis": 2, "refine": 2},
    "fixed_15": {"plan": 5, "draft": 1, "diagnosis": 5, "refine": 4},
}


def variant_schedule(base: RoleSchedule, variant: str) -> RoleSchedule:
    if variant.startswith("no_"):
        role = variant[3:]
        if role not in base.active:
            raise ValueError(f"role {role!r} not active in the base schedule")
        return base.without(role)
    if variant in FIXED_LENGTHS:
        return RoleSchedule.fixed(FIXED_LENGTHS[variant])
    raise ValueError(f"unknown ablation variant {variant!r}")


def variant_model_config(mc: ModelConfig, variant: str) -> ModelConfig:
    return replace(mc, schedule=variant_schedule(mc.schedule, variant))


def retarget_tasks(tasks: list[Task], mc: ModelConfig) -> list[Task]:
    """Rebuild teacher records and lengths for a variant schedule's bounds."""
    bounds = {r: mc.schedule.bounds[r] for r in mc.schedule.active}
    out = []
    for t in tasks:
        records, lengths = make_teacher_records(t.spec, t.reference, t.draft, bounds, mc.scene)
        out.append(replace_task(t, records, lengths))
    return out


def replace_task(t: Task, records, lengths) -> Task:
    return Task(
        task_id=t.task_id,
        spec=t.spec,
        token_ids=t.token_ids,
        reference=t.reference,
        draft=t.draft,
        records=records,
        lengths=lengths,
    )
