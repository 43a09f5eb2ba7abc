"""Outcome-aligned group-relative policy optimization over the coupled
latent-action + flow rollout.

Collection runs under the current parameters with gradients off: G latent
rollouts per prompt (halting decided by the frozen head), one shared
initial flow noise per group, stochastic transitions on the configured
step subset, and terminal rewards on the decoded scenes. The update then
replays stored actions and transitions under the live parameters, forms
clamped/clipped likelihood ratios against the stored behavior values, and
descends the clipped surrogates plus reference regularizers. Halting
parameters are excluded from the optimizer and halting log-probabilities
never enter the losses.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Task
from .engine import Tensor, no_grad
from .flowgen import default_omega, sample_sde, transition_logprob, velocity_residual
from .model import HALTING_PREFIX, ModelConfig
from .numerics import (
    DiagGaussian,
    clamp_exp_ratio,
    clipped_surrogate,
    gaussian_kl_diag,
    standardize_group,
)
from .params import Adam, Parameters, clip_global_norm
from .policy import run_rollout
from .scene import decode_scene, reward as scene_reward

REWARD_NAMES = ("constraints",)


@dataclass(frozen=True)
class RLConfig:
    G: int = 8
    kappa: float = 5.0  # latent log-ratio clamp
    eps: float = 0.2  # latent clip width
    eps_x: float = 0.2  # flow clip width
    beta_z: float = 0.01  # latent reference-KL weight
    beta_vel: float = 0.1  # velocity regularizer weight
    lambda_z: float = 1.0
    lambda_x: float = 1.0
    updates: int = 100
    b_prompts: int = 4  # groups per update
    lr: float = 1e-3
    grad_clip: float = 1.0
    kl_direction: str = "current_first"  # KL(q_cur || q_ref); "reference_first" reverses
    ref_refresh: int = 0  # refresh the reference snapshot every k updates; 0 = never
    inner_epochs: int = 1
    reward_name: str = "constraints"
    guard_drop: float = 0.3
    guard_patience: int = 50
    eval_every: int = 25
    eval_n: int = 30

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("group size must be at least 2 (advantages undefined)")
        for name in ("kappa", "eps", "eps_x"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kl_direction not in ("current_first", "reference_first"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")
        if self.reward_name not in REWARD_NAMES:
            raise ValueError(f"unknown reward {self.reward_name!r}")


@dataclass
class RolloutTuple:
    """Everything one rollout contributes to the update."""

    prompt_ids: list[int]
    lengths: dict[str, int]
    actions: list[np.ndarray]
    lp_old: np.ndarray  # (T,) per-dim-normalized latent log-probs under the snapshot
    halt_logprobs: list[float]  # stored only; excluded from the objective
    H: np.ndarray  # (T+1, d) conditioning states under the snapshot
    traj: object  # FlowTrajectory with stored transition statistics
    reward: float = 0.0
    advantage: float = 0.0

    @property
    def T(self) -> int:
        return len(self.actions)


@dataclass
class Group:
    task: Task
    seed: int
    x_init: np.ndarray
    members: list[RolloutTuple] = field(default_factory=list)

    def rewards(self) -> np.ndarray:
        return np.array([m.reward for m in self.members])


def make_reward_fn(name: str, mc: ModelConfig):
    if name == "constraints":
        return lambda task, scene, member: scene_reward(task.spec, scene, mc.scene)
    raise ValueError(f"unknown reward {name!r}")


def collect_group(
    params: Parameters,
    task: Task,
    mc: ModelConfig,
    G: int,
    seed: int,
    omega: list[int] | None = None,
) -> Group:
    """G coupled rollouts for one prompt under frozen parameters.

    Latent noise streams are distinct per member; the initial flow noise is
    drawn once and shared by the whole group.
    """
    if G < 2:
        raise ValueError("group size must be at least 2")
    omega = default_omega(mc.flow.M, mc.flow.n_sde) if omega is None else omega
    x_init = np.random.default_rng([seed, 0xF10]).standard_normal(mc.flow.d_x)
    group = Group(task=task, seed=seed, x_init=x_init)
    with no_grad():
        for i in range(G):
            res = run_rollout(
                params, mc.stream, mc.schedule, task.token_ids, mode="stochastic",
                seed=seed * 131 + i,
            )
            H = res.H.data.copy()
            traj = sample_sde(
                params, mc.flow, Tensor(H), x_init, omega, seed=seed * 257 + i
            )
            group.members.append(
                RolloutTuple(
                    prompt_ids=list(task.token_ids),
                    lengths=dict(res.rollout.role_lengths),
                    actions=res.rollout.actions(),
                    lp_old=res.rollout.logprobs(),
                    halt_logprobs=[
                        s.halt_logprob for s in res.rollout.steps if s.halt_logprob is not None
                    ],
                    H=H,
                    traj=traj,
                )
            )
    return group


def score_group(group: Group, reward_fn, mc: ModelConfig) -> None:
    """Terminal rewards on decoded final states; standardized advantages."""
    for m in group.members:
        scene = decode_scene(m.traj.x0, mc.scene)
        m.reward = float(reward_fn(group.task, scene, m))
    advantages = standardize_group(group.rewards())
    for m, a in zip(group.members, advantages):
        m.advantage = float(a)


def _replay(params: Parameters, mc: ModelConfig, member: RolloutTuple):
    return run_rollout(
        params, mc.stream, mc.schedule, member.prompt_ids,
        mode="mean", forced_lengths=member.lengths, replay_actions=member.actions,
    )


def latent_loss(
    groups: list[Group],
    params: Parameters,
    ref_params: Parameters,
    mc: ModelConfig,
    cfg: RLConfig,
) -> tuple[Tensor, dict]:
    """Clipped latent surrogate plus reference KL over all active positions.

    Current log-probs come from teacher-forced replay of the stored actions,
    so the same collected group supports multiple inner epochs.
    """
    w_z = sum(m.T for g in groups for m in g.members)
    if w_z == 0:
        raise ValueError("no active latent positions in the batch")
    loss: Tensor = Tensor(0.0)
    clipped = 0
    kl_total = 0.0
    for g in groups:
        for m in g.members:
            replay = _replay(params, mc, m)
            if cfg.beta_z > 0:
                with no_grad():
                    ref_replay = _replay(ref_params, mc, m)
            for n, step in enumerate(replay.rollout.steps):
                rho = clamp_exp_ratio(step.logprob, float(m.lp_old[n]), cfg.kappa)
                loss = loss - clipped_surrogate(rho, m.advantage, cfg.eps) * (1.0 / w_z)
                if abs(float(rho.data) - 1.0) > cfg.eps:
                    clipped += 1
                if cfg.beta_z > 0:
                    ref_step = ref_replay.rollout.steps[n]
                    q_cur = DiagGaussian(step.mu, step.sigma)
                    q_ref = DiagGaussian(Tensor(ref_step.mu.data), Tensor(ref_step.sigma.data))
                    d_z = (
                        gaussian_kl_diag(q_cur, q_ref)
                        if cfg.kl_direction == "current_first"
                        else gaussian_kl_diag(q_ref, q_cur)
                    )
                    loss = loss + d_z * (cfg.beta_z / w_z)
                    kl_total += float(d_z.data)
    return loss, {"clip_frac_z": clipped / w_z, "mean_dz": kl_total / w_z}


def flow_loss(
    groups: list[Group],
    params: Parameters,
    mc: ModelConfig,
    cfg: RLConfig,
) -> tuple[Tensor, dict]:
    """Clipped flow surrogate over the stored stochastic transitions.

    New transition means are recomputed from the live velocity field at the
    stored states and conditioning; ratios are per-dimension normalized.
    """
    n_terms = sum(len(m.traj.sde_steps) for g in groups for m in g.members)
    if n_terms == 0:
        raise ValueError("no stochastic transitions stored (empty omega)")
    loss: Tensor = Tensor(0.0)
    clipped = 0
    for g in groups:
        for m in g.members:
            H = Tensor(m.H)
            for s in m.traj.sde_steps:
                lp_new = transition_logprob(params, mc.flow, s.x_next, s.x_m, s.m, mc.flow.M, H)
                rho = (lp_new - float(s.logprob)).exp()
                loss = loss - clipped_surrogate(rho, m.advantage, cfg.eps_x) * (1.0 / n_terms)
                if abs(float(rho.data) - 1.0) > cfg.eps_x:
                    clipped += 1
    return loss, {"clip_frac_x": clipped / n_terms}


def velocity_reg(
    groups: list[Group],
    params: Parameters,
    ref_params: Parameters,
    mc: ModelConfig,
) -> Tensor:
    """Mean actor-vs-reference velocity deviation at the visited states."""
    n_terms = sum(len(m.traj.sde_steps) for g in groups for m in g.members)
    if n_terms == 0:
        return Tensor(0.0)
    total: Tensor = Tensor(0.0)
    for g in groups:
        for m in g.members:
            H = Tensor(m.H)
            for s in m.traj.sde_steps:
                r = velocity_residual(params, ref_params, mc.flow, s.x_m, s.m, mc.flow.M, H)
                total = total + r * (1.0 / n_terms)
    return total


def lf_grpo_step(
    groups: list[Group],
    params: Parameters,
    ref_params: Parameters,
    optimizer: Adam,
    mc: ModelConfig,
    cfg: RLConfig,
) -> dict:
    """One combined update; returns the step's metrics."""
    rewards = np.concatenate([g.rewards() for g in groups])
    advs = np.array([m.advantage for g in groups for m in g.members])
    metrics = {
        "mean_reward": float(rewards.mean()),
        "adv_std": float(advs.std()),
        "groups_with_spread": float(np.mean([g.rewards().std() > 1e-9 for g in groups])),
    }
    for _ in range(cfg.inner_epochs):
        params.zero_grad()
        total: Tensor = Tensor(0.0)
        if cfg.lambda_z != 0:
            lz, m_z = latent_loss(groups, params, ref_params, mc, cfg)
            total = total + lz * cfg.lambda_z
            metrics.update(m_z)
            metrics["l_z"] = float(lz.data)
        if cfg.lambda_x != 0:
            lx, m_x = flow_loss(groups, params, mc, cfg)
            total = total + lx * cfg.lambda_x
            metrics.update(m_x)
            metrics["l_flow"] = float(lx.data)
        if cfg.beta_vel != 0:
            rv = velocity_reg(groups, params, ref_params, mc)
            total = total + rv * cfg.beta_vel
            metrics["r_vel"] = float(rv.data)
        if not np.isfinite(float(total.data)):
            dump = [(g.task.task_id, g.rewards().tolist()) for g in groups]
            raise FloatingPointError(f"non-finite RL loss; offending groups: {dump}")
        total.backward()
        metrics["grad_norm"] = clip_global_norm(params, cfg.grad_clip, exclude_prefixes=(HALTING_PREFIX,))
        optimizer.step()
        metrics["loss"] = float(total.data)
    return metrics


class DivergenceError(RuntimeError):
    pass


def train_rl(
    tasks: list[Task],
    params: Parameters,
    mc: ModelConfig,
    cfg: RLConfig,
    seed: int,
    eval_tasks: list[Task] | None = None,
    metrics_out=None,
    eval_fn=None,
    reward_fn=None,
    checkpoint_cb=None,
    start_update: int = 0,
    optimizer: Adam | None = None,
) -> Adam:
    """Collect -> score -> update loop with a fixed reference snapshot.

    The reference defaults to the incoming (supervised) checkpoint and is
    only refreshed if `ref_refresh` is set. A divergence guard aborts when
    the mean reward stays far below its running maximum for too long.
    """
    reward_fn = reward_fn or make_reward_fn(cfg.reward_name, mc)
    ref_params = params.clone()
    opt = optimizer or Adam(params, lr=cfg.lr, exclude_prefixes=(HALTING_PREFIX,))
    best = -np.inf
    lag = 0
    for u in range(start_update, cfg.updates):
        t0 = time.time()
        if cfg.ref_refresh and u > 0 and u % cfg.ref_refresh == 0:
            ref_params = params.clone()
        rng = np.random.default_rng([seed, 0xB7, u])
        picks = rng.choice(len(tasks), size=min(cfg.b_prompts, len(tasks)), replace=False)
        groups = []
        for j, ti in enumerate(picks):
            g = collect_group(params, tasks[int(ti)], mc, cfg.G, seed=seed * 613 + u * 37 + j)
            score_group(g, reward_fn, mc)
            groups.append(g)
        metrics = lf_grpo_step(groups, params, ref_params, opt, mc, cfg)
        metrics["update"] = u
        metrics["wall"] = time.time() - t0

        best = max(best, metrics["mean_reward"])
        lag = lag + 1 if metrics["mean_reward"] < best - cfg.guard_drop else 0
        if lag >= cfg.guard_patience:
            raise DivergenceError(
                f"mean reward stayed more than {cfg.guard_drop} below its running "
                f"maximum for {lag} consecutive updates"
            )

        if eval_fn is not None and eval_tasks and cfg.eval_every and (u + 1) % cfg.eval_every == 0:
            metrics["eval_reward"] = eval_fn(params, eval_tasks)
        if metrics_out is not None:
            metrics_out.write(json.dumps(metrics) + "\n")
        if checkpoint_cb is not None:
            checkpoint_cb(u + 1, opt)
    return opt


def assembled_logdensity(member: RolloutTuple, d_model: int, d_x: int) -> float:
    """Total coupled-rollout log-density from the stored per-step values:
    latent per-dim log-probs times d plus transition per-dim log-probs
    times d_x. Used by the assembled-identity audit."""
    latent = float(member.lp_old.sum()) * d_model
    flow = sum(s.logprob for s in member.traj.sde_steps) * d_x
    return latent + flow
