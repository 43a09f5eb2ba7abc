"""Role-structured Gaussian latent action policy.

A rollout alternates: read the stream's last hidden state, emit a diagonal
Gaussian, sample an action by reparameterization, write it back, and (past
the role's minimum length) ask the halting head whether the role is done.
Teacher forcing fixes the realized lengths without touching the action
noise stream; replay re-injects stored actions under (possibly different)
parameters; interventions rewrite the action contents and rebuild the
conditioning states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import ROLE_INDEX, HiddenStream, RoleSchedule, StreamConfig
from .engine import Tensor, dot, grad_enabled
from .numerics import DiagGaussian, gaussian_logprob_normalized
from .params import Parameters

SIGMA_FLOOR = 1e-3


def init_policy_params(params: Parameters, d_model: int, seed: int = 0) -> None:
    rng = np.random.default_rng([seed, 0xA11])
    params.add("policy.mu.w", rng.standard_normal((d_model, d_model)) * 0.02)
    params.add("policy.mu.b", np.zeros(d_model))
    params.add("policy.sigma.w", rng.standard_normal((d_model, d_model)) * 0.02)
    # biased low so initial stds sit near the teacher prior scale
    params.add("policy.sigma.b", np.full(d_model, -2.0))
    params.add("halt.w", rng.standard_normal((len(ROLE_INDEX), d_model)) * 0.02)
    params.add("halt.b", np.zeros(len(ROLE_INDEX)))


def policy_step(params: Parameters, h: Tensor) -> DiagGaussian:
    """Diagonal Gaussian over the next action given the current hidden state."""
    mu = params["policy.mu.w"] @ h.reshape(-1, 1) + params["policy.mu.b"].reshape(-1, 1)
    sig_raw = params["policy.sigma.w"] @ h.reshape(-1, 1) + params["policy.sigma.b"].reshape(-1, 1)
    sigma = sig_raw.reshape(-1).softplus() + SIGMA_FLOOR
    return DiagGaussian(mu.reshape(-1), sigma)


def sample_reparam(g: DiagGaussian, eps: np.ndarray) -> Tensor:
    """z = mu + sigma * eps; gradient flows to mu and sigma."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != g.mean.shape:
        raise ValueError(f"eps shape {eps.shape} != gaussian dim {g.mean.shape}")
    return g.mean + g.std * Tensor(eps)


def _halt_logit(params: Parameters, h: Tensor, role: str) -> Tensor:
    return dot(params["halt.w"][ROLE_INDEX[role]], h) + params["halt.b"][ROLE_INDEX[role]]


def _eps_for(seed: int, role: str, k: int, d: int) -> np.ndarray:
    # one substream per (role, step) slot, so forcing lengths or halting early
    # never shifts the noise other slots receive
    rng = np.random.default_rng([seed, 0xE9, ROLE_INDEX[role], k])
    return rng.standard_normal(d)


@dataclass
class StepTrace:
    role: str
    step: int  # 1-based within the role
    mu: Tensor
    sigma: Tensor
    z: Tensor
    eps: np.ndarray
    logprob: Tensor  # per-dimension normalized log q(z | h)
    halt_logit: Tensor | None = None
    halt_prob: float | None = None
    halt_decision: bool | None = None
    halt_logprob: float | None = None  # Bernoulli log-prob of the decision; never optimized

    def export(self) -> dict:
        out = {
            "role": self.role,
            "step": self.step,
            "mu": self.mu.data.tolist(),
            "sigma": self.sigma.data.tolist(),
            "z": self.z.data.tolist(),
            "logprob": float(self.logprob.data),
        }
        if self.halt_prob is not None:
            out["halt_prob"] = self.halt_prob
        return out


@dataclass
class LatentRollout:
    steps: list[StepTrace]
    role_lengths: dict[str, int]
    mode: str
    seed: int
    prompt_ids: list[int]
    terminated: bool = True

    @property
    def T(self) -> int:
        return len(self.steps)

    def actions(self) -> list[np.ndarray]:
        return [s.z.data.copy() for s in self.steps]

    def logprobs(self) -> np.ndarray:
        return np.array([float(s.logprob.data) for s in self.steps])

    def role_blocks(self) -> list[tuple[str, list[int]]]:
        """Contiguous (role, step-index list) blocks in rollout order."""
        blocks: list[tuple[str, list[int]]] = []
        for i, s in enumerate(self.steps):
            if blocks and blocks[-1][0] == s.role:
                blocks[-1][1].append(i)
            else:
                blocks.append((s.role, [i]))
        return blocks


@dataclass
class RolloutResult:
    rollout: LatentRollout
    stream: HiddenStream
    H: Tensor  # (T+1, d) conditioning states: latent positions + sentinel


def run_rollout(
    params: Parameters,
    cfg: StreamConfig,
    schedule: RoleSchedule,
    prompt_ids: list[int],
    mode: str = "stochastic",
    seed: int = 0,
    perception: np.ndarray | None = None,
    forced_lengths: dict[str, int] | None = None,
    replay_actions: list[np.ndarray] | None = None,
) -> RolloutResult:
    """Autoregressive latent rollout ending in a sentinel.

    mode "stochastic" samples actions by reparameterization, "mean" takes the
    Gaussian mean. `forced_lengths` overrides halting decisions (teacher
    forcing / replay) while halting logits are still recorded for the
    supervised halting loss. `replay_actions` injects the given action
    vectors (as constants) instead of sampling; with it, the realized
    lengths must be forced. Bounds guarantee termination either way.
    """
    if mode not in ("stochastic", "mean"):
        raise ValueError(f"unknown mode {mode!r}")
    if replay_actions is not None and forced_lengths is None:
        raise ValueError("replay requires forced lengths")
    if forced_lengths is not None:
        for role in schedule.active:
            lo, hi = schedule.bounds[role]
            if not (lo <= forced_lengths[role] <= hi):
                raise ValueError(f"forced length for {role} out of bounds")

    d = cfg.d_model
    stream = HiddenStream(params, cfg)
    stream.append_tokens(prompt_ids)
    if perception is not None:
        stream.append_perception(perception)

    steps: list[StepTrace] = []
    role_lengths: dict[str, int] = {}
    idx = 0
    for role in schedule.active:
        lo, hi = schedule.bounds[role]
        target = forced_lengths[role] if forced_lengths is not None else None
        for k in range(1, hi + 1):
            h_before = stream.last_state()
            g = policy_step(params, h_before)
            if replay_actions is not None:
                z = Tensor(replay_actions[idx])
                eps = np.zeros(d)
            elif mode == "mean":
                z = g.mean
                eps = np.zeros(d)
            else:
                eps = _eps_for(seed, role, k, d)
                z = sample_reparam(g, eps)
            lp = gaussian_logprob_normalized(z if replay_actions is not None else z.detach(), g)
            trace = StepTrace(role=role, step=k, mu=g.mean, sigma=g.std, z=z, eps=eps, logprob=lp)
            h_after = stream.append_latent(z, role, k)
            idx += 1

            stop = k == hi
            if lo < hi and k >= lo:
                logit = _halt_logit(params, h_after, role)
                p_stop = float(1.0 / (1.0 + np.exp(-logit.data)))
                if target is not None:
                    decision = k == target
                elif k == hi:
                    decision = True
                else:
                    decision = p_stop > 0.5
                trace.halt_logit = logit
                trace.halt_prob = p_stop
                trace.halt_decision = decision
                trace.halt_logprob = float(np.log(p_stop if decision else 1.0 - p_stop))
                stop = decision
            elif target is not None:
                stop = k == target
            steps.append(trace)
            if stop:
                role_lengths[role] = k
                break

    sentinel_state = stream.append_sentinel()
    del sentinel_state
    H = stream.conditioning_states()
    rollout = LatentRollout(
        steps=steps,
        role_lengths=role_lengths,
        mode=mode,
        seed=seed,
        prompt_ids=list(prompt_ids),
    )
    return RolloutResult(rollout=rollout, stream=stream, H=H)


def teacher_length_rollout(
    params: Parameters,
    cfg: StreamConfig,
    schedule: RoleSchedule,
    prompt_ids: list[int],
    lengths: dict[str, int],
    seed: int = 0,
    perception: np.ndarray | None = None,
) -> RolloutResult:
    """Self-sampled rollout with halting decisions forced to teacher lengths."""
    return run_rollout(
        params,
        cfg,
        schedule,
        prompt_ids,
        mode="stochastic",
        seed=seed,
        perception=perception,
        forced_lengths={r: lengths[r] for r in schedule.active},
    )


INTERVENTION_MODES = ("zero", "random", "shuffle_roles")


def _intervened_actions(rollout: LatentRollout, mode: str, seed: int) -> list[np.ndarray]:
    originals = rollout.actions()
    d = originals[0].shape[0]
    rng = np.random.default_rng([seed, 0x1A7])
    if mode == "zero":
        return [np.zeros(d) for _ in originals]
    if mode == "random":
        out = []
        for z in originals:
            v = rng.standard_normal(d)
            out.append(v * (np.linalg.norm(z) / (np.linalg.norm(v) + 1e-12)))
        return out
    if mode == "shuffle_roles":
        blocks = rollout.role_blocks()
        non_draft = [b for b in blocks if b[0] != "draft"]
        if len(non_draft) < 2:
            raise ValueError("role shuffle needs at least two non-draft roles active")
        n = len(blocks)
        perms = []
        import itertools

        for p in itertools.permutations(range(n)):
            if list(p) != list(range(n)):
                perms.append(p)
        perm = perms[int(rng.integers(len(perms)))]
        reordered: list[np.ndarray] = []
        for bi in perm:
            reordered.extend(originals[i] for i in blocks[bi][1])
        return reordered
    raise ValueError(f"unknown intervention mode {mode!r}")


def intervene(
    params: Parameters,
    cfg: StreamConfig,
    schedule: RoleSchedule,
    result: RolloutResult,
    mode: str,
    seed: int = 0,
) -> RolloutResult:
    """Replace the rollout's action contents and recompute conditioning states.

    zero: all actions become zero vectors. random: fresh Gaussian vectors
    rescaled to each original action's L2 norm. shuffle_roles: role blocks
    reordered by a seeded non-identity permutation into the original layout.
    The realized length, role layout, and sentinel are preserved.
    """
    rollout = result.rollout
    actions = _intervened_actions(rollout, mode, seed)
    return run_rollout(
        params,
        cfg,
        schedule,
        rollout.prompt_ids,
        mode="mean",
        seed=rollout.seed,
        forced_lengths=dict(rollout.role_lengths),
        replay_actions=actions,
    )
