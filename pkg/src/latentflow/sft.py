"""Prior-guided variational alignment: the four supervised losses, their
weighted combination, and the two-phase training loop.

The correction warm-up phase rolls out only the diagnosis and refine roles
with the candidate scene injected through the perception path and no image
loss; the full-generation phase rolls out all four roles from the prompt
alone and couples the latent trajectory to the flow generator. Both phases
force realized lengths to the teacher labels while actions stay
self-sampled, so the policy is aligned under its own rollout.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .backbone import RoleSchedule, StreamConfig
from .data import Task
from .engine import Tensor, check_finite, dot, softmax
from .flowgen import FlowConfig, fm_loss
from .model import ModelConfig
from .numerics import DiagGaussian, gaussian_kl_diag
from .params import Adam, Parameters, clip_global_norm
from .policy import RolloutResult, teacher_length_rollout
from .priors import PriorTargets, build_targets
from .scene import FIELD_TAGS, SceneConfig, TeacherRecord, encode_scene

PHASES = ("correction_warmup", "full_generation")
WARMUP_ROLES = ("diagnosis", "refine")


@dataclass(frozen=True)
class SftConfig:
    lambda_var: float = 1.0
    lambda_anc: float = 0.1
    lambda_halt: float = 0.5
    lambda_img: float = 1.0
    phase: str = "full_generation"
    lr: float = 3e-3
    batch_size: int = 8
    n_eps: int = 1  # reparameterization samples per example per step
    grad_clip: float = 1.0
    phase1_steps: int = 500
    phase2_steps: int = 800
    warm_start_frac: float = 0.8  # phase 2 starts from this fraction of phase-1 steps
    anchor_mode: str = "cosine"  # or "probe": field-tag classification from actions

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        for name in ("lambda_var", "lambda_anc", "lambda_halt", "lambda_img"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.phase == "correction_warmup" and self.lambda_img != 0.0:
            raise ValueError("correction warm-up runs with lambda_img = 0")
        if self.anchor_mode not in ("cosine", "probe"):
            raise ValueError(f"unknown anchor_mode {self.anchor_mode!r}")

    def for_phase(self, phase: str) -> "SftConfig":
        if phase == "correction_warmup":
            return replace(self, phase=phase, lambda_img=0.0)
        return replace(self, phase=phase)


# -- losses ---------------------------------------------------------------------


def variational_loss(result: RolloutResult, targets: PriorTargets) -> Tensor:
    """Sum over steps of KL(prior at the teacher mean || policy at h_n).

    One reparameterization sample estimates the noise expectation; gradient
    reaches the policy heads, the backbone (through the sampled history),
    and the prior construction (through the means).
    """
    steps = result.rollout.steps
    if len(steps) != targets.n:
        raise ValueError(f"rollout length {len(steps)} != target count {targets.n}")
    sigma_q = Tensor(np.full(targets.E.shape[1], targets.sigma_q))
    total: Tensor | None = None
    for i, s in enumerate(steps):
        prior = DiagGaussian(targets.E[i], sigma_q)
        term = gaussian_kl_diag(prior, DiagGaussian(s.mu, s.sigma))
        total = term if total is None else total + term
    return total


def anchor_loss(
    result: RolloutResult,
    targets: PriorTargets,
    params: Parameters | None = None,
    mode: str = "cosine",
    records: list[TeacherRecord] | None = None,
) -> Tensor:
    """Weak semantic grounding of the sampled actions.

    cosine: mean over steps of 1 - cos(z_n, e_n) with the targets held
    constant; zero-norm vectors count as orthogonal. probe: cross-entropy of
    a linear field-tag classifier on semantic-role actions.
    """
    steps = result.rollout.steps
    if len(steps) != targets.n:
        raise ValueError("rollout/target length mismatch")
    if mode == "probe":
        return _probe_anchor(result, params, records)
    total: Tensor | None = None
    for i, s in enumerate(steps):
        e = targets.E.data[i]
        e_norm = float(np.linalg.norm(e))
        z_norm = float(np.linalg.norm(s.z.data))
        if e_norm < 1e-12 or z_norm < 1e-12:
            term = Tensor(1.0)
        else:
            cos = dot(s.z, Tensor(e)) * (1.0 / e_norm) / (s.z * s.z).sum().sqrt()
            term = 1.0 - cos
        total = term if total is None else total + term
    return total * (1.0 / len(steps))


def _probe_anchor(result: RolloutResult, params: Parameters, records: list[TeacherRecord]) -> Tensor:
    by_role_step = {(r.role, r.step_index): r for r in records}
    total: Tensor | None = None
    n = 0
    for s in result.rollout.steps:
        rec = by_role_step.get((s.role, s.step))
        if rec is None:
            continue
        tag = rec.fields[0][0]
        logits = params["anchor_probe.w"] @ s.z + params["anchor_probe.b"]
        logp = softmax(logits, axis=-1)[FIELD_TAGS.index(tag)].log()
        total = -logp if total is None else total - logp
        n += 1
    return total * (1.0 / n) if total is not None else Tensor(0.0)


def halting_loss(result: RolloutResult, teacher_lengths: dict[str, int], schedule: RoleSchedule) -> Tensor:
    """Binary cross-entropy on queried halting logits.

    Labels: continue (0) before the teacher length, stop (1) at it. Roles
    with no length freedom contribute no positions.
    """
    terms: list[Tensor] = []
    for s in result.rollout.steps:
        if s.halt_logit is None:
            continue
        lo, hi = schedule.bounds[s.role]
        target_len = teacher_lengths[s.role]
        if not (lo <= target_len <= hi):
            raise ValueError(f"teacher length for {s.role} out of bounds")
        label = 1.0 if s.step == target_len else 0.0
        # BCE from logits: label 1 -> softplus(-x); label 0 -> softplus(x)
        terms.append((s.halt_logit * (-1.0 if label == 1.0 else 1.0)).softplus())
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def halting_accuracy(result: RolloutResult, teacher_lengths: dict[str, int]) -> tuple[int, int]:
    """(correct, queried) halting decisions against teacher labels."""
    correct = queried = 0
    for s in result.rollout.steps:
        if s.halt_logit is None:
            continue
        label = s.step == teacher_lengths[s.role]
        pred = float(s.halt_logit.data) > 0.0
        queried += 1
        correct += int(pred == label)
    return correct, queried


# -- the combined objective ---------------------------------------------------------


def warmup_schedule(schedule: RoleSchedule) -> RoleSchedule:
    return RoleSchedule(schedule.bounds, tuple(r for r in schedule.active if r in WARMUP_ROLES))


@dataclass
class SftStepOutput:
    loss: Tensor
    l_var: float
    l_anc: float
    l_halt: float
    l_img: float
    halt_correct: int
    halt_queried: int


def sft_objective(
    task: Task,
    params: Parameters,
    mc: ModelConfig,
    cfg: SftConfig,
    seed: int,
) -> SftStepOutput:
    """Weighted single-task objective for the configured phase."""
    schedule = mc.schedule if cfg.phase == "full_generation" else warmup_schedule(mc.schedule)
    lengths = {r: task.lengths[r] for r in schedule.active}
    _, draft_tokens = encode_scene(task.draft, mc.scene)
    perception = draft_tokens if cfg.phase == "correction_warmup" else None

    loss: Tensor = Tensor(0.0)
    l_var = l_anc = l_halt = l_img = 0.0
    halt_c = halt_q = 0
    for rep in range(cfg.n_eps):
        result = teacher_length_rollout(
            params, mc.stream, schedule, task.token_ids, lengths,
            seed=seed * 7919 + rep, perception=perception,
        )
        targets = build_targets(
            params, task.records, draft_tokens, task.draft.presence, lengths, schedule, mc.prior
        )
        term = Tensor(0.0)
        if cfg.lambda_var > 0:
            lv = variational_loss(result, targets)
            term = term + lv * cfg.lambda_var
            l_var += float(lv.data)
        if cfg.lambda_anc > 0:
            la = anchor_loss(result, targets, params, cfg.anchor_mode, task.records)
            term = term + la * cfg.lambda_anc
            l_anc += float(la.data)
        if cfg.lambda_halt > 0:
            lh = halting_loss(result, lengths, schedule)
            term = term + lh * cfg.lambda_halt
            l_halt += float(lh.data)
        c, q = halting_accuracy(result, lengths)
        halt_c += c
        halt_q += q
        if cfg.phase == "full_generation" and cfg.lambda_img > 0:
            x_data, _ = encode_scene(task.reference, mc.scene)
            li = fm_loss(params, mc.flow, x_data, result.H, n_t=1, seed=seed * 104729 + rep)
            term = term + li * cfg.lambda_img
            l_img += float(li.data)
        loss = loss + term
    k = cfg.n_eps
    return SftStepOutput(
        loss=loss * (1.0 / k),
        l_var=l_var / k,
        l_anc=l_anc / k,
        l_halt=l_halt / k,
        l_img=l_img / k,
        halt_correct=halt_c,
        halt_queried=halt_q,
    )


# -- training loop ----------------------------------------------------------------------


def batch_indices(n_tasks: int, batch_size: int, step: int, seed: int) -> list[int]:
    """Epoch-shuffled batch selection, stateless in (seed, step) so resumed
    runs see identical batches."""
    per_epoch = max(n_tasks // batch_size, 1)
    epoch, slot = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 0x5F, epoch]).permutation(n_tasks)
    lo = slot * batch_size
    return [int(i) for i in perm[lo : lo + batch_size]]


def train_sft(
    tasks: list[Task],
    params: Parameters,
    mc: ModelConfig,
    cfg: SftConfig,
    n_steps: int,
    seed: int,
    start_step: int = 0,
    optimizer: Adam | None = None,
    metrics_out=None,
    checkpoint_cb=None,
) -> Adam:
    """Run `n_steps - start_step` optimizer steps of the configured phase.

    Gradients accumulate over the batch in index order (reproducibility),
    are clipped by global norm, and every step appends one JSON metrics line.
    Aborts on a non-finite loss with the offending batch in the message.
    """
    opt = optimizer or Adam(params, lr=cfg.lr)
    for step in range(start_step, n_steps):
        t0 = time.time()
        idxs = batch_indices(len(tasks), cfg.batch_size, step, seed)
        params.zero_grad()
        agg = {"l_var": 0.0, "l_anc": 0.0, "l_halt": 0.0, "l_img": 0.0}
        halt_c = halt_q = 0
        total: Tensor | None = None
        for j, ti in enumerate(idxs):
            out = sft_objective(tasks[ti], params, mc, cfg, seed=seed * 31 + step * 1009 + j)
            if not np.isfinite(float(out.loss.data)):
                raise FloatingPointError(f"non-finite loss at step {step}, task {tasks[ti].task_id}")
            total = out.loss if total is None else total + out.loss
            agg["l_var"] += out.l_var
            agg["l_anc"] += out.l_anc
            agg["l_halt"] += out.l_halt
            agg["l_img"] += out.l_img
            halt_c += out.halt_correct
            halt_q += out.halt_queried
        loss = total * (1.0 / len(idxs))
        loss.backward()
        grad_norm = clip_global_norm(params, cfg.grad_clip)
        opt.step()
        if metrics_out is not None:
            rec = {
                "step": step,
                "phase": cfg.phase,
                "loss": float(loss.data),
                **{k: v / len(idxs) for k, v in agg.items()},
                "halt_acc": halt_c / halt_q if halt_q else 1.0,
                "grad_norm": grad_norm,
                "wall": time.time() - t0,
            }
            metrics_out.write(json.dumps(rec) + "\n")
        if checkpoint_cb is not None:
            checkpoint_cb(step + 1, opt)
    return opt
