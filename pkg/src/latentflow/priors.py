"""Training-only Gaussian prior over latent actions.

Semantic-role targets come from teacher records pushed through a frozen
hash embedding (two independent tables, md5-indexed, so distinct field
triples collide with negligible probability) and a trainable adapter.
The draft target comes from presence-gated pooling of the candidate
scene's perception rows, parameter-free layer normalization, a frozen
projection, and the draft rescale. Role and step identity embeddings are
added on top, and the collected means define an isotropic prior with
fixed std. The sentinel has no target.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .backbone import MAX_ROLE_STEPS, ROLE_INDEX, RoleSchedule
from .engine import Tensor, concat, layer_norm, stack
from .numerics import LOG_2PI
from .params import Parameters
from .scene import TeacherRecord

SEMANTIC_ROLES = ("plan", "diagnosis", "refine")

N_HASH_BUCKETS = 4096


@dataclass(frozen=True)
class PriorConfig:
    sigma_q: float = 0.1
    alpha_ld: float = 1.0
    d_prior: int = 64
    n_buckets: int = N_HASH_BUCKETS

    def __post_init__(self):
        if self.sigma_q <= 0:
            raise ValueError("sigma_q must be positive")
        if self.alpha_ld <= 0:
            raise ValueError("alpha_ld must be positive")


def init_prior_params(params: Parameters, cfg: PriorConfig, d_model: int, d_v: int, seed: int = 0) -> None:
    rng = np.random.default_rng([seed, 0xF0])
    scale = 1.0 / np.sqrt(cfg.d_prior)
    params.add("prior.hash_a", rng.standard_normal((cfg.n_buckets, cfg.d_prior)) * scale, trainable=False)
    params.add("prior.hash_b", rng.standard_normal((cfg.n_buckets, cfg.d_prior)) * scale, trainable=False)
    params.add("prior.draft_proj", rng.standard_normal((d_model, d_v)) / np.sqrt(d_v), trainable=False)
    if cfg.d_prior == d_model:
        a0 = np.eye(d_model)
    else:
        a0 = rng.standard_normal((d_model, cfg.d_prior)) / np.sqrt(cfg.d_prior)
    params.add("prior.adapter.w", a0)
    params.add("prior.adapter.b", np.zeros(d_model))
    params.add("prior.role_embed", rng.standard_normal((len(ROLE_INDEX), d_model)) * 0.02)
    params.add("prior.step_embed", rng.standard_normal((MAX_ROLE_STEPS, d_model)) * 0.02)


def _bucket_pair(tag: str, slot_ref: int, value: str, n_buckets: int) -> tuple[int, int]:
    digest = hashlib.md5(f"{tag}|{slot_ref}|{value}".encode()).digest()
    x = int.from_bytes(digest, "big")
    return x % n_buckets, (x >> 64) % n_buckets


def encode_record(params: Parameters, record: TeacherRecord, cfg: PriorConfig) -> Tensor:
    """Mean of frozen hash embeddings over the record's field triples."""
    if record.role not in SEMANTIC_ROLES:
        raise ValueError(f"no record encoding for role {record.role!r}")
    ha, hb = params["prior.hash_a"], params["prior.hash_b"]
    rows = []
    for tag, slot_ref, value in record.fields:
        i, j = _bucket_pair(tag, int(slot_ref), str(value), cfg.n_buckets)
        rows.append((ha[i] + hb[j]) * (1.0 / np.sqrt(2.0)))
    total = rows[0]
    for r in rows[1:]:
        total = total + r
    return total * (1.0 / len(rows))


def semantic_target(params: Parameters, record: TeacherRecord, cfg: PriorConfig) -> Tensor:
    """Adapter applied to the pooled record embedding; trainable via the adapter."""
    pooled = encode_record(params, record, cfg)
    return params["prior.adapter.w"] @ pooled + params["prior.adapter.b"]


def draft_target(
    params: Parameters,
    draft_tokens: np.ndarray,
    presence: np.ndarray,
    cfg: PriorConfig,
) -> Tensor:
    """Presence-gated pooled draft features, normalized, projected, rescaled.

    Falls back to pooling all rows when no slot is active (degenerate draft).
    Constant rows normalize to the zero vector, so a featureless draft
    yields a zero target.
    """
    active = np.flatnonzero(presence > 0.5)
    rows = draft_tokens[active] if active.size > 0 else draft_tokens
    pooled = Tensor(rows.mean(axis=0))
    normed = layer_norm(pooled)
    return (params["prior.draft_proj"] @ normed) * cfg.alpha_ld


def add_identity(params: Parameters, eta: Tensor, role: str, step: int) -> Tensor:
    """Base target plus role and step identity embeddings."""
    if not (1 <= step <= MAX_ROLE_STEPS):
        raise ValueError(f"step {step} out of range")
    return eta + params["prior.role_embed"][ROLE_INDEX[role]] + params["prior.step_embed"][step - 1]


@dataclass
class PriorTargets:
    E: Tensor  # (N, d) prior means, one per latent action, none for the sentinel
    roles: list[str]
    steps: list[int]  # 1-based within role
    lengths: dict[str, int]
    sigma_q: float

    @property
    def n(self) -> int:
        return len(self.roles)


def build_targets(
    params: Parameters,
    records: list[TeacherRecord],
    draft_tokens: np.ndarray,
    draft_presence: np.ndarray,
    lengths: dict[str, int],
    schedule: RoleSchedule,
    cfg: PriorConfig,
) -> PriorTargets:
    """Ordered prior means matching the role schedule's latent layout one-to-one."""
    by_role: dict[str, dict[int, TeacherRecord]] = {r: {} for r in SEMANTIC_ROLES}
    for rec in records:
        by_role[rec.role][rec.step_index] = rec

    rows: list[Tensor] = []
    roles: list[str] = []
    steps: list[int] = []
    for role in schedule.active:
        lo, hi = schedule.bounds[role]
        n = lengths[role]
        if not (lo <= n <= hi):
            raise ValueError(f"teacher length for {role} out of bounds: {n}")
        for k in range(1, n + 1):
            if role == "draft":
                eta = draft_target(params, draft_tokens, draft_presence, cfg)
            else:
                rec = by_role[role].get(k)
                if rec is None:
                    raise ValueError(f"missing {role} record for step {k}")
                eta = semantic_target(params, rec, cfg)
            rows.append(add_identity(params, eta, role, k))
            roles.append(role)
            steps.append(k)
    return PriorTargets(
        E=stack(rows, axis=0),
        roles=roles,
        steps=steps,
        lengths={r: lengths[r] for r in schedule.active},
        sigma_q=cfg.sigma_q,
    )


def prior_logdensity(Z: np.ndarray, targets: PriorTargets) -> float:
    """Total log-density of the action stack under the fixed-variance prior.

    Unnormalized (summed over steps and dimensions); the sentinel is not a
    latent action and contributes nothing.
    """
    Z = np.asarray(Z, dtype=np.float64)
    E = targets.E.data
    if Z.shape != E.shape:
        raise ValueError(f"action stack {Z.shape} does not match targets {E.shape}")
    sq = float(((Z - E) ** 2).sum())
    n, d = Z.shape
    return -n * d * (np.log(targets.sigma_q) + 0.5 * LOG_2PI) - sq / (2.0 * targets.sigma_q**2)
