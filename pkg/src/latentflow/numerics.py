"""Closed-form Gaussian quantities, group standardization, clipped-ratio
surrogates, and the finite-difference gradient oracle.

Everything here is the differentiable scalar core the training losses are
assembled from, so each function accepts/returns `Tensor` where gradients
must flow and plain numpy where they must not (rewards, stored constants).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, check_finite, minimum, no_grad
from .params import Parameters

LOG_2PI = float(np.log(2.0 * np.pi))

# Groups whose reward spread falls below this are treated as degenerate and
# get all-zero advantages instead of a divide-by-near-zero blowup.
STD_FLOOR = 1e-6


@dataclass
class DiagGaussian:
    """Diagonal Gaussian with elementwise std (not variance)."""

    mean: Tensor
    std: Tensor

    def __post_init__(self):
        self.mean = Tensor.lift(self.mean)
        self.std = Tensor.lift(self.std)
        if self.mean.shape != self.std.shape:
            raise ValueError(f"mean/std shape mismatch: {self.mean.shape} vs {self.std.shape}")
        if np.any(self.std.data <= 0.0):
            raise ValueError("std must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.size

    @staticmethod
    def isotropic(mean: Tensor, std: float) -> "DiagGaussian":
        mean = Tensor.lift(mean)
        return DiagGaussian(mean, Tensor(np.full(mean.shape, std)))


def gaussian_logprob_normalized(z: Tensor, g: DiagGaussian) -> Tensor:
    """Per-dimension mean of the diagonal Gaussian log-density of `z` under `g`.

    (1/d) * sum_j [ -log std_j - log(2*pi)/2 - (z_j - mean_j)^2 / (2 std_j^2) ].
    Differentiable w.r.t. z, mean, and std.
    """
    z = Tensor.lift(z)
    if z.shape != g.mean.shape:
        raise ValueError(f"dimension mismatch: z {z.shape} vs gaussian {g.mean.shape}")
    d = z.size
    if d < 1:
        raise ValueError("empty vector")
    diff = z - g.mean
    quad = (diff * diff) / (g.std * g.std * 2.0)
    return (-g.std.log() - quad).sum() * (1.0 / d) - 0.5 * LOG_2PI


def gaussian_logprob(z: Tensor, g: DiagGaussian) -> Tensor:
    """Unnormalized (total) diagonal Gaussian log-density."""
    return gaussian_logprob_normalized(z, g) * float(Tensor.lift(z).size)


def gaussian_kl_diag(p: DiagGaussian, q: DiagGaussian) -> Tensor:
    """KL(p || q) for diagonal Gaussians, closed form, summed over dimensions.

    sum_j [ log(std_q/std_p) + (std_p^2 + (mu_p - mu_q)^2) / (2 std_q^2) - 1/2 ].
    Nonnegative; zero exactly when p == q.
    """
    if p.mean.shape != q.mean.shape:
        raise ValueError(f"dimension mismatch: {p.mean.shape} vs {q.mean.shape}")
    dmu = p.mean - q.mean
    var_q2 = q.std * q.std * 2.0
    terms = q.std.log() - p.std.log() + (p.std * p.std + dmu * dmu) / var_q2 - 0.5
    return terms.sum()


def standardize_group(rewards: np.ndarray) -> np.ndarray:
    """Center and scale rewards by the group's population statistics.

    Groups with population std below STD_FLOOR are degenerate (all members
    effectively tied) and map to all-zero advantages.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size < 2:
        raise ValueError("need a 1-D group of at least 2 rewards")
    std = float(rewards.std())
    if std < STD_FLOOR:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / std


def clamp_exp_ratio(lp_new: Tensor, lp_old: float, kappa: float) -> Tensor:
    """exp(clamp(lp_new - lp_old, -kappa, kappa)).

    `lp_old` is a stored behavior-policy constant, so gradient flows through
    `lp_new` only; the clamp bounds the output in [e^-kappa, e^kappa].
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    lp_new = Tensor.lift(lp_new)
    check_finite(lp_new, "lp_new")
    if not np.isfinite(lp_old):
        raise FloatingPointError("non-finite lp_old")
    return (lp_new - float(lp_old)).clamp(-kappa, kappa).exp()


def clipped_surrogate(rho: Tensor, adv: float, eps: float) -> Tensor:
    """min(rho*adv, clip(rho, 1-eps, 1+eps)*adv) — the clipped policy surrogate."""
    if not (0.0 < eps < 1.0):
        raise ValueError("eps must lie in (0, 1)")
    rho = Tensor.lift(rho)
    adv = float(adv)
    return minimum(rho * adv, rho.clamp(1.0 - eps, 1.0 + eps) * adv)


# -- finite-difference oracle ------------------------------------------------------


@dataclass
class FdEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class FdReport:
    tol: float
    max_rel_err: float
    worst: FdEntry | None
    entries: list[FdEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rel_err(a: float, f: float) -> float:
    # floor the denominator so near-zero gradients are judged absolutely,
    # at tol * 1e-6, instead of dividing FD noise by itself
    return abs(a - f) / max(abs(a), abs(f), 1e-6)


def finite_diff_check(
    loss_fn,
    params: Parameters | dict,
    tol: float = 1e-4,
    seed: int = 0,
    n_coords: int = 5,
    h: float = 1e-5,
) -> FdReport:
    """Compare analytic gradients of `loss_fn()` against central differences.

    `loss_fn` must be a deterministic closure over `params` (fix all noise
    draws outside it). For each parameter tensor, up to `n_coords` random
    coordinates are probed with step `h`. Double precision only.
    """
    items = list(params.items()) if isinstance(params, Parameters) else list(params.items())
    items = [(n, t) for n, t in items if t.requires_grad]
    rng = np.random.default_rng(seed)

    for _, t in items:
        t.grad = None
    loss = loss_fn()
    check_finite(loss, "loss")
    loss.backward()
    analytic = {n: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for n, t in items}

    entries: list[FdEntry] = []
    with no_grad():
        for name, t in items:
            flat = t.data.reshape(-1)
            k = min(n_coords, flat.size)
            coords = rng.choice(flat.size, size=k, replace=False)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                up = float(loss_fn().data)
                flat[c] = orig - h
                dn = float(loss_fn().data)
                flat[c] = orig
                if not (np.isfinite(up) and np.isfinite(dn)):
                    raise FloatingPointError(f"non-finite loss while probing {name}")
                fd = (up - dn) / (2.0 * h)
                an = float(analytic[name].reshape(-1)[c])
                idx = np.unravel_index(c, t.data.shape)
                entries.append(FdEntry(name, tuple(int(i) for i in idx), an, fd, _rel_err(an, fd)))

    max_err = max((e.rel_err for e in entries), default=0.0)
    worst = max(entries, key=lambda e: e.rel_err) if entries else None
    return FdReport(tol=tol, max_rel_err=max_err, worst=worst, entries=entries)
