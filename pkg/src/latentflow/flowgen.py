"""Conditional flow-matching generator over flat scene vectors.

Time runs from 0 (data) to 1 (noise); training regresses the velocity field
onto (noise - data) along the linear interpolation path, and generation
integrates Euler steps downward from t=1. Stochastic sampling replaces
chosen steps with Euler-Maruyama transitions whose Gaussian densities are
exactly computable, which is what the flow-side policy ratios require.
The velocity network reads the current state as per-slot tokens and attends
over the conditioning states H.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, affine, layer_norm, softmax
from .numerics import LOG_2PI
from .params import Parameters


@dataclass(frozen=True)
class FlowConfig:
    d_x: int = 36  # flat scene dimension
    n_tokens: int = 4  # state viewed as n_tokens rows of d_x/n_tokens dims
    d_cond: int = 64  # width of conditioning rows (backbone d_model)
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    n_time: int = 16  # sinusoidal time features (even)
    M: int = 20  # integration steps
    n_sde: int = 5  # default size of the stochastic-step subset
    sigma_sde: float = 0.2  # noise scale coefficient
    sigma_time_power: float = 1.0  # scale is sigma_sde * t^power; 0 gives a constant scale

    def __post_init__(self):
        if self.d_x % self.n_tokens != 0:
            raise ValueError("d_x must split evenly into tokens")
        if self.n_time % 2 != 0:
            raise ValueError("n_time must be even")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def token_dim(self) -> int:
        return self.d_x // self.n_tokens

    def noise_scale(self, t: float) -> float:
        return self.sigma_sde * t**self.sigma_time_power


def default_omega(M: int, n_sde: int) -> list[int]:
    """Evenly spaced stochastic steps within {1..M} (includes M, the first step)."""
    if n_sde == 0:
        return []
    return sorted({int(round(m)) for m in np.linspace(M / n_sde, M, n_sde)})


def init_flow_params(params: Parameters, cfg: FlowConfig, seed: int = 0, prefix: str = "flow") -> None:
    rng = np.random.default_rng([seed, 0xF1])
    d = cfg.d_model

    def w(shape, scale=0.02):
        return rng.standard_normal(shape) * scale

    params.add(f"{prefix}.token_in.w", w((d, cfg.token_dim), scale=0.2))
    params.add(f"{prefix}.token_in.b", np.zeros(d))
    params.add(f"{prefix}.time.w1", w((d, cfg.n_time), scale=0.2))
    params.add(f"{prefix}.time.b1", np.zeros(d))
    params.add(f"{prefix}.time.w2", w((d, d)))
    params.add(f"{prefix}.time.b2", np.zeros(d))
    for i in range(cfg.n_blocks):
        p = f"{prefix}.block{i}"
        params.add(f"{p}.ln_q.g", np.ones(d))
        params.add(f"{p}.ln_q.b", np.zeros(d))
        params.add(f"{p}.attn.wq", w((d, d)))
        params.add(f"{p}.attn.wk", w((d, cfg.d_cond)))
        params.add(f"{p}.attn.wv", w((d, cfg.d_cond)))
        params.add(f"{p}.attn.wo", w((d, d), scale=0.02 / np.sqrt(2 * cfg.n_blocks)))
        params.add(f"{p}.ln_m.g", np.ones(d))
        params.add(f"{p}.ln_m.b", np.zeros(d))
        params.add(f"{p}.mlp.w1", w((4 * d, d)))
        params.add(f"{p}.mlp.b1", np.zeros(4 * d))
        params.add(f"{p}.mlp.w2", w((d, 4 * d), scale=0.02 / np.sqrt(2 * cfg.n_blocks)))
        params.add(f"{p}.mlp.b2", np.zeros(d))
    params.add(f"{prefix}.out_ln.g", np.ones(d))
    params.add(f"{prefix}.out_ln.b", np.zeros(d))
    params.add(f"{prefix}.out.w", w((cfg.token_dim, d)))
    params.add(f"{prefix}.out.b", np.zeros(cfg.token_dim))


def _time_features(t: float, n: int) -> np.ndarray:
    freqs = 2.0 ** np.arange(n // 2)
    ang = 2.0 * np.pi * freqs * t
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return layer_norm(x) * g + b


def velocity(
    params: Parameters,
    cfg: FlowConfig,
    x: Tensor,
    t: float,
    H: Tensor,
    prefix: str = "flow",
) -> Tensor:
    """Velocity field v(x, t | H), shape (d_x,).

    Queries come from the state tokens, keys/values from the conditioning
    rows, so permuting or editing H changes the output.
    """
    p = params
    tok = Tensor.lift(x).reshape(cfg.n_tokens, cfg.token_dim)
    hidden = affine(tok, p[f"{prefix}.token_in.w"], p[f"{prefix}.token_in.b"])
    tfeat = affine(
        Tensor(_time_features(t, cfg.n_time)), p[f"{prefix}.time.w1"], p[f"{prefix}.time.b1"]
    ).gelu()
    tfeat = affine(tfeat, p[f"{prefix}.time.w2"], p[f"{prefix}.time.b2"])
    hidden = hidden + tfeat

    n_ctx = H.shape[0]
    dh = cfg.d_model // cfg.n_heads
    for i in range(cfg.n_blocks):
        pre = f"{prefix}.block{i}"
        q_in = _ln(hidden, p[f"{pre}.ln_q.g"], p[f"{pre}.ln_q.b"])
        q = (q_in @ p[f"{pre}.attn.wq"].transpose()).reshape(cfg.n_tokens, cfg.n_heads, dh).transpose(1, 0, 2)
        k = (H @ p[f"{pre}.attn.wk"].transpose()).reshape(n_ctx, cfg.n_heads, dh).transpose(1, 0, 2)
        v = (H @ p[f"{pre}.attn.wv"].transpose()).reshape(n_ctx, cfg.n_heads, dh).transpose(1, 0, 2)
        logits = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh))
        attn = softmax(logits, axis=-1)
        out = (attn @ v).transpose(1, 0, 2).reshape(cfg.n_tokens, cfg.d_model)
        hidden = hidden + out @ p[f"{pre}.attn.wo"].transpose()
        m_in = _ln(hidden, p[f"{pre}.ln_m.g"], p[f"{pre}.ln_m.b"])
        mid = affine(m_in, p[f"{pre}.mlp.w1"], p[f"{pre}.mlp.b1"]).gelu()
        hidden = hidden + affine(mid, p[f"{pre}.mlp.w2"], p[f"{pre}.mlp.b2"])

    out_in = _ln(hidden, p[f"{prefix}.out_ln.g"], p[f"{prefix}.out_ln.b"])
    return affine(out_in, p[f"{prefix}.out.w"], p[f"{prefix}.out.b"]).reshape(cfg.d_x)


# -- training loss -----------------------------------------------------------------


def interpolate(x_data: np.ndarray, x_noise: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Linear path point and its target velocity: x_t = (1-t) data + t noise."""
    if not (0.0 <= t <= 1.0):
        raise ValueError("t must lie in [0, 1]")
    x_data = np.asarray(x_data, dtype=np.float64)
    x_noise = np.asarray(x_noise, dtype=np.float64)
    if x_data.shape != x_noise.shape:
        raise ValueError("shape mismatch")
    return (1.0 - t) * x_data + t * x_noise, x_noise - x_data


def fm_loss(
    params: Parameters,
    cfg: FlowConfig,
    x_data: np.ndarray,
    H: Tensor,
    n_t: int = 1,
    seed: int = 0,
    prefix: str = "flow",
) -> Tensor:
    """Mean per-dimension squared velocity regression error over sampled (t, noise)."""
    rng = np.random.default_rng([seed, 0xF2])
    total: Tensor | None = None
    for _ in range(n_t):
        t = float(rng.uniform(0.0, 1.0))
        x_noise = rng.standard_normal(cfg.d_x)
        x_t, v_target = interpolate(x_data, x_noise, t)
        diff = velocity(params, cfg, Tensor(x_t), t, H, prefix) - Tensor(v_target)
        term = (diff * diff).sum() * (1.0 / cfg.d_x)
        total = term if total is None else total + term
    return total * (1.0 / n_t)


# -- samplers --------------------------------------------------------------------------


@dataclass
class SdeStepStat:
    m: int
    t: float
    x_m: np.ndarray
    mean: np.ndarray
    std: float
    eps: np.ndarray
    x_next: np.ndarray  # x_{m-1}
    logprob: float  # per-dimension normalized transition log-density


@dataclass
class FlowTrajectory:
    xs: np.ndarray  # (M+1, d_x); xs[m] = x_m, xs[0] is the final state
    omega: list[int]
    sde_steps: list[SdeStepStat] = field(default_factory=list)

    @property
    def x0(self) -> np.ndarray:
        return self.xs[0]


def _net_velocity_fn(params: Parameters, cfg: FlowConfig, H: Tensor, prefix: str):
    return lambda x, t: velocity(params, cfg, Tensor(x), t, H, prefix).data


def sample_ode(
    params: Parameters,
    cfg: FlowConfig,
    H: Tensor,
    x_init: np.ndarray,
    M: int | None = None,
    prefix: str = "flow",
    velocity_fn=None,
) -> np.ndarray:
    """Deterministic Euler integration from noise (t=1) down to data (t=0).

    `velocity_fn(x, t)` overrides the network field (closed-form oracles)."""
    M = cfg.M if M is None else M
    vfn = velocity_fn or _net_velocity_fn(params, cfg, H, prefix)
    dt = 1.0 / M
    x = np.asarray(x_init, dtype=np.float64).copy()
    for m in range(M, 0, -1):
        x = x - dt * vfn(x, m / M)
    return x


def sde_step(
    params: Parameters,
    cfg: FlowConfig,
    x_m: np.ndarray,
    m: int,
    M: int,
    H: Tensor,
    eps: np.ndarray,
    prefix: str = "flow",
    velocity_fn=None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """One Euler-Maruyama transition; returns (x_{m-1}, mean, std)."""
    vfn = velocity_fn or _net_velocity_fn(params, cfg, H, prefix)
    dt = 1.0 / M
    t = m / M
    mean = x_m - dt * vfn(x_m, t)
    std = cfg.noise_scale(t) * np.sqrt(dt)
    return mean + std * eps, mean, std


def _normal_logprob_per_dim(x: np.ndarray, mean: np.ndarray, std: float) -> float:
    d = x.size
    sq = float(((x - mean) ** 2).sum())
    return -np.log(std) - 0.5 * LOG_2PI - sq / (2.0 * std**2 * d)


def transition_logprob(
    params: Parameters,
    cfg: FlowConfig,
    x_next: np.ndarray,
    x_m: np.ndarray,
    m: int,
    M: int,
    H: Tensor,
    prefix: str = "flow",
) -> Tensor:
    """Per-dimension normalized Gaussian transition log-density, differentiable
    through the velocity network and the conditioning rows."""
    dt = 1.0 / M
    t = m / M
    std = cfg.noise_scale(t) * np.sqrt(dt)
    if std <= 0.0:
        raise ValueError("deterministic step has no transition density")
    v = velocity(params, cfg, Tensor(x_m), t, H, prefix)
    mean = Tensor(x_m) - v * dt
    diff = Tensor(np.asarray(x_next, dtype=np.float64)) - mean
    return (diff * diff).sum() * (-1.0 / (2.0 * std**2 * cfg.d_x)) - (np.log(std) + 0.5 * LOG_2PI)


def sample_sde(
    params: Parameters,
    cfg: FlowConfig,
    H: Tensor,
    x_init: np.ndarray,
    omega: list[int],
    seed: int = 0,
    M: int | None = None,
    prefix: str = "flow",
    velocity_fn=None,
) -> FlowTrajectory:
    """Generate with stochastic transitions on the steps in `omega` and
    deterministic Euler steps elsewhere; stores everything ratio computation
    needs. An empty `omega` reproduces sample_ode exactly."""
    M = cfg.M if M is None else M
    omega = sorted(set(omega))
    if omega and not (1 <= omega[0] and omega[-1] <= M):
        raise ValueError("omega must be a subset of {1..M}")
    vfn = velocity_fn or _net_velocity_fn(params, cfg, H, prefix)
    rng = np.random.default_rng([seed, 0x5DE])
    dt = 1.0 / M
    xs = np.zeros((M + 1, cfg.d_x))
    xs[M] = np.asarray(x_init, dtype=np.float64)
    stats: list[SdeStepStat] = []
    omega_set = set(omega)
    x = xs[M].copy()
    for m in range(M, 0, -1):
        t = m / M
        if m in omega_set:
            eps = rng.standard_normal(cfg.d_x)
            x_next, mean, std = sde_step(params, cfg, x, m, M, H, eps, prefix, velocity_fn=vfn)
            stats.append(
                SdeStepStat(
                    m=m,
                    t=t,
                    x_m=x.copy(),
                    mean=mean,
                    std=std,
                    eps=eps,
                    x_next=x_next.copy(),
                    logprob=_normal_logprob_per_dim(x_next, mean, std),
                )
            )
            x = x_next
        else:
            x = x - dt * vfn(x, t)
        xs[m - 1] = x
    return FlowTrajectory(xs=xs, omega=omega, sde_steps=stats)


def velocity_residual(
    params: Parameters,
    ref_params: Parameters,
    cfg: FlowConfig,
    x_m: np.ndarray,
    m: int,
    M: int,
    H: Tensor,
    H_ref: Tensor | None = None,
    prefix: str = "flow",
) -> Tensor:
    """Per-token, per-dimension mean squared deviation between actor and
    reference velocities at a visited state. With the state split into
    n_tokens rows, sum_u ||v_u - v_u_ref||^2 / (n_tokens * token_dim) equals
    the flat per-dimension mean."""
    from .engine import no_grad

    t = m / M
    v_act = velocity(params, cfg, Tensor(x_m), t, H, prefix)
    with no_grad():
        v_ref = velocity(ref_params, cfg, Tensor(x_m), t, H_ref if H_ref is not None else H.detach(), prefix)
    diff = v_act - Tensor(v_ref.data)
    return (diff * diff).sum() * (1.0 / cfg.d_x)
