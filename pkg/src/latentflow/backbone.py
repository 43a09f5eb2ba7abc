"""Causal hidden-stream transformer.

The stream is an append-only sequence of positions: prompt tokens, optional
perception rows, injected latent action vectors, and a terminal sentinel.
Each append runs the new position(s) through pre-LN causal self-attention
against cached keys/values, so earlier states are never recomputed (exact
causality by construction) while gradients still flow back through the
cache into everything injected earlier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, affine, concat, embedding, layer_norm, softmax, stack
from .params import Parameters

ROLES = ("plan", "draft", "diagnosis", "refine")
ROLE_INDEX = {r: i for i, r in enumerate(ROLES)}

# Step identity embeddings are shared across roles; this caps per-role length.
MAX_ROLE_STEPS = 16

NEG_INF = -1e30


@dataclass(frozen=True)
class StreamConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 31
    max_positions: int = 48

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class RoleSchedule:
    """Ordered role structure with per-role length bounds.

    `active` lists the roles actually rolled out (ablations and the
    correction warm-up phase mask roles out); draft, when active, is always
    a single step.
    """

    bounds: dict[str, tuple[int, int]] = field(
        default_factory=lambda: {"plan": (1, 4), "draft": (1, 1), "diagnosis": (1, 3), "refine": (1, 3)}
    )
    active: tuple[str, ...] = ROLES

    def __post_init__(self):
        for role in self.active:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
            lo, hi = self.bounds[role]
            if not (1 <= lo <= hi):
                raise ValueError(f"bad bounds for {role}: ({lo}, {hi})")
            if hi > MAX_ROLE_STEPS:
                raise ValueError(f"{role} L_max exceeds MAX_ROLE_STEPS")
        if "draft" in self.active and self.bounds["draft"] != (1, 1):
            raise ValueError("draft role is single-step")
        order = [r for r in ROLES if r in self.active]
        if list(self.active) != order:
            raise ValueError("active roles must keep the canonical order")

    def l_min(self, role: str) -> int:
        return self.bounds[role][0]

    def l_max(self, role: str) -> int:
        return self.bounds[role][1]

    @property
    def max_total(self) -> int:
        return sum(self.bounds[r][1] for r in self.active)

    @property
    def min_total(self) -> int:
        return sum(self.bounds[r][0] for r in self.active)

    def without(self, role: str) -> "RoleSchedule":
        return RoleSchedule(self.bounds, tuple(r for r in self.active if r != role))

    @staticmethod
    def fixed(lengths: dict[str, int]) -> "RoleSchedule":
        return RoleSchedule(
            bounds={r: (lengths[r], lengths[r]) for r in ROLES if r in lengths},
            active=tuple(r for r in ROLES if r in lengths),
        )


@dataclass
class TokenLayout:
    prompt_span: tuple[int, int] = (0, 0)  # [start, end)
    percept_span: tuple[int, int] | None = None
    latent_spans: list[tuple[str, int, int]] = field(default_factory=list)  # (role, start, end)
    sentinel_index: int | None = None

    def latent_positions(self) -> list[int]:
        return [p for _, start, end in self.latent_spans for p in range(start, end)]

    def role_at(self, pos: int) -> str | None:
        for role, start, end in self.latent_spans:
            if start <= pos < end:
                return role
        return None


def init_backbone_params(params: Parameters, cfg: StreamConfig, d_v: int, seed: int = 0) -> None:
    rng = np.random.default_rng([seed, 0xB0])
    d, h = cfg.d_model, 4 * cfg.d_model

    def w(shape, scale=0.02):
        return rng.standard_normal(shape) * scale

    params.add("backbone.tok_embed", w((cfg.vocab_size, d)))
    params.add("backbone.pos_embed", w((cfg.max_positions, d)))
    for i in range(cfg.n_layers):
        p = f"backbone.layer{i}"
        params.add(f"{p}.ln1.g", np.ones(d))
        params.add(f"{p}.ln1.b", np.zeros(d))
        params.add(f"{p}.attn.wq", w((d, d)))
        params.add(f"{p}.attn.wk", w((d, d)))
        params.add(f"{p}.attn.wv", w((d, d)))
        params.add(f"{p}.attn.wo", w((d, d), scale=0.02 / np.sqrt(2 * cfg.n_layers)))
        params.add(f"{p}.ln2.g", np.ones(d))
        params.add(f"{p}.ln2.b", np.zeros(d))
        params.add(f"{p}.mlp.w1", w((h, d)))
        params.add(f"{p}.mlp.b1", np.zeros(h))
        params.add(f"{p}.mlp.w2", w((d, h), scale=0.02 / np.sqrt(2 * cfg.n_layers)))
        params.add(f"{p}.mlp.b2", np.zeros(d))
    params.add("backbone.final_ln.g", np.ones(d))
    params.add("backbone.final_ln.b", np.zeros(d))
    params.add("backbone.latent_in.w", w((d, d)))
    params.add("backbone.latent_in.b", np.zeros(d))
    params.add("backbone.role_in", w((len(ROLES), d)))
    params.add("backbone.step_in", w((MAX_ROLE_STEPS, d)))
    params.add("backbone.sentinel", w((d,)))
    params.add("backbone.percept.w", w((d, d_v)))
    params.add("backbone.percept.b", np.zeros(d))


def _ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return layer_norm(x) * g + b


class HiddenStream:
    """One autoregressive pass over the hidden stream with per-layer KV caches."""

    def __init__(self, params: Parameters, cfg: StreamConfig):
        self.params = params
        self.cfg = cfg
        self.pos = 0
        self._keys: list[list[Tensor]] = [[] for _ in range(cfg.n_layers)]
        self._values: list[list[Tensor]] = [[] for _ in range(cfg.n_layers)]
        self.top: list[Tensor] = []  # final-LN top-layer state per position, each (d,)
        self.layout = TokenLayout()

    # -- core forward ------------------------------------------------------------

    def _attend(self, layer: int, x: Tensor) -> Tensor:
        """Causal multi-head attention of an m-row block against cache + itself."""
        p = self.params
        cfg = self.cfg
        m = x.shape[0]
        pre = f"backbone.layer{layer}"
        hn = _ln(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])

        def heads(t: Tensor) -> Tensor:  # (m, d) -> (H, m, dh)
            return t.reshape(m, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)

        q = heads(hn @ p[f"{pre}.attn.wq"].transpose())
        k_new = heads(hn @ p[f"{pre}.attn.wk"].transpose())
        v_new = heads(hn @ p[f"{pre}.attn.wv"].transpose())
        self._keys[layer].append(k_new)
        self._values[layer].append(v_new)
        k_all = concat(self._keys[layer], axis=1)  # (H, n+m, dh)
        v_all = concat(self._values[layer], axis=1)
        n_total = k_all.shape[1]
        logits = (q @ k_all.transpose(0, 2, 1)) * (1.0 / np.sqrt(cfg.head_dim))
        if m > 1:
            # block-local causal mask: row i sees cache plus block rows <= i
            mask = np.zeros((m, n_total))
            base = n_total - m
            for i in range(m):
                mask[i, base + i + 1 :] = NEG_INF
            logits = logits + mask
        attn = softmax(logits, axis=-1)
        out = (attn @ v_all).transpose(1, 0, 2).reshape(m, cfg.d_model)
        return out @ p[f"{pre}.attn.wo"].transpose()

    def _forward_block(self, x: Tensor) -> Tensor:
        """Run an (m, d) block of new positions through all layers; returns top states."""
        p = self.params
        for layer in range(self.cfg.n_layers):
            x = x + self._attend(layer, x)
            pre = f"backbone.layer{layer}"
            hn = _ln(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            hidden = affine(hn, p[f"{pre}.mlp.w1"], p[f"{pre}.mlp.b1"]).gelu()
            x = x + affine(hidden, p[f"{pre}.mlp.w2"], p[f"{pre}.mlp.b2"])
        top = _ln(x, p["backbone.final_ln.g"], p["backbone.final_ln.b"])
        m = top.shape[0]
        for i in range(m):
            self.top.append(top[i])
        self.pos += m
        return top

    def _pos_rows(self, m: int) -> Tensor:
        if self.pos + m > self.cfg.max_positions:
            raise ValueError(f"stream overflow: {self.pos + m} > max_positions={self.cfg.max_positions}")
        return embedding(self.params["backbone.pos_embed"], np.arange(self.pos, self.pos + m))

    # -- append operations ---------------------------------------------------------

    def append_tokens(self, token_ids: list[int]) -> None:
        start = self.pos
        x = embedding(self.params["backbone.tok_embed"], token_ids) + self._pos_rows(len(token_ids))
        self._forward_block(x)
        self.layout.prompt_span = (start, self.pos)

    def append_perception(self, rows: np.ndarray) -> None:
        """Inject candidate-scene feature rows through the perception projection."""
        start = self.pos
        p = self.params
        x = affine(Tensor(rows), p["backbone.percept.w"], p["backbone.percept.b"]) + self._pos_rows(rows.shape[0])
        self._forward_block(x)
        self.layout.percept_span = (start, self.pos)

    def append_latent(self, z: Tensor, role: str, step: int) -> Tensor:
        """Write one latent action into the stream; returns its top-layer state."""
        p = self.params
        inj = (
            affine(z, p["backbone.latent_in.w"], p["backbone.latent_in.b"])
            + p["backbone.role_in"][ROLE_INDEX[role]]
            + p["backbone.step_in"][step - 1]
        )
        x = (inj + self._pos_rows(1).reshape(-1)).reshape(1, -1)
        start = self.pos
        top = self._forward_block(x)
        spans = self.layout.latent_spans
        if spans and spans[-1][0] == role and spans[-1][2] == start:
            spans[-1] = (role, spans[-1][1], self.pos)
        else:
            spans.append((role, start, self.pos))
        return top[0]

    def append_sentinel(self) -> Tensor:
        x = (self.params["backbone.sentinel"] + self._pos_rows(1).reshape(-1)).reshape(1, -1)
        self.layout.sentinel_index = self.pos
        return self._forward_block(x)[0]

    # -- views ------------------------------------------------------------------------

    def state_at(self, n: int) -> Tensor:
        """Top-layer state at position n (must already be materialized)."""
        if not (0 <= n < self.pos):
            raise IndexError(f"position {n} not materialized (stream length {self.pos})")
        return self.top[n]

    def last_state(self) -> Tensor:
        return self.state_at(self.pos - 1)

    def conditioning_states(self) -> Tensor:
        """H: top states at all latent positions plus the sentinel, in order.

        This matrix is the only interface the flow generator sees.
        """
        if self.layout.sentinel_index is None:
            raise ValueError("rollout not terminated: no sentinel present")
        rows = [self.top[i] for i in self.layout.latent_positions()]
        rows.append(self.top[self.layout.sentinel_index])
        return stack(rows, axis=0)
