"""Named parameter store, Adam optimizer, and gradient clipping."""

from __future__ import annotations

import hashlib

import numpy as np

from .engine import DTYPE, Tensor


class Parameters:
    """Ordered mapping of names to parameter tensors.

    Frozen entries (requires_grad=False) travel in checkpoints and hash
    digests like any other tensor but never accumulate gradients and are
    invisible to the optimizer.
    """

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._store:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(array, dtype=DTYPE), requires_grad=trainable)
        self._store[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def names(self) -> list[str]:
        return list(self._store)

    def items(self):
        return self._store.items()

    def trainable(self, exclude_prefixes: tuple[str, ...] = ()) -> list[tuple[str, Tensor]]:
        return [
            (n, t)
            for n, t in self._store.items()
            if t.requires_grad and not any(n.startswith(p) for p in exclude_prefixes)
        ]

    def n_values(self) -> int:
        return sum(t.data.size for t in self._store.values())

    def zero_grad(self) -> None:
        for t in self._store.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._store.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._store) - set(state)
        extra = set(state) - set(self._store)
        if missing or extra:
            raise KeyError(f"parameter set mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for n, t in self._store.items():
            arr = np.asarray(state[n], dtype=DTYPE)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {n!r}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()

    def clone(self) -> "Parameters":
        other = Parameters()
        for n, t in self._store.items():
            other.add(n, t.data.copy(), trainable=t.requires_grad)
        return other

    def digest(self, names: list[str] | None = None) -> str:
        """SHA-256 over the raw bytes of the selected tensors (all by default)."""
        h = hashlib.sha256()
        for n in sorted(names if names is not None else self._store):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._store[n].data).tobytes())
        return h.hexdigest()


def global_grad_norm(params: Parameters, exclude_prefixes: tuple[str, ...] = ()) -> float:
    total = 0.0
    for _, t in params.trainable(exclude_prefixes):
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return float(np.sqrt(total))


def clip_global_norm(params: Parameters, max_norm: float, exclude_prefixes: tuple[str, ...] = ()) -> float:
    """Scale all gradients so their global norm is at most `max_norm`; returns the pre-clip norm."""
    norm = global_grad_norm(params, exclude_prefixes)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, t in params.trainable(exclude_prefixes):
            if t.grad is not None:
                t.grad *= scale
    return norm


class Adam:
    """Standard Adam with bias correction over a Parameters store.

    `exclude_prefixes` removes parameter groups from optimization entirely
    (used to keep the halting head fixed during RL). Moment state is exposed
    for checkpointing so resumed runs reproduce uninterrupted ones exactly.
    """

    def __init__(
        self,
        params: Parameters,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        exclude_prefixes: tuple[str, ...] = (),
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.exclude_prefixes = tuple(exclude_prefixes)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for n, p in params.trainable(self.exclude_prefixes):
            self.m[n] = np.zeros(p.data.shape, dtype=DTYPE)
            self.v[n] = np.zeros(p.data.shape, dtype=DTYPE)

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for n, p in self.params.trainable(self.exclude_prefixes):
            g = p.grad
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {n: a.copy() for n, a in self.m.items()},
            "v": {n: a.copy() for n, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for n in self.m:
            self.m[n] = np.asarray(state["m"][n], dtype=DTYPE).copy()
            self.v[n] = np.asarray(state["v"][n], dtype=DTYPE).copy()
