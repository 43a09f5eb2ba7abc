"""The synthetic visual world: slot scenes, constraint prompts, programmatic
rewards, corrupted drafts, and structured teacher records.

A scene is K object slots, each carrying a presence value in [0,1], a point
on the C-color probability simplex, and a 2-D position in the unit square
(x rightward, y upward). Prompts are small typed constraint sets drawn from
six compositional categories. Constraint `entity` ids are handles that bind
several constraints to the same slot; satisfaction is evaluated under the
best injective assignment of entities to slots, which also makes the reward
invariant to slot permutation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

CATEGORIES = ("single_object", "two_object", "counting", "colors", "position", "color_attr")
RELATIONS = ("left_of", "right_of", "above", "below")
COLOR_NAMES = ("red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta")

NOOP_TRIPLE = ("no_op", -1, "ok")

# closed vocabulary of record field tags (the anchor probe classifies these)
FIELD_TAGS = (
    "require_present",
    "require_color",
    "require_count",
    "require_relation",
    "violated_present",
    "violated_color",
    "violated_count",
    "violated_relation",
    "set_presence",
    "set_color",
    "set_position",
    "no_op",
)

# Positions in teacher records are quantized to this grid so the record
# vocabulary stays small enough for the hash-collision audit.
POSITION_GRID = 0.25


@dataclass(frozen=True)
class SceneConfig:
    k_slots: int = 4
    n_colors: int = 6
    rel_margin: float = 0.05
    d_v: int = 16

    @property
    def slot_dim(self) -> int:
        return 1 + self.n_colors + 2

    @property
    def flat_dim(self) -> int:
        return self.k_slots * self.slot_dim

    def color_name(self, c: int) -> str:
        return COLOR_NAMES[c] if c < len(COLOR_NAMES) else f"color{c}"


# -- constraints -----------------------------------------------------------------


@dataclass(frozen=True)
class Exists:
    entity: int
    color: int | None = None


@dataclass(frozen=True)
class CountIs:
    n: int


@dataclass(frozen=True)
class ColorOf:
    entity: int
    color: int


@dataclass(frozen=True)
class Relation:
    a: int
    b: int
    kind: str


Constraint = Exists | CountIs | ColorOf | Relation


@dataclass(frozen=True)
class PromptSpec:
    category: str
    constraints: tuple[Constraint, ...]

    def entities(self) -> list[int]:
        ids: set[int] = set()
        for c in self.constraints:
            if isinstance(c, Exists):
                ids.add(c.entity)
            elif isinstance(c, ColorOf):
                ids.add(c.entity)
            elif isinstance(c, Relation):
                ids.update((c.a, c.b))
        return sorted(ids)


# -- scenes ---------------------------------------------------------------------


@dataclass
class Scene:
    presence: np.ndarray  # (K,)
    colors: np.ndarray  # (K, C) rows on the simplex
    positions: np.ndarray  # (K, 2) in [0,1]^2

    def validate(self, cfg: SceneConfig) -> None:
        k, c = cfg.k_slots, cfg.n_colors
        if self.presence.shape != (k,) or self.colors.shape != (k, c) or self.positions.shape != (k, 2):
            raise ValueError("scene arrays have wrong shapes")
        if np.any(self.presence < 0) or np.any(self.presence > 1):
            raise ValueError("presence out of [0,1]")
        if np.any(self.positions < 0) or np.any(self.positions > 1):
            raise ValueError("positions out of [0,1]")
        if np.any(self.colors < 0) or np.any(np.abs(self.colors.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("color rows must lie on the simplex")

    def copy(self) -> "Scene":
        return Scene(self.presence.copy(), self.colors.copy(), self.positions.copy())

    def present_mask(self) -> np.ndarray:
        return self.presence > 0.5

    def argmax_colors(self) -> np.ndarray:
        return self.colors.argmax(axis=1)


def empty_scene(cfg: SceneConfig) -> Scene:
    return Scene(
        presence=np.zeros(cfg.k_slots),
        colors=np.full((cfg.k_slots, cfg.n_colors), 1.0 / cfg.n_colors),
        positions=np.zeros((cfg.k_slots, 2)),
    )


# -- reward ----------------------------------------------------------------------


def _relation_holds(pa: np.ndarray, pb: np.ndarray, kind: str, margin: float) -> bool:
    if kind == "left_of":
        return pa[0] + margin < pb[0]
    if kind == "right_of":
        return pa[0] > pb[0] + margin
    if kind == "above":
        return pa[1] > pb[1] + margin
    if kind == "below":
        return pa[1] + margin < pb[1]
    raise ValueError(f"unknown relation {kind!r}")


def _satisfied(c: Constraint, scene: Scene, assign: dict[int, int], margin: float) -> bool:
    present = scene.present_mask()
    argmax = scene.argmax_colors()
    if isinstance(c, Exists):
        s = assign[c.entity]
        return bool(present[s] and (c.color is None or argmax[s] == c.color))
    if isinstance(c, CountIs):
        return int(present.sum()) == c.n
    if isinstance(c, ColorOf):
        s = assign[c.entity]
        return bool(present[s] and argmax[s] == c.color)
    if isinstance(c, Relation):
        sa, sb = assign[c.a], assign[c.b]
        return bool(
            present[sa] and present[sb] and _relation_holds(scene.positions[sa], scene.positions[sb], c.kind, margin)
        )
    raise TypeError(f"unknown constraint {c!r}")


def constraint_satisfaction(spec: PromptSpec, scene: Scene, cfg: SceneConfig) -> list[bool]:
    """Per-constraint satisfaction under the best injective entity-to-slot assignment."""
    entities = spec.entities()
    slots = range(cfg.k_slots)
    best: list[bool] = [False] * len(spec.constraints)
    best_count = -1
    assignments = itertools.permutations(slots, len(entities)) if entities else [()]
    for perm in assignments:
        assign = dict(zip(entities, perm))
        sat = [_satisfied(c, scene, assign, cfg.rel_margin) for c in spec.constraints]
        n = sum(sat)
        if n > best_count:
            best_count = n
            best = sat
            if n == len(sat):
                break
    return best


def reward(spec: PromptSpec, scene: Scene, cfg: SceneConfig) -> float:
    """Fraction of satisfied constraints, in [0, 1]."""
    if not spec.constraints:
        return 1.0
    sat = constraint_satisfaction(spec, scene, cfg)
    return float(sum(sat)) / len(sat)


# -- task sampling ----------------------------------------------------------------


def _task_rng(seed: int, category: str) -> np.random.Generator:
    return np.random.default_rng([seed, CATEGORIES.index(category), 0x7A5C])


def _one_hot(c: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[c] = 1.0
    return v


def _fill_absent(scene: Scene, slots, rng: np.random.Generator, cfg: SceneConfig) -> None:
    for s in slots:
        scene.presence[s] = 0.0
        scene.colors[s] = _one_hot(int(rng.integers(cfg.n_colors)), cfg.n_colors)
        scene.positions[s] = rng.uniform(0.05, 0.95, size=2)


def sample_task(seed: int, category: str, cfg: SceneConfig = SceneConfig()) -> tuple[PromptSpec, Scene]:
    """Draw a (spec, reference) pair; the reference satisfies the spec exactly."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    rng = _task_rng(seed, category)
    k, nc = cfg.k_slots, cfg.n_colors

    if category == "single_object":
        c = int(rng.integers(nc))
        constraints: tuple[Constraint, ...] = (Exists(0, c),)
    elif category == "two_object":
        c0, c1 = rng.choice(nc, size=2, replace=False)
        constraints = (Exists(0, int(c0)), Exists(1, int(c1)))
    elif category == "counting":
        n = int(rng.integers(1, k + 1))
        constraints = (CountIs(n),)
    elif category == "colors":
        c = int(rng.integers(nc))
        constraints = (Exists(0), ColorOf(0, c))
    elif category == "position":
        c0, c1 = rng.choice(nc, size=2, replace=False)
        kind = RELATIONS[int(rng.integers(len(RELATIONS)))]
        constraints = (Exists(0, int(c0)), Exists(1, int(c1)), Relation(0, 1, kind))
    else:  # color_attr
        c0, c1 = rng.choice(nc, size=2, replace=False)
        constraints = (Exists(0), Exists(1), ColorOf(0, int(c0)), ColorOf(1, int(c1)))

    spec = PromptSpec(category, constraints)
    scene = empty_scene(cfg)
    entities = spec.entities()
    slot_order = rng.permutation(k)
    assign = {e: int(slot_order[i]) for i, e in enumerate(entities)}

    if category == "counting":
        n = constraints[0].n  # type: ignore[union-attr]
        chosen = slot_order[:n]
        for s in chosen:
            scene.presence[s] = 1.0
            scene.colors[s] = _one_hot(int(rng.integers(nc)), nc)
            scene.positions[s] = rng.uniform(0.05, 0.95, size=2)
        _fill_absent(scene, slot_order[n:], rng, cfg)
        return spec, scene

    entity_color = {}
    for c in constraints:
        if isinstance(c, Exists) and c.color is not None:
            entity_color[c.entity] = c.color
        elif isinstance(c, ColorOf):
            entity_color[c.entity] = c.color
    for e in entities:
        s = assign[e]
        scene.presence[s] = 1.0
        col = entity_color.get(e, int(rng.integers(nc)))
        scene.colors[s] = _one_hot(col, nc)
        scene.positions[s] = rng.uniform(0.05, 0.95, size=2)

    for c in constraints:
        if isinstance(c, Relation):
            # construct coordinates directly so the margin holds with slack
            sa, sb = assign[c.a], assign[c.b]
            gap = cfg.rel_margin
            lo = float(rng.uniform(0.05, 0.9 - 2 * gap))
            hi = float(rng.uniform(lo + 2 * gap, 0.95))
            axis = 0 if c.kind in ("left_of", "right_of") else 1
            small_first = c.kind in ("left_of", "below")
            scene.positions[sa, axis] = lo if small_first else hi
            scene.positions[sb, axis] = hi if small_first else lo

    _fill_absent(scene, [s for s in range(k) if s not in assign.values()], rng, cfg)
    scene.validate(cfg)
    return spec, scene


# -- corruption --------------------------------------------------------------------


def _corruption_ops(scene: Scene, rng: np.random.Generator):
    """Candidate in-place corruption closures for the present slots of `scene`."""
    present = list(np.flatnonzero(scene.present_mask()))
    ops = []

    def drop(s):
        def apply(sc):
            sc.presence[s] = 0.0

        return apply

    def swap_colors(i, j):
        def apply(sc):
            sc.colors[[i, j]] = sc.colors[[j, i]]

        return apply

    def swap_positions(i, j):
        def apply(sc):
            sc.positions[[i, j]] = sc.positions[[j, i]]

        return apply

    def reflect(s):
        def apply(sc):
            sc.positions[s] = 1.0 - sc.positions[s]

        return apply

    for s in present:
        ops.append(("drop", drop(s)))
    others = [s for s in range(scene.presence.shape[0]) if s not in present]
    for i in present:
        for j in present:
            if i < j:
                ops.append(("swap_colors", swap_colors(i, j)))
                ops.append(("swap_positions", swap_positions(i, j)))
        for j in others:
            ops.append(("swap_colors", swap_colors(i, j)))
    for s in present:
        ops.append(("reflect", reflect(s)))
    order = rng.permutation(len(ops))
    return [ops[i] for i in order]


def corrupt(reference: Scene, spec: PromptSpec, seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Apply 1-2 structural corruptions so the result violates the spec.

    Deterministic in `seed`. Tries seeded combinations of slot drops, color
    swaps, and position displacements until the reward drops below 1; a
    present-slot drop is guaranteed to break every non-vacuous template, so
    the search always terminates.
    """
    rng = np.random.default_rng([seed, 0xC0F])
    ops = _corruption_ops(reference, rng)
    n_ops = 1 if rng.random() < 0.5 else 2

    combos = [ops[i : i + n_ops] for i in range(0, max(len(ops) - n_ops + 1, 1))]
    for combo in combos:
        cand = reference.copy()
        for _, apply in combo:
            apply(cand)
        if reward(spec, cand, cfg) < 1.0:
            return cand
    return reference.copy()  # vacuous spec: nothing to break


# -- flat encoding -----------------------------------------------------------------


@lru_cache(maxsize=8)
def _slot_feature_map(d_v: int, feat_dim: int) -> np.ndarray:
    """Frozen random linear map from raw slot features to perception rows."""
    rng = np.random.default_rng(0)
    return rng.standard_normal((d_v, feat_dim)) / np.sqrt(feat_dim)


def encode_scene(scene: Scene, cfg: SceneConfig = SceneConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Canonical flat vector plus per-slot perception rows.

    flat = [presence | color simplex | position] per slot, concatenated.
    tokens = slot features through the frozen seed-0 linear map, (K, d_v).
    """
    feats = np.concatenate(
        [scene.presence[:, None], scene.colors, scene.positions], axis=1
    )  # (K, 1+C+2)
    flat = feats.reshape(-1)
    tokens = feats @ _slot_feature_map(cfg.d_v, cfg.slot_dim).T
    return flat, tokens


def _project_simplex(w: np.ndarray) -> np.ndarray:
    """Shift to nonnegative and renormalize; uniform when everything vanishes.

    Identity on valid simplex points, total on all real vectors.
    """
    shifted = w - min(float(w.min()), 0.0)
    s = float(shifted.sum())
    if s < 1e-9:
        return np.full(w.shape, 1.0 / w.size)
    return shifted / s


def decode_scene(flat: np.ndarray, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Total decoder: any real vector of the right length becomes a valid scene."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (cfg.flat_dim,):
        raise ValueError(f"expected flat vector of length {cfg.flat_dim}, got {flat.shape}")
    feats = flat.reshape(cfg.k_slots, cfg.slot_dim)
    presence = np.clip(feats[:, 0], 0.0, 1.0)
    colors = np.stack([_project_simplex(row) for row in feats[:, 1 : 1 + cfg.n_colors]])
    positions = np.clip(feats[:, 1 + cfg.n_colors :], 0.0, 1.0)
    return Scene(presence, colors, positions)


# -- teacher records ------------------------------------------------------------------


@dataclass(frozen=True)
class TeacherRecord:
    role: str  # plan | diagnosis | refine (draft carries no record)
    step_index: int  # 1-based within the role
    fields: tuple[tuple[str, int, str], ...]  # (field_tag, slot_ref, attribute_value)


def _constraint_triples(c: Constraint, cfg: SceneConfig, prefix: str = "require") -> tuple:
    if isinstance(c, Exists):
        triples = [(f"{prefix}_present", c.entity, "any")]
        if c.color is not None:
            triples.append((f"{prefix}_color", c.entity, cfg.color_name(c.color)))
        return tuple(triples)
    if isinstance(c, CountIs):
        return ((f"{prefix}_count", -1, str(c.n)),)
    if isinstance(c, ColorOf):
        return ((f"{prefix}_color", c.entity, cfg.color_name(c.color)),)
    if isinstance(c, Relation):
        return ((f"{prefix}_relation", c.a, f"{c.kind}:{c.b}"),)
    raise TypeError(f"unknown constraint {c!r}")


def _quantize(x: float) -> str:
    return f"{round(x / POSITION_GRID) * POSITION_GRID:.2f}"


def _pad_clip(records: list[TeacherRecord], role: str, lo: int, hi: int) -> list[TeacherRecord]:
    out = records[:hi]
    while len(out) < lo:
        out.append(TeacherRecord(role, len(out) + 1, (NOOP_TRIPLE,)))
    return [TeacherRecord(role, i + 1, r.fields) for i, r in enumerate(out)]


def make_teacher_records(
    spec: PromptSpec,
    reference: Scene,
    draft: Scene,
    bounds: dict[str, tuple[int, int]],
    cfg: SceneConfig = SceneConfig(),
) -> tuple[list[TeacherRecord], dict[str, int]]:
    """Structured supervision per semantic role, plus per-role length labels.

    plan enumerates the constraints; diagnosis enumerates the constraints the
    draft violates (an explicit no-op when it violates none); refine lists
    the slot edits that map the draft toward the reference. Lengths are
    clipped into the per-role bounds; the draft role is grounded in scene
    features and carries no record.
    """
    plan = [
        TeacherRecord("plan", i + 1, _constraint_triples(c, cfg))
        for i, c in enumerate(spec.constraints)
    ]

    sat = constraint_satisfaction(spec, draft, cfg)
    diagnosis = [
        TeacherRecord("diagnosis", 0, _constraint_triples(c, cfg, prefix="violated"))
        for c, ok in zip(spec.constraints, sat)
        if not ok
    ]
    if not diagnosis:
        diagnosis = [TeacherRecord("diagnosis", 1, (NOOP_TRIPLE,))]

    edits: list[tuple[str, int, str]] = []
    for s in range(cfg.k_slots):
        dp, rp = draft.presence[s] > 0.5, reference.presence[s] > 0.5
        if dp != rp:
            edits.append(("set_presence", s, "1" if rp else "0"))
    for s in range(cfg.k_slots):
        if reference.presence[s] > 0.5 and draft.colors[s].argmax() != reference.colors[s].argmax():
            edits.append(("set_color", s, cfg.color_name(int(reference.colors[s].argmax()))))
    for s in range(cfg.k_slots):
        if reference.presence[s] > 0.5 and np.abs(draft.positions[s] - reference.positions[s]).max() > 0.02:
            qx, qy = _quantize(reference.positions[s][0]), _quantize(reference.positions[s][1])
            edits.append(("set_position", s, f"{qx},{qy}"))
    refine = [TeacherRecord("refine", 0, (t,)) for t in edits]
    if not refine:
        refine = [TeacherRecord("refine", 1, (NOOP_TRIPLE,))]

    plan = _pad_clip(plan, "plan", *bounds["plan"])
    diagnosis = _pad_clip(diagnosis, "diagnosis", *bounds["diagnosis"])
    refine = _pad_clip(refine, "refine", *bounds["refine"])

    lengths = {"plan": len(plan), "draft": 1, "diagnosis": len(diagnosis), "refine": len(refine)}
    return plan + diagnosis + refine, lengths
