"""Task dataset construction and the versioned line-delimited file format.

Line 1 is a JSON header carrying the format name, schema version, and the
generation parameters; every following line is one task: prompt spec,
reference scene, corrupted draft, teacher records, and role lengths.
Serialization is canonical (sorted keys, repr-exact floats) so regenerating
with the same seed yields a byte-identical file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .scene import (
    CATEGORIES,
    ColorOf,
    Constraint,
    CountIs,
    Exists,
    PromptSpec,
    Relation,
    Scene,
    SceneConfig,
    TeacherRecord,
    corrupt,
    make_teacher_records,
    sample_task,
)
from .vocab import vocab_for

FORMAT_NAME = "latentflow-tasks"
FORMAT_VERSION = 1


@dataclass
class Task:
    task_id: int
    spec: PromptSpec
    token_ids: list[int]
    reference: Scene
    draft: Scene
    records: list[TeacherRecord]
    lengths: dict[str, int]


def _constraint_to_dict(c: Constraint) -> dict:
    if isinstance(c, Exists):
        return {"type": "exists", "entity": c.entity, "color": c.color}
    if isinstance(c, CountIs):
        return {"type": "count", "n": c.n}
    if isinstance(c, ColorOf):
        return {"type": "color_of", "entity": c.entity, "color": c.color}
    if isinstance(c, Relation):
        return {"type": "relation", "a": c.a, "b": c.b, "kind": c.kind}
    raise TypeError(f"unknown constraint {c!r}")


def _constraint_from_dict(d: dict) -> Constraint:
    t = d["type"]
    if t == "exists":
        return Exists(d["entity"], d["color"])
    if t == "count":
        return CountIs(d["n"])
    if t == "color_of":
        return ColorOf(d["entity"], d["color"])
    if t == "relation":
        return Relation(d["a"], d["b"], d["kind"])
    raise ValueError(f"unknown constraint type {t!r}")


def _scene_to_dict(s: Scene) -> dict:
    return {
        "presence": s.presence.tolist(),
        "colors": s.colors.tolist(),
        "positions": s.positions.tolist(),
    }


def _scene_from_dict(d: dict) -> Scene:
    return Scene(
        np.asarray(d["presence"], dtype=np.float64),
        np.asarray(d["colors"], dtype=np.float64),
        np.asarray(d["positions"], dtype=np.float64),
    )


def task_to_dict(task: Task) -> dict:
    return {
        "id": task.task_id,
        "category": task.spec.category,
        "constraints": [_constraint_to_dict(c) for c in task.spec.constraints],
        "token_ids": task.token_ids,
        "reference": _scene_to_dict(task.reference),
        "draft": _scene_to_dict(task.draft),
        "records": [
            {"role": r.role, "step": r.step_index, "fields": [list(f) for f in r.fields]}
            for r in task.records
        ],
        "lengths": task.lengths,
    }


def task_from_dict(d: dict) -> Task:
    spec = PromptSpec(d["category"], tuple(_constraint_from_dict(c) for c in d["constraints"]))
    records = [
        TeacherRecord(r["role"], r["step"], tuple(tuple(f) for f in r["fields"]))
        for r in d["records"]
    ]
    return Task(
        task_id=d["id"],
        spec=spec,
        token_ids=list(d["token_ids"]),
        reference=_scene_from_dict(d["reference"]),
        draft=_scene_from_dict(d["draft"]),
        records=records,
        lengths=dict(d["lengths"]),
    )


def build_task(task_id: int, seed: int, category: str, bounds: dict, cfg: SceneConfig) -> Task:
    spec, reference = sample_task(seed, category, cfg)
    draft = corrupt(reference, spec, seed, cfg)
    records, lengths = make_teacher_records(spec, reference, draft, bounds, cfg)
    return Task(
        task_id=task_id,
        spec=spec,
        token_ids=vocab_for(cfg).encode(spec),
        reference=reference,
        draft=draft,
        records=records,
        lengths=lengths,
    )


def generate_tasks(n_tasks: int, seed: int, bounds: dict, cfg: SceneConfig) -> list[Task]:
    """Category-balanced task list, deterministic in `seed`."""
    tasks = []
    for i in range(n_tasks):
        category = CATEGORIES[i % len(CATEGORIES)]
        tasks.append(build_task(i, seed * 1_000_003 + i, category, bounds, cfg))
    return tasks


def write_task_file(path: str, tasks: list[Task], seed: int, cfg: SceneConfig) -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "k_slots": cfg.k_slots,
        "n_colors": cfg.n_colors,
        "rel_margin": cfg.rel_margin,
        "d_v": cfg.d_v,
        "seed": seed,
        "n_tasks": len(tasks),
    }
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for t in tasks:
            f.write(json.dumps(task_to_dict(t), sort_keys=True) + "\n")


def read_task_file(path: str) -> tuple[dict, list[Task]]:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"not a {FORMAT_NAME} file: {path}")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported task file version {header.get('version')}")
        tasks = [task_from_dict(json.loads(line)) for line in f if line.strip()]
    return header, tasks
