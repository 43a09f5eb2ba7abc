"""Deterministic, bijective serialization between constraint prompts and
integer token sequences.

The grammar is fixed-arity per constraint type, so decoding needs no
lookahead: [BOS, CAT_*, (constraint tokens)*, EOS].
"""

from __future__ import annotations

from dataclasses import dataclass

from .scene import CATEGORIES, RELATIONS, ColorOf, Constraint, CountIs, Exists, PromptSpec, Relation, SceneConfig


@dataclass(frozen=True)
class Vocab:
    k_slots: int
    n_colors: int

    def _build(self) -> list[str]:
        toks = ["<bos>", "<eos>"]
        toks += [f"cat:{c}" for c in CATEGORIES]
        toks += ["op:exists", "op:count", "op:color_of", "op:relation"]
        toks += [f"ent:{i}" for i in range(self.k_slots)]
        toks += ["color:none"] + [f"color:{i}" for i in range(self.n_colors)]
        toks += [f"n:{i}" for i in range(1, self.k_slots + 1)]
        toks += [f"rel:{r}" for r in RELATIONS]
        return toks

    @property
    def tokens(self) -> list[str]:
        return self._build()

    @property
    def size(self) -> int:
        return len(self._build())

    def id_of(self, tok: str) -> int:
        return self._build().index(tok)

    def encode(self, spec: PromptSpec) -> list[int]:
        idx = {t: i for i, t in enumerate(self._build())}
        out = [idx["<bos>"], idx[f"cat:{spec.category}"]]
        for c in spec.constraints:
            if isinstance(c, Exists):
                out += [idx["op:exists"], idx[f"ent:{c.entity}"]]
                out.append(idx["color:none"] if c.color is None else idx[f"color:{c.color}"])
            elif isinstance(c, CountIs):
                out += [idx["op:count"], idx[f"n:{c.n}"]]
            elif isinstance(c, ColorOf):
                out += [idx["op:color_of"], idx[f"ent:{c.entity}"], idx[f"color:{c.color}"]]
            elif isinstance(c, Relation):
                out += [idx["op:relation"], idx[f"ent:{c.a}"], idx[f"ent:{c.b}"], idx[f"rel:{c.kind}"]]
            else:
                raise TypeError(f"unknown constraint {c!r}")
        out.append(idx["<eos>"])
        return out

    def decode(self, ids: list[int]) -> PromptSpec:
        toks = self._build()
        words = [toks[i] for i in ids]
        if words[0] != "<bos>" or words[-1] != "<eos>" or not words[1].startswith("cat:"):
            raise ValueError("malformed token sequence")
        category = words[1][4:]
        body = words[2:-1]
        constraints: list[Constraint] = []
        i = 0

        def ent(w: str) -> int:
            assert w.startswith("ent:")
            return int(w[4:])

        while i < len(body):
            op = body[i]
            if op == "op:exists":
                color = None if body[i + 2] == "color:none" else int(body[i + 2][6:])
                constraints.append(Exists(ent(body[i + 1]), color))
                i += 3
            elif op == "op:count":
                constraints.append(CountIs(int(body[i + 1][2:])))
                i += 2
            elif op == "op:color_of":
                constraints.append(ColorOf(ent(body[i + 1]), int(body[i + 2][6:])))
                i += 3
            elif op == "op:relation":
                constraints.append(Relation(ent(body[i + 1]), ent(body[i + 2]), body[i + 3][4:]))
                i += 4
            else:
                raise ValueError(f"unexpected token {op!r}")
        return PromptSpec(category, tuple(constraints))

    @property
    def max_prompt_len(self) -> int:
        # bos + cat + widest template (color_attr: 2 exists + 2 color_of) + eos
        return 2 + 2 * 3 + 2 * 3 + 1


def vocab_for(cfg: SceneConfig) -> Vocab:
    return Vocab(cfg.k_slots, cfg.n_colors)
