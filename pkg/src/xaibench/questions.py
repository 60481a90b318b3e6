"""Template-driven question generation for generated scenes.

Simple questions query one attribute of a single object identified by filters.
Complex questions are drawn from a small template library weighted by family.
Every emitted program evaluates without ``IllPosed``.
"""
from __future__ import annotations

import itertools
import random
from typing import Callable, Sequence

from .program import (
    EmptyQuery,
    FunctionalProgram,
    IllPosed,
    evaluate,
    parse_program,
)
from .scene import ATTRIBUTES, RELATIONS, SceneGraph

QUERY_ATTRS = ("shape", "color", "size", "material")
FILTER_ORDER = ("size", "color", "material", "shape")

# approximate family mix of CLEVR-style complex question sets
FAMILY_WEIGHTS = {
    "query": 0.36,
    "compare_attribute": 0.18,
    "compare_integer": 0.09,
    "count": 0.24,
    "exist": 0.13,
}


class GenerationExhausted(RuntimeError):
    pass


class _Builder:
    def __init__(self, scene: SceneGraph, rng: random.Random):
        self.scene = scene
        self.rng = rng
        self.nodes: list[dict] = []

    def add(self, function: str, inputs=(), literals=()) -> int:
        self.nodes.append({"function": function, "inputs": list(inputs), "value_inputs": list(literals)})
        return len(self.nodes) - 1

    def scene_node(self) -> int:
        return self.add("scene")

    def filters(self, src: int, literals: dict[str, str]) -> int:
        for attr in FILTER_ORDER:
            if attr in literals:
                src = self.add(f"filter_{attr}", [src], [literals[attr]])
        return src

    # object sets are tracked alongside the nodes so literals can be chosen
    # against the set a filter chain will actually see
    def value(self, k: int):
        return _partial_eval(self.nodes[: k + 1], self.scene)[k]

    def unique_of(self, src: int, avoid: tuple[str, ...] = ()) -> int | None:
        """Filter ``src`` down to one randomly chosen object and apply ``unique``."""
        candidates = sorted(self.value(src))
        if not candidates:
            return None
        self.rng.shuffle(candidates)
        allowed = [a for a in FILTER_ORDER if a not in avoid]
        objs = self.scene.objects
        for target in candidates:
            lits = _identifying_filters(objs, candidates, target, allowed, self.rng)
            if lits is not None:
                return self.add("unique", [self.filters(src, lits)])
        return None

    def loose_filters(self, src: int, max_filters: int = 2, hit_rate: float = 0.7) -> int:
        """Random filters; with probability ``hit_rate`` they match an existing object."""
        n = self.rng.randint(0, max_filters)
        attrs = self.rng.sample(FILTER_ORDER, n)
        pool = sorted(self.value(src))
        lits = {}
        if pool and self.rng.random() < hit_rate:
            obj = self.scene.objects[self.rng.choice(pool)]
            lits = {a: obj.attribute_name(a) for a in attrs}
        else:
            lits = {a: self.rng.choice(ATTRIBUTES[a]) for a in attrs}
        return self.filters(src, lits)


def _partial_eval(nodes: list[dict], scene: SceneGraph) -> tuple:
    """Evaluate a program prefix (its last node may be object-valued)."""
    prog = parse_program(nodes + [{"function": "count", "inputs": [0]}])
    return evaluate(prog, scene).values[:-1]


def _identifying_filters(objs, candidates, target, allowed, rng) -> dict[str, str] | None:
    obj = objs[target]
    sizes = list(range(1, len(allowed) + 1))
    for n in sizes:
        combos = list(itertools.combinations(allowed, n))
        rng.shuffle(combos)
        for combo in combos:
            matches = [c for c in candidates if all(objs[c].attribute(a) == obj.attribute(a) for a in combo)]
            if matches == [target]:
                return {a: obj.attribute_name(a) for a in combo}
    return None


# --- complex templates; each returns node records or None -------------------


def _t_query(b: _Builder):
    attr = b.rng.choice(QUERY_ATTRS)
    ref = b.unique_of(b.scene_node(), avoid=(attr,))
    if ref is None:
        return None
    b.add(f"query_{attr}", [ref])
    return b.nodes


def _t_query_relate(b: _Builder):
    attr = b.rng.choice(QUERY_ATTRS)
    anchor = b.unique_of(b.scene_node())
    if anchor is None:
        return None
    rel = b.add("relate", [anchor], [b.rng.choice(RELATIONS)])
    ref = b.unique_of(rel, avoid=(attr,))
    if ref is None:
        return None
    b.add(f"query_{attr}", [ref])
    return b.nodes


def _t_query_same(b: _Builder):
    same, attr = b.rng.sample(QUERY_ATTRS, 2)
    anchor = b.unique_of(b.scene_node(), avoid=(same,))
    if anchor is None:
        return None
    s = b.add(f"same_{same}", [anchor])
    ref = b.unique_of(s, avoid=(attr, same))
    if ref is None:
        return None
    b.add(f"query_{attr}", [ref])
    return b.nodes


def _t_compare_attr(b: _Builder):
    attr = b.rng.choice(QUERY_ATTRS)
    a = b.unique_of(b.scene_node(), avoid=(attr,))
    if a is None:
        return None
    qa = b.add(f"query_{attr}", [a])
    c = b.unique_of(b.scene_node(), avoid=(attr,))
    if c is None or b.value(c) == b.value(a):
        return None
    qc = b.add(f"query_{attr}", [c])
    b.add(f"equal_{attr}", [qa, qc])
    return b.nodes


def _t_compare_attr_relate(b: _Builder):
    attr = b.rng.choice(QUERY_ATTRS)
    anchor = b.unique_of(b.scene_node())
    if anchor is None:
        return None
    rel = b.add("relate", [anchor], [b.rng.choice(RELATIONS)])
    a = b.unique_of(rel, avoid=(attr,))
    if a is None:
        return None
    qa = b.add(f"query_{attr}", [a])
    c = b.unique_of(b.scene_node(), avoid=(attr,))
    if c is None or b.value(c) == b.value(a):
        return None
    qc = b.add(f"query_{attr}", [c])
    b.add(f"equal_{attr}", [qa, qc])
    return b.nodes


def _t_count(b: _Builder):
    b.add("count", [b.loose_filters(b.scene_node(), max_filters=3)])
    return b.nodes


def _t_count_relate(b: _Builder):
    anchor = b.unique_of(b.scene_node())
    if anchor is None:
        return None
    rel = b.add("relate", [anchor], [b.rng.choice(RELATIONS)])
    b.add("count", [b.loose_filters(rel)])
    return b.nodes


def _t_count_or(b: _Builder):
    left = b.loose_filters(b.scene_node(), max_filters=3)
    right = b.loose_filters(b.scene_node(), max_filters=3)
    b.add("count", [b.add("union", [left, right])])
    return b.nodes


def _t_count_and(b: _Builder):
    a = b.unique_of(b.scene_node())
    if a is None:
        return None
    ra = b.add("relate", [a], [b.rng.choice(RELATIONS)])
    c = b.unique_of(b.scene_node())
    if c is None or b.value(c) == b.value(a):
        return None
    rc = b.add("relate", [c], [b.rng.choice(RELATIONS)])
    b.add("count", [b.loose_filters(b.add("intersect", [ra, rc]), max_filters=1)])
    return b.nodes


def _t_count_same(b: _Builder):
    same = b.rng.choice(QUERY_ATTRS)
    anchor = b.unique_of(b.scene_node(), avoid=(same,))
    if anchor is None:
        return None
    s = b.add(f"same_{same}", [anchor])
    b.add("count", [b.loose_filters(s, max_filters=1)])
    return b.nodes


def _t_exist(b: _Builder):
    b.add("exist", [b.loose_filters(b.scene_node(), max_filters=3, hit_rate=0.5)])
    return b.nodes


def _t_exist_relate(b: _Builder):
    anchor = b.unique_of(b.scene_node())
    if anchor is None:
        return None
    rel = b.add("relate", [anchor], [b.rng.choice(RELATIONS)])
    b.add("exist", [b.loose_filters(rel, hit_rate=0.5)])
    return b.nodes


def _t_exist_same(b: _Builder):
    same = b.rng.choice(QUERY_ATTRS)
    anchor = b.unique_of(b.scene_node(), avoid=(same,))
    if anchor is None:
        return None
    s = b.add(f"same_{same}", [anchor])
    b.add("exist", [b.loose_filters(s, max_filters=1, hit_rate=0.5)])
    return b.nodes


def _t_exist_or(b: _Builder):
    left = b.loose_filters(b.scene_node(), max_filters=3, hit_rate=0.5)
    right = b.loose_filters(b.scene_node(), max_filters=3, hit_rate=0.5)
    b.add("exist", [b.add("union", [left, right])])
    return b.nodes


def _t_compare_count(b: _Builder):
    left = b.loose_filters(b.scene_node(), max_filters=2)
    cl = b.add("count", [left])
    right = b.loose_filters(b.scene_node(), max_filters=2)
    cr = b.add("count", [right])
    b.add(b.rng.choice(("equal_integer", "greater_than", "less_than")), [cl, cr])
    return b.nodes


def _t_compare_count_relate(b: _Builder):
    anchor = b.unique_of(b.scene_node())
    if anchor is None:
        return None
    rel = b.add("relate", [anchor], [b.rng.choice(RELATIONS)])
    cl = b.add("count", [b.loose_filters(rel, max_filters=1)])
    cr = b.add("count", [b.loose_filters(b.scene_node(), max_filters=2)])
    b.add(b.rng.choice(("equal_integer", "greater_than", "less_than")), [cl, cr])
    return b.nodes


TEMPLATES: dict[str, list[Callable[[_Builder], list | None]]] = {
    "query": [_t_query, _t_query_relate, _t_query_same],
    "compare_attribute": [_t_compare_attr, _t_compare_attr_relate],
    "compare_integer": [_t_compare_count, _t_compare_count_relate],
    "count": [_t_count, _t_count_relate, _t_count_or, _t_count_and, _t_count_same],
    "exist": [_t_exist, _t_exist_relate, _t_exist_same, _t_exist_or],
}


def _simple_question(scene: SceneGraph, attr: str, rng: random.Random) -> list[dict] | None:
    b = _Builder(scene, rng)
    src = b.scene_node()
    candidates = sorted(scene.ids)
    rng.shuffle(candidates)
    allowed = [a for a in FILTER_ORDER if a != attr]
    for target in candidates:
        lits = _identifying_filters(scene.objects, sorted(scene.ids), target, allowed, rng)
        if lits is None:
            continue
        # occasionally add a redundant filter, as template phrasings do
        extra = [a for a in allowed if a not in lits]
        if extra and rng.random() < 0.3:
            a = rng.choice(extra)
            lits[a] = scene.objects[target].attribute_name(a)
        ref = b.add("unique", [b.filters(src, lits)])
        b.add(f"query_{attr}", [ref])
        return b.nodes
    return None


def instantiate_questions(scene: SceneGraph, kind: str, count: int, seed: int,
                          max_draws_per_question: int = 50,
                          query_attrs: Sequence[str] = QUERY_ATTRS) -> list[tuple[FunctionalProgram, str]]:
    """Draw ``count`` well-posed questions for ``scene``.

    Simple questions cycle through ``query_attrs`` (all four query types by
    default); a type with no identifiable target is skipped, so fewer than
    ``count`` may come back.
    Raises GenerationExhausted when nothing valid was found.
    """
    rng = random.Random(seed)
    out: list[tuple[FunctionalProgram, str]] = []
    if kind == "simple":
        attrs = list(query_attrs)
        if not attrs or any(a not in QUERY_ATTRS for a in attrs):
            raise ValueError(f"query_attrs must be a non-empty subset of {QUERY_ATTRS}")
        rng.shuffle(attrs)
        for k in range(count):
            nodes = _simple_question(scene, attrs[k % len(attrs)], rng)
            if nodes is not None:
                out.append(_finish(nodes, scene))
    elif kind == "complex":
        families = list(FAMILY_WEIGHTS)
        weights = [FAMILY_WEIGHTS[f] for f in families]
        draws = 0
        while len(out) < count and draws < count * max_draws_per_question:
            draws += 1
            family = rng.choices(families, weights)[0]
            template = rng.choice(TEMPLATES[family])
            try:
                nodes = template(_Builder(scene, rng))
                if nodes is None:
                    continue
                out.append(_finish(nodes, scene))
            except (IllPosed, EmptyQuery):
                continue
    else:
        raise ValueError(f"unknown question kind {kind!r}")
    if count > 0 and not out:
        raise GenerationExhausted(f"no valid {kind} question for scene {scene.image_index}")
    return out


def _finish(nodes: list[dict], scene: SceneGraph) -> tuple[FunctionalProgram, str]:
    program = parse_program(nodes)
    trace = evaluate(program, scene)
    program = FunctionalProgram(program.nodes, render_question(program), program.family)
    return program, trace.answer


# --- rough English rendering; programs stay the source of truth ------------

_REL_TEXT = {"left": "left of", "right": "right of", "front": "in front of", "behind": "behind"}


def _noun_phrase(program: FunctionalProgram, k: int, plural: bool) -> str:
    nodes = program.nodes
    lits: dict[str, str] = {}
    while nodes[k].function.startswith("filter_"):
        lits.setdefault(nodes[k].function[7:], nodes[k].value_inputs[0])
        k = nodes[k].inputs[0]
    adjs = [lits[a] for a in ("size", "color", "material") if a in lits]
    noun = lits.get("shape", "thing")
    if plural:
        noun = {"sphere": "spheres", "cube": "cubes", "cylinder": "cylinders"}.get(noun, "things")
    head = " ".join(adjs + [noun])
    base = nodes[k]
    if base.function == "scene":
        return head
    if base.function == "relate":
        return f"{head} {_REL_TEXT[base.value_inputs[0]]} {_ref_phrase(program, base.inputs[0])}"
    if base.function.startswith("same_"):
        return f"{head} with the same {base.function[5:]} as {_ref_phrase(program, base.inputs[0])}"
    if base.function in ("union", "intersect"):
        joiner = " or " if base.function == "union" else " and "
        left = _noun_phrase(program, base.inputs[0], plural)
        right = _noun_phrase(program, base.inputs[1], plural)
        return f"{head} that are {left}{joiner}{right}" if lits else f"{left}{joiner}{right}"
    return head


def _ref_phrase(program: FunctionalProgram, k: int) -> str:
    node = program.nodes[k]
    if node.function == "unique":
        return "the " + _noun_phrase(program, node.inputs[0], plural=False)
    return "it"


def render_question(program: FunctionalProgram) -> str:
    nodes = program.nodes
    last = nodes[-1]
    f = last.function
    if f.startswith("query_"):
        return f"What is the {f[6:]} of {_ref_phrase(program, last.inputs[0])}?"
    if f == "count":
        return f"How many {_noun_phrase(program, last.inputs[0], True)} are there?"
    if f == "exist":
        return f"Are there any {_noun_phrase(program, last.inputs[0], True)}?"
    if f in ("equal_integer", "greater_than", "less_than"):
        a, c = (_noun_phrase(program, nodes[i].inputs[0], True) for i in last.inputs)
        word = {"equal_integer": "the same number of", "greater_than": "more", "less_than": "fewer"}[f]
        tail = "and" if f == "equal_integer" else "than"
        return f"Are there {word} {a} {tail} {c}?"
    a, c = (_ref_phrase(program, nodes[i].inputs[0]) for i in last.inputs)
    return f"Does {a} have the same {f[6:]} as {c}?"
