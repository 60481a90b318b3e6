"""Functional programs over scene graphs: parsing, evaluation and ground-truth object sets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .scene import ANSWERS, ATTRIBUTES, RELATIONS, SceneError, SceneGraph, SceneObject


class ProgramError(ValueError):
    pass


class UnknownFunction(ProgramError):
    pass


class ArityMismatch(ProgramError):
    pass


class CycleDetected(ProgramError):
    pass


class BadLiteral(ProgramError):
    pass


class InputTypeMismatch(ProgramError):
    pass


class IllPosed(ProgramError):
    """A ``unique`` node saw a set that does not hold exactly one object."""


class EmptyQuery(ProgramError):
    pass


class EmptyGT(ValueError):
    pass


SET, REF, INT, BOOL = "set", "ref", "int", "bool"


def _attr(name: str) -> str:
    return f"attr:{name}"


# name -> (input kinds, output kind, literal vocabulary or None)
FUNCTIONS: dict[str, tuple[tuple[str, ...], str, tuple[str, ...] | None]] = {
    "scene": ((), SET, None),
    "unique": ((SET,), REF, None),
    "relate": ((REF,), SET, RELATIONS),
    "union": ((SET, SET), SET, None),
    "intersect": ((SET, SET), SET, None),
    "count": ((SET,), INT, None),
    "exist": ((SET,), BOOL, None),
    "equal_integer": ((INT, INT), BOOL, None),
    "greater_than": ((INT, INT), BOOL, None),
    "less_than": ((INT, INT), BOOL, None),
}
for _name, _values in ATTRIBUTES.items():
    FUNCTIONS[f"filter_{_name}"] = ((SET,), SET, _values)
    FUNCTIONS[f"same_{_name}"] = ((REF,), SET, None)
    FUNCTIONS[f"query_{_name}"] = ((REF,), _attr(_name), None)
    FUNCTIONS[f"equal_{_name}"] = ((_attr(_name), _attr(_name)), BOOL, None)

def program_vocabulary() -> list[str]:
    """Every token ``FunctionalProgram.tokens`` can produce, in a fixed order."""
    out = []
    for name, (_, _, literals) in FUNCTIONS.items():
        if name == "scene":
            continue
        out += [name] if literals is None else [f"{name}:{v}" for v in literals]
    return out


FAMILIES = ("query", "compare_attribute", "compare_integer", "count", "exist")

COUNTING_FUNCTIONS = frozenset({"count", "equal_integer", "greater_than", "less_than"})
SET_VALUED = (SET, REF)

MIN_LENGTH, MAX_LENGTH = 2, 24


def family_of(function: str) -> str:
    if function.startswith("query_"):
        return "query"
    if function in ("equal_integer", "greater_than", "less_than"):
        return "compare_integer"
    if function.startswith("equal_"):
        return "compare_attribute"
    if function in ("count", "exist"):
        return function
    raise ProgramError(f"{function!r} cannot terminate a program")


@dataclass(frozen=True)
class ProgramNode:
    function: str
    inputs: tuple[int, ...] = ()
    value_inputs: tuple[str, ...] = ()

    @property
    def output_kind(self) -> str:
        return FUNCTIONS[self.function][1]


@dataclass(frozen=True)
class FunctionalProgram:
    nodes: tuple[ProgramNode, ...]
    question_text: str = ""
    family: str = ""

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def question_type(self) -> str:
        """Name of the answering function, e.g. ``query_color`` or ``exist``."""
        return self.nodes[-1].function

    @property
    def involves_counting(self) -> bool:
        return any(n.function in COUNTING_FUNCTIONS for n in self.nodes)

    def to_records(self) -> list[dict]:
        return [
            {"function": n.function, "inputs": list(n.inputs), "value_inputs": list(n.value_inputs)}
            for n in self.nodes
        ]

    def tokens(self) -> list[str]:
        """Bag of ``function[:literal]`` tokens, used to index question embeddings."""
        out = []
        for n in self.nodes:
            if n.function == "scene":
                continue
            out.append(n.function if not n.value_inputs else f"{n.function}:{n.value_inputs[0]}")
        return out


def _node_from_record(k: int, rec) -> ProgramNode:
    if isinstance(rec, ProgramNode):
        return rec
    function = rec.get("function", rec.get("type"))
    inputs = rec.get("inputs", [])
    value_inputs = rec.get("value_inputs", [])
    if function is None:
        raise ProgramError(f"node {k} has no function")
    return ProgramNode(str(function), tuple(int(i) for i in inputs), tuple(str(v) for v in value_inputs))


def parse_program(raw, question_text: str = "", family: str | None = None) -> FunctionalProgram:
    """Validate a program description into a :class:`FunctionalProgram`.

    ``raw`` is either a list of node records ``{function, inputs, value_inputs}``
    or a mapping holding such a list under ``program`` (question records).
    Chained programs may omit ``inputs``: such a node reads the node just before it.
    """
    if isinstance(raw, Mapping):
        question_text = raw.get("question_text", raw.get("question", question_text))
        family = raw.get("family", family)
        raw = raw["program"]
    nodes = []
    for k, rec in enumerate(raw):
        node = _node_from_record(k, rec)
        if node.function not in FUNCTIONS:
            raise UnknownFunction(f"node {k}: unknown function {node.function!r}")
        in_kinds, _, literals = FUNCTIONS[node.function]
        if not node.inputs and in_kinds and not isinstance(rec, ProgramNode) and "inputs" not in rec:
            node = ProgramNode(node.function, (k - 1,) if len(in_kinds) == 1 else (), node.value_inputs)
        if len(node.inputs) != len(in_kinds):
            raise ArityMismatch(
                f"node {k}: {node.function} takes {len(in_kinds)} inputs, got {len(node.inputs)}"
            )
        for i in node.inputs:
            if i >= k:
                raise CycleDetected(f"node {k}: input {i} does not precede it")
            if i < 0:
                raise ArityMismatch(f"node {k}: negative input index {i}")
        n_literals = 0 if literals is None else 1
        if len(node.value_inputs) != n_literals:
            raise ArityMismatch(
                f"node {k}: {node.function} takes {n_literals} literal(s), got {len(node.value_inputs)}"
            )
        if literals is not None and node.value_inputs[0] not in literals:
            raise BadLiteral(f"node {k}: {node.value_inputs[0]!r} is not one of {literals}")
        for slot, (i, want) in enumerate(zip(node.inputs, in_kinds)):
            got = nodes[i].output_kind
            if got != want:
                raise InputTypeMismatch(f"node {k}: input {slot} of {node.function} expects {want}, got {got}")
        nodes.append(node)
    if not MIN_LENGTH <= len(nodes) <= MAX_LENGTH:
        raise ArityMismatch(f"program length {len(nodes)} outside {MIN_LENGTH}..{MAX_LENGTH}")
    if nodes[0].function != "scene":
        raise ProgramError("first node must be scene")
    if nodes[-1].output_kind in SET_VALUED:
        raise ProgramError("last node must produce an answer, not objects")
    inferred = family_of(nodes[-1].function)
    if family and family != inferred:
        raise ProgramError(f"family {family!r} does not match final function {nodes[-1].function}")
    return FunctionalProgram(tuple(nodes), question_text, inferred)


@dataclass(frozen=True)
class EvalTrace:
    """One value per program node, plus the answer string.

    Object-valued nodes hold ``frozenset`` (ObjectSet) or ``int`` (ObjectRef, for
    ``unique``); the node kinds in the program disambiguate ref from count.
    """
    program: FunctionalProgram
    values: tuple
    answer: str

    def objects_at(self, k: int) -> frozenset[int] | None:
        """Objects produced by node ``k`` as a set, or None for non-object outputs."""
        kind = self.program.nodes[k].output_kind
        if kind == SET:
            return self.values[k]
        if kind == REF:
            return frozenset((self.values[k],))
        return None


def _relate(ref: SceneObject, other: SceneObject, relation: str) -> bool:
    (rx, ry), (ox, oy) = ref.position, other.position
    if relation == "left":
        return ox < rx
    if relation == "right":
        return ox > rx
    if relation == "front":
        return oy > ry
    return oy < ry  # behind


def answer_of(kind: str, value) -> str:
    if kind == BOOL:
        return "yes" if value else "no"
    if kind == INT:
        return str(value)
    if kind.startswith("attr:"):
        return ATTRIBUTES[kind[5:]][value]
    raise ProgramError(f"no answer for output kind {kind}")


def evaluate(program: FunctionalProgram, scene: SceneGraph) -> EvalTrace:
    """Run ``program`` on ``scene`` and record every node's value."""
    objs = scene.objects
    values: list = []
    for k, node in enumerate(program.nodes):
        f = node.function
        args = [values[i] for i in node.inputs]
        if f == "scene":
            v = frozenset(o.id for o in objs)
        elif f.startswith("filter_"):
            attr = f[7:]
            target = ATTRIBUTES[attr].index(node.value_inputs[0])
            v = frozenset(i for i in args[0] if objs[i].attribute(attr) == target)
        elif f == "unique":
            if len(args[0]) != 1:
                raise IllPosed(f"node {k}: unique over {len(args[0])} objects")
            (v,) = args[0]
        elif f == "relate":
            ref = _lookup(objs, args[0], k)
            v = frozenset(o.id for o in objs if o.id != ref.id and _relate(ref, o, node.value_inputs[0]))
        elif f.startswith("same_"):
            attr = f[5:]
            ref = _lookup(objs, args[0], k)
            v = frozenset(o.id for o in objs if o.id != ref.id and o.attribute(attr) == ref.attribute(attr))
        elif f == "union":
            v = args[0] | args[1]
        elif f == "intersect":
            v = args[0] & args[1]
        elif f == "count":
            v = len(args[0])
        elif f == "exist":
            v = len(args[0]) > 0
        elif f.startswith("query_"):
            v = _lookup(objs, args[0], k).attribute(f[6:])
        elif f.startswith("equal_"):
            v = args[0] == args[1]
        elif f == "greater_than":
            v = args[0] > args[1]
        elif f == "less_than":
            v = args[0] < args[1]
        else:  # pragma: no cover - parse_program rejects these
            raise UnknownFunction(f)
        values.append(v)
    answer = answer_of(program.nodes[-1].output_kind, values[-1])
    return EvalTrace(program, tuple(values), answer)


def _lookup(objs: Sequence[SceneObject], ref: int, k: int) -> SceneObject:
    if not 0 <= ref < len(objs):
        raise EmptyQuery(f"node {k}: object {ref} not in scene")
    return objs[ref]


def is_well_posed(program: FunctionalProgram, scene: SceneGraph) -> bool:
    try:
        evaluate(program, scene)
    except (IllPosed, EmptyQuery):
        return False
    return True


# ground-truth object sets


def gt_unique(trace: EvalTrace) -> frozenset[int] | None:
    """Union of all ``unique`` outputs; None when the program has no ``unique`` node."""
    refs = [trace.values[k] for k, n in enumerate(trace.program.nodes) if n.function == "unique"]
    if not refs:
        return None
    return frozenset(refs)


def gt_unique_first_nonempty(trace: EvalTrace) -> frozenset[int]:
    """Walk back from the answer node; on every branch keep the first non-empty object set.

    ``scene`` nodes never count. The result also includes every ``unique`` output.
    """
    nodes = trace.program.nodes
    found: set[int] = set()
    seen: set[int] = set()
    stack = [len(nodes) - 1]
    while stack:
        k = stack.pop()
        if k in seen:
            continue
        seen.add(k)
        node = nodes[k]
        if node.function == "scene":
            continue
        objects = trace.objects_at(k)
        if objects:
            found |= objects
            continue
        # reversed so the first input is explored first
        stack.extend(reversed(node.inputs))
    found |= gt_unique(trace) or frozenset()
    if not found:
        raise EmptyGT("no non-empty object set in program")
    return frozenset(found)


def gt_union(trace: EvalTrace) -> frozenset[int]:
    """Every object produced by any non-``scene`` node."""
    found: set[int] = set()
    for k, node in enumerate(trace.program.nodes):
        if node.function == "scene":
            continue
        objects = trace.objects_at(k)
        if objects:
            found |= objects
    if not found:
        raise EmptyGT("all intermediate object sets are empty")
    return frozenset(found)


def gt_all_objects(scene: SceneGraph) -> frozenset[int]:
    if not scene.objects:
        raise SceneError("scene has no objects")
    return scene.ids


GT_KINDS = ("single_object", "unique", "unique_first_nonempty", "union", "all_objects")


def derive_gts(trace: EvalTrace, scene: SceneGraph) -> dict[str, frozenset[int] | None]:
    """All ground-truth object sets for a question.

    Undefined sets are None; a set that would be empty (EmptyGT) is an empty frozenset.
    ``single_object`` is defined only for single-target queries.
    """
    out: dict[str, frozenset[int] | None] = {}
    uniq = gt_unique(trace)
    out["unique"] = uniq
    out["single_object"] = uniq if uniq is not None and len(uniq) == 1 and _is_simple(trace.program) else None
    for name, fn in (("unique_first_nonempty", gt_unique_first_nonempty), ("union", gt_union)):
        try:
            out[name] = fn(trace)
        except EmptyGT:
            out[name] = frozenset()
    out["all_objects"] = gt_all_objects(scene)
    return out


def _is_simple(program: FunctionalProgram) -> bool:
    fns = [n.function for n in program.nodes]
    return (
        fns[0] == "scene"
        and fns[-1].startswith("query_")
        and fns[-2] == "unique"
        and all(f.startswith("filter_") for f in fns[1:-2])
    )


def answer_class(answer: str) -> int:
    return ANSWERS.index(answer)


def program_from_functions(steps: Iterable[tuple]) -> FunctionalProgram:
    """Chain helper: ``[("scene",), ("filter_shape", "sphere"), ("unique",), ...]``."""
    recs = []
    for k, step in enumerate(steps):
        fn, *lits = step
        recs.append({"function": fn, "inputs": [] if k == 0 else [k - 1], "value_inputs": lits})
    return parse_program(recs)
