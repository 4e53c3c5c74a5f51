"""Tree-ensemble data model: trees, paths, path tuples and prediction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import cached_property
from typing import Iterator, Mapping, Sequence

from .geometry import Box, intersect, measure
from .schema import AttributeSchema, SchemaError, attribute_from_json, format_rational, to_rational


class ModelFormatError(ValueError):
    """Raised for malformed ensemble documents; the message names the location."""


class EnsembleKind(str, Enum):
    GBDT = "gbdt"
    RANDOM_FOREST = "random_forest"


TIE = 0


@dataclass(frozen=True)
class Leaf:
    value: Fraction
    leaf_id: int


@dataclass(frozen=True)
class Split:
    attribute: int  # 0-based position
    threshold: Fraction  # go left iff x[attribute] < threshold
    left: "Node"
    right: "Node"


Node = Leaf | Split


@dataclass(frozen=True)
class Tree:
    root: Node

    def leaves(self) -> list[Leaf]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Leaf):
                out.append(node)
            else:
                stack.append(node.right)
                stack.append(node.left)
        return out

    def splits(self) -> list[Split]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Split):
                out.append(node)
                stack.append(node.right)
                stack.append(node.left)
        return out

    def evaluate(self, x: Sequence) -> Leaf:
        node = self.root
        while isinstance(node, Split):
            node = node.left if x[node.attribute] < node.threshold else node.right
        return node


@dataclass(frozen=True)
class Path:
    tree_index: int
    leaf_id: int
    leaf_value: Fraction
    box: Box


@dataclass(frozen=True)
class PathTuple:
    paths: tuple[Path, ...]
    box: Box
    score: Fraction  # base_score + sum of leaf values

    @property
    def leaf_ids(self) -> tuple[int, ...]:
        return tuple(p.leaf_id for p in self.paths)

    @property
    def measure(self) -> Fraction:
        return measure(self.box)


def enumerate_paths(tree: Tree, schema: AttributeSchema, tree_index: int = 0) -> list[Path]:
    """One path per leaf, left to right, with the box of inputs routed to it."""
    out = []
    stack = [(tree.root, Box.full(schema))]
    while stack:
        node, box = stack.pop()
        if isinstance(node, Leaf):
            out.append(Path(tree_index, node.leaf_id, node.value, box))
            continue
        left, right = box[node.attribute].split_at(node.threshold)
        stack.append((node.right, box.replace(node.attribute, right)))
        stack.append((node.left, box.replace(node.attribute, left)))
    return out


@dataclass(frozen=True)
class Prediction:
    label: int  # +1, -1, or TIE (0)
    confidence: float
    score: Fraction


def logit_threshold(kappa) -> Fraction:
    """logit(kappa) evaluated in binary64, as the exact rational of its shortest repr."""
    k = float(kappa)
    return Fraction(repr(math.log(k / (1 - k))))


def check_kappa(kappa) -> Fraction:
    kappa = to_rational(kappa)
    if not Fraction(1, 2) <= kappa < 1:
        raise ValueError(f"kappa must lie in [0.5, 1), got {kappa}")
    return kappa


@dataclass(frozen=True)
class TreeEnsemble:
    kind: EnsembleKind
    trees: tuple[Tree, ...]
    schema: AttributeSchema
    base_score: Fraction = Fraction(0)

    def __post_init__(self):
        if not self.trees:
            raise ModelFormatError("ensemble has no trees")
        seen = set()
        for j, tree in enumerate(self.trees):
            for split in tree.splits():
                if not 0 <= split.attribute < len(self.schema):
                    raise ModelFormatError(f"trees[{j}]: split on unknown attribute {split.attribute}")
            for leaf in tree.leaves():
                if leaf.leaf_id in seen:
                    raise ModelFormatError(f"trees[{j}]: duplicate leaf id {leaf.leaf_id}")
                seen.add(leaf.leaf_id)

    @property
    def m(self) -> int:
        return len(self.trees)

    def with_schema(self, schema: AttributeSchema) -> TreeEnsemble:
        if [(a.kind, a.lo, a.hi) for a in schema] != [(a.kind, a.lo, a.hi) for a in self.schema]:
            raise SchemaError("replacement schema changes attribute kinds or domains")
        return TreeEnsemble(self.kind, self.trees, schema, self.base_score)

    def with_sensitive(self, refs) -> TreeEnsemble:
        return self.with_schema(self.schema.with_sensitive(refs))

    @cached_property
    def paths(self) -> tuple[tuple[Path, ...], ...]:
        return tuple(tuple(enumerate_paths(t, self.schema, j)) for j, t in enumerate(self.trees))

    @cached_property
    def path_by_leaf(self) -> dict[int, Path]:
        return {p.leaf_id: p for ps in self.paths for p in ps}

    @cached_property
    def leaf_ids(self) -> tuple[tuple[int, ...], ...]:
        """Sorted leaf ids of each tree."""
        return tuple(tuple(sorted(p.leaf_id for p in ps)) for ps in self.paths)

    @property
    def tuple_count(self) -> int:
        return math.prod(len(ps) for ps in self.paths)

    # -- prediction semantics ------------------------------------------------

    @property
    def center(self) -> Fraction:
        """Score value at which the predicted class flips."""
        return Fraction(0) if self.kind is EnsembleKind.GBDT else Fraction(self.m, 2)

    def label_of(self, score: Fraction) -> int:
        c = self.center
        return 1 if score > c else (-1 if score < c else TIE)

    def confidence_of(self, score: Fraction) -> float:
        if self.kind is EnsembleKind.GBDT:
            s = float(score)
            p = 1 / (1 + math.exp(-s)) if s >= 0 else math.exp(s) / (1 + math.exp(s))
        else:
            p = float(score / self.m)
        return max(p, 1 - p)

    def kappa_bounds(self, kappa) -> tuple[Fraction, Fraction]:
        """Scores strictly above the first or strictly below the second exceed kappa."""
        kappa = check_kappa(kappa)
        if self.kind is EnsembleKind.GBDT:
            t = logit_threshold(kappa)
            return t, -t
        return self.m * kappa, self.m * (1 - kappa)

    def exceeds(self, score: Fraction, kappa) -> bool:
        hi, lo = self.kappa_bounds(kappa)
        return score > hi or score < lo

    def score(self, x: Sequence) -> Fraction:
        return self.base_score + sum((t.evaluate(x).value for t in self.trees), Fraction(0))

    def check_input(self, x: Sequence) -> None:
        if not self.schema.contains(x):
            raise ValueError(f"input {list(x)} lies outside the attribute domains")

    def tuple_from_leaves(self, leaf_ids: Sequence[int]) -> PathTuple:
        paths = tuple(self.path_by_leaf[i] for i in leaf_ids)
        box = paths[0].box
        for p in paths[1:]:
            box = Box(tuple(a.intersect(b) for a, b in zip(box.intervals, p.box.intervals)))
        score = self.base_score + sum((p.leaf_value for p in paths), Fraction(0))
        return PathTuple(paths, box, score)


def predict(ensemble: TreeEnsemble, x: Sequence) -> Prediction:
    """Class and confidence of ``x``; class is TIE when the score sits exactly at the center."""
    ensemble.check_input(x)
    s = ensemble.score(x)
    return Prediction(ensemble.label_of(s), ensemble.confidence_of(s), s)


def path_tuple_of(ensemble: TreeEnsemble, x: Sequence) -> PathTuple:
    ensemble.check_input(x)
    return ensemble.tuple_from_leaves([t.evaluate(x).leaf_id for t in ensemble.trees])


def enumerate_tuples(ensemble: TreeEnsemble) -> Iterator[PathTuple]:
    """All path tuples with non-empty boxes, pruning empty partial intersections."""
    paths = ensemble.paths
    base = ensemble.base_score

    def rec(j, box, chosen, score):
        if j == len(paths):
            yield PathTuple(tuple(chosen), box, score)
            return
        for p in paths[j]:
            b = intersect(box, p.box) if box is not None else (None if p.box.is_empty else p.box)
            if b is None:
                continue
            chosen.append(p)
            yield from rec(j + 1, b, chosen, score + p.leaf_value)
            chosen.pop()

    yield from rec(0, None, [], base)


# -- native document format ---------------------------------------------------

class _LeafIds:
    """Hands out depth-first leaf ids, skipping ids the document assigns explicitly."""

    def __init__(self, explicit: set[int]):
        self.explicit = explicit
        self.used: set[int] = set()
        self._next = 0

    def take(self, leaf_id, where: str) -> int:
        if leaf_id is None:
            while self._next in self.explicit or self._next in self.used:
                self._next += 1
            leaf_id = self._next
        elif not isinstance(leaf_id, int) or isinstance(leaf_id, bool) or leaf_id < 0:
            raise ModelFormatError(f"{where}: leaf id must be a natural number")
        if leaf_id in self.used:
            raise ModelFormatError(f"{where}: duplicate leaf id {leaf_id}")
        self.used.add(leaf_id)
        return leaf_id


def _parse_node(obj, schema: AttributeSchema, where: str, ids: _LeafIds) -> Node:
    if not isinstance(obj, Mapping):
        raise ModelFormatError(f"{where}: node must be an object")
    if "leaf" in obj:
        extra = set(obj) - {"leaf", "id"}
        if extra:
            raise ModelFormatError(f"{where}: leaf node has unexpected fields {sorted(extra)}")
        try:
            value = to_rational(obj["leaf"])
        except SchemaError as exc:
            raise ModelFormatError(f"{where}: {exc}") from exc
        return Leaf(value, ids.take(obj.get("id"), where))
    if "split" in obj:
        missing = [k for k in ("left", "right") if k not in obj]
        if missing:
            raise ModelFormatError(f"{where}: internal node needs two children (missing {', '.join(missing)})")
        split = obj["split"]
        if not isinstance(split, Mapping) or "attr" not in split or "threshold" not in split:
            raise ModelFormatError(f"{where}.split: needs 'attr' and 'threshold'")
        try:
            attr = schema.position(split["attr"])
            t = to_rational(split["threshold"])
        except SchemaError as exc:
            raise ModelFormatError(f"{where}.split: {exc}") from exc
        a = schema[attr]
        if not a.lo <= t <= a.hi:
            raise ModelFormatError(f"{where}.split: threshold {format_rational(t)} outside domain of {a.name}")
        left = _parse_node(obj["left"], schema, f"{where}.left", ids)
        right = _parse_node(obj["right"], schema, f"{where}.right", ids)
        return Split(attr, t, left, right)
    raise ModelFormatError(f"{where}: node is neither a split nor a leaf")


def _explicit_ids(obj, out: set) -> None:
    if isinstance(obj, Mapping):
        if "leaf" in obj and isinstance(obj.get("id"), int):
            out.add(obj["id"])
        for key in ("left", "right"):
            if key in obj:
                _explicit_ids(obj[key], out)


def load_ensemble(document, schema: AttributeSchema | None = None) -> TreeEnsemble:
    """Load the native JSON format (text or already-parsed mapping).

    Leaves without an explicit ``id`` are numbered depth-first, left to right,
    across trees. A ``schema`` argument overrides the document's attributes.
    """
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document, parse_float=Fraction)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    else:
        doc = document
    if not isinstance(doc, Mapping):
        raise ModelFormatError("document must be a JSON object")
    try:
        kind = EnsembleKind(doc.get("kind", "gbdt"))
    except ValueError as exc:
        raise ModelFormatError(f"kind: unknown ensemble kind {doc.get('kind')!r}") from exc
    if schema is None:
        attrs = doc.get("attributes")
        if not isinstance(attrs, list) or not attrs:
            raise ModelFormatError("attributes: must be a non-empty list")
        try:
            specs = tuple(attribute_from_json(a, f"attributes[{i}]") for i, a in enumerate(attrs))
            schema = AttributeSchema(specs).with_sensitive(doc.get("sensitive", ()))
        except SchemaError as exc:
            raise ModelFormatError(str(exc)) from exc
    trees_doc = doc.get("trees")
    if not isinstance(trees_doc, list) or not trees_doc:
        raise ModelFormatError("trees: must be a non-empty list")
    explicit: set[int] = set()
    for t in trees_doc:
        _explicit_ids(t, explicit)
    ids = _LeafIds(explicit)
    trees = tuple(Tree(_parse_node(t, schema, f"trees[{j}]", ids)) for j, t in enumerate(trees_doc))
    try:
        base = to_rational(doc.get("base_score", 0))
    except SchemaError as exc:
        raise ModelFormatError(f"base_score: {exc}") from exc
    return TreeEnsemble(kind, trees, schema, base)


def _node_to_json(node: Node, schema: AttributeSchema) -> dict:
    if isinstance(node, Leaf):
        return {"leaf": format_rational(node.value), "id": node.leaf_id}
    return {
        "split": {"attr": schema[node.attribute].name, "threshold": format_rational(node.threshold)},
        "left": _node_to_json(node.left, schema),
        "right": _node_to_json(node.right, schema),
    }


def dump_ensemble(ensemble: TreeEnsemble) -> dict:
    """Native-format document; round-trips through load_ensemble."""
    doc = {
        "kind": ensemble.kind.value,
        "attributes": ensemble.schema.to_json(),
        "trees": [_node_to_json(t.root, ensemble.schema) for t in ensemble.trees],
        "base_score": format_rational(ensemble.base_score),
    }
    if ensemble.schema.sensitive:
        doc["sensitive"] = [ensemble.schema[i].name for i in sorted(ensemble.schema.sensitive)]
    return doc
