"""Conversion of XGBoost JSON models for binary classification into native ensembles.

Two layouts are accepted: the document written by ``Booster.save_model`` and
the list produced by ``Booster.get_dump(dump_format="json")``. Thresholds and
leaf values are read from their decimal text. Default (missing-value)
directions are ignored because inputs are never missing.
"""

from __future__ import annotations

import json
import math
import re
from fractions import Fraction
from typing import Mapping, Sequence

from .model import EnsembleKind, Leaf, ModelFormatError, Node, Split, Tree, TreeEnsemble
from .schema import AttributeSchema, SchemaError, to_rational


OBJECTIVES = ("binary:logistic", "binary:logitraw")


class ConversionError(ModelFormatError):
    pass


class _Ids:
    def __init__(self):
        self.next = 0

    def take(self) -> int:
        self.next += 1
        return self.next - 1


def _position(name: str, schema: AttributeSchema, feature_map: Mapping[str, str] | None) -> int:
    """Schema position of an XGBoost feature: by (mapped) name, else ``f<i>`` by index."""
    target = feature_map.get(name, name) if feature_map else name
    try:
        return schema.position(target)
    except SchemaError:
        pass
    if not feature_map and re.fullmatch(r"f\d+", name) and int(name[1:]) < len(schema):
        return int(name[1:])
    raise ConversionError(f"missing feature mapping for {name!r}")


def _decimal(value, where: str) -> Fraction:
    try:
        return to_rational(value)
    except SchemaError as exc:
        raise ConversionError(f"{where}: {exc}") from exc


def _make_split(attr: int, t: Fraction, left, right, schema: AttributeSchema):
    """Split node, or the surviving child when the threshold sends the whole domain one way."""
    a = schema[attr]
    if t <= a.lo:
        return right()
    if t > a.hi:
        return left()
    return Split(attr, t, left(), right())


def _base_margin(base_score, objective: str) -> Fraction:
    if objective == "binary:logitraw":
        return base_score
    p = float(base_score)
    if not 0 < p < 1:
        raise ConversionError(f"base_score {base_score} is not a probability")
    return Fraction(repr(math.log(p / (1 - p))))


def _parse_base_score(text) -> Fraction:
    s = str(text).strip()
    if s.startswith("[") and s.endswith("]"):
        s = s[1:-1].split(",")[0]
    return _decimal(s, "base_score")


def _from_saved_model(doc: Mapping, schema: AttributeSchema, feature_map) -> tuple[list[Tree], Fraction]:
    learner = doc["learner"]
    objective = learner.get("objective", {}).get("name")
    params = learner.get("learner_model_param", {})
    if objective not in OBJECTIVES or int(params.get("num_class", "0")) > 1:
        raise ConversionError(f"unsupported objective {objective!r}")
    booster = learner.get("gradient_booster", {})
    if booster.get("name", "gbtree") != "gbtree":
        raise ConversionError(f"unsupported booster {booster.get('name')!r}")
    model = booster["model"]
    names = learner.get("feature_names") or [f"f{i}" for i in range(int(params.get("num_feature", len(schema))))]
    positions = [_position(n, schema, feature_map) for n in names]
    ids = _Ids()
    trees = []
    for j, t in enumerate(model["trees"]):
        where = f"trees[{j}]"
        if any(int(s) != 0 for s in t.get("split_type", [])):
            raise ConversionError(f"{where}: categorical splits are not supported")
        left, right = t["left_children"], t["right_children"]
        conds, idx = t["split_conditions"], t["split_indices"]

        def build(n: int, where=where, left=left, right=right, conds=conds, idx=idx) -> Node:
            if left[n] == -1:
                return Leaf(_decimal(conds[n], f"{where}.node[{n}]"), ids.take())
            attr = positions[int(idx[n])]
            thr = _decimal(conds[n], f"{where}.node[{n}]")
            return _make_split(attr, thr, lambda: build(left[n]), lambda: build(right[n]), schema)

        trees.append(Tree(build(0)))
    base = _base_margin(_parse_base_score(params.get("base_score", "0.5")), objective)
    return trees, base


def _from_dump(dump: Sequence, schema: AttributeSchema, feature_map) -> list[Tree]:
    ids = _Ids()
    parsed = [json.loads(t) if isinstance(t, str) else t for t in dump]

    def build(node, where: str) -> Node:
        if "leaf" in node:
            return Leaf(_decimal(node["leaf"], where), ids.take())
        if "split_condition" not in node:
            raise ConversionError(f"{where}: categorical or malformed split")
        kids = {c["nodeid"]: c for c in node.get("children", [])}
        try:
            yes, no = kids[node["yes"]], kids[node["no"]]
        except KeyError as exc:
            raise ConversionError(f"{where}: child {exc.args[0]} not found") from None
        attr = _position(node["split"], schema, feature_map)
        thr = _decimal(node["split_condition"], where)
        return _make_split(attr, thr, lambda: build(yes, f"{where}.yes"), lambda: build(no, f"{where}.no"), schema)

    return [Tree(build(t, f"trees[{j}]")) for j, t in enumerate(parsed)]


def convert_xgboost_dump(
    document,
    schema: AttributeSchema,
    feature_map: Mapping[str, str] | None = None,
    base_score=None,
) -> TreeEnsemble:
    """Native GBDT equivalent to an XGBoost binary classifier.

    ``base_score`` (a margin) is needed only for the ``get_dump`` layout, which
    does not record it.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConversionError(f"not JSON: {exc}") from exc
    if isinstance(document, Mapping) and "learner" in document:
        trees, base = _from_saved_model(document, schema, feature_map)
    elif isinstance(document, list):
        trees = _from_dump(document, schema, feature_map)
        base = to_rational(base_score) if base_score is not None else Fraction(0)
    else:
        raise ConversionError("unrecognised XGBoost document layout")
    if not trees:
        raise ConversionError("model contains no trees")
    return TreeEnsemble(EnsembleKind.GBDT, tuple(trees), schema, base)
