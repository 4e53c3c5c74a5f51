import json
import math
import random
from fractions import Fraction as F

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxqte.geometry import Box, Interval, measure, union_measure
from boxqte.model import (
    TIE,
    EnsembleKind,
    Leaf,
    ModelFormatError,
    Tree,
    TreeEnsemble,
    dump_ensemble,
    enumerate_paths,
    enumerate_tuples,
    load_ensemble,
    path_tuple_of,
    predict,
)
from boxqte.oracle import random_point
from boxqte.schema import (
    AttributeKind,
    AttributeSchema,
    AttributeSpec,
    SchemaError,
    format_rational,
    schema_from_json,
    to_rational,
)
from ensembles import lattice_grid_schema, random_ensemble, random_tree


def lat(lo, hi):
    return Interval(F(lo), F(hi), True)


def cont(lo, hi, closed=False):
    return Interval(F(lo), F(hi), False, closed)


# -- schema ---------------------------------------------------------------------

def test_rational_parsing_is_exact():
    assert to_rational("0.1") == F(1, 10)
    assert to_rational(0.1) == F(1, 10)
    assert to_rational("-3/4") == F(-3, 4)
    with pytest.raises(SchemaError):
        to_rational("abc")
    with pytest.raises(SchemaError):
        to_rational(True)


@pytest.mark.parametrize("q,text", [(F(17, 100), "0.17"), (F(-3, 2), "-1.5"), (F(5), "5"), (F(1, 3), "1/3"), (F(-1, 50), "-0.02")])
def test_format_rational(q, text):
    assert format_rational(q) == text
    assert to_rational(text) == q


@given(st.fractions())
def test_format_rational_roundtrip(q):
    assert to_rational(format_rational(q)) == q


def test_attribute_validation():
    with pytest.raises(SchemaError):
        AttributeSpec("a", AttributeKind.CONTINUOUS, F(1), F(1))
    with pytest.raises(SchemaError):
        AttributeSpec("a", AttributeKind.INTEGER, F(0), F(5, 2))
    with pytest.raises(SchemaError):
        AttributeSpec("a", AttributeKind.CATEGORICAL, F(0), F(3), epsilon=F(1))
    AttributeSpec("a", AttributeKind.INTEGER, F(3), F(3))


def test_epsilon_rate(three_trees):
    assert three_trees.schema.epsilons("0.1") == (F(100), F(0), F(10))
    assert three_trees.schema.resolve_epsilon([5, 0, 5]) == (F(5), F(0), F(5))
    with pytest.raises(SchemaError):
        three_trees.schema.resolve_epsilon([1, 2])


def test_fixed_epsilon_overrides_rate():
    s = schema_from_json({"attributes": [{"name": "x", "kind": "integer", "lo": 0, "hi": 10, "epsilon": "2"}, {"name": "y", "kind": "continuous", "lo": 0, "hi": 10}]})
    assert s.epsilons("0.5") == (F(2), F(5))


def test_schema_sensitive_by_name(three_trees):
    assert three_trees.schema.sensitive == frozenset({1})
    with pytest.raises(SchemaError):
        three_trees.schema.with_sensitive(["nope"])


# -- loading --------------------------------------------------------------------

def test_three_trees_fixture_loads(three_trees):
    assert three_trees.m == 3
    assert three_trees.kind is EnsembleKind.GBDT
    assert [(a.name, a.kind.value, a.lo, a.hi) for a in three_trees.schema] == [
        ("income", "continuous", 0, 1000),
        ("race", "categorical", 0, 4),
        ("age", "integer", 0, 100),
    ]
    assert three_trees.leaf_ids == ((0, 1, 2), (3, 4, 5, 6), (7, 8))


def _doc(trees, **extra):
    doc = {"kind": "gbdt", "attributes": [{"name": "a", "kind": "continuous", "lo": "0", "hi": "10"}], "trees": trees}
    doc.update(extra)
    return doc


def test_split_on_undeclared_attribute_rejected():
    with pytest.raises(ModelFormatError, match=r"trees\[0\].split.*unknown attribute 'b'"):
        load_ensemble(_doc([{"split": {"attr": "b", "threshold": "1"}, "left": {"leaf": "0"}, "right": {"leaf": "1"}}]))


def test_non_binary_node_rejected_with_location():
    bad = {"split": {"attr": "a", "threshold": "1"}, "left": {"leaf": "0"}, "right": {"split": {"attr": "a", "threshold": "2"}, "left": {"leaf": "1"}}}
    with pytest.raises(ModelFormatError, match=r"trees\[0\]\.right: internal node needs two children"):
        load_ensemble(_doc([bad]))


def test_malformed_documents_rejected():
    with pytest.raises(ModelFormatError, match="line 1"):
        load_ensemble("{not json")
    with pytest.raises(ModelFormatError, match="trees"):
        load_ensemble(_doc([]))
    with pytest.raises(ModelFormatError, match="outside domain"):
        load_ensemble(_doc([{"split": {"attr": "a", "threshold": "11"}, "left": {"leaf": "0"}, "right": {"leaf": "1"}}]))
    with pytest.raises(ModelFormatError, match="duplicate leaf id"):
        load_ensemble(_doc([{"leaf": "0", "id": 3}, {"leaf": "1", "id": 3}]))


def test_single_leaf_tree_box_is_domain():
    ens = load_ensemble(_doc([{"leaf": "0.5"}]))
    (path,) = ens.paths[0]
    assert path.box == Box.full(ens.schema)
    assert path.box[0].closed


def test_dump_roundtrip(three_trees):
    again = load_ensemble(json.dumps(dump_ensemble(three_trees)))
    assert again == three_trees


# -- paths ----------------------------------------------------------------------

def test_three_trees_first_tree_paths(three_trees):
    boxes = [p.box for p in three_trees.paths[0]]
    assert boxes == [
        Box((cont(0, 300), lat(0, 2), lat(0, 101))),
        Box((cont(300, 1000, True), lat(0, 2), lat(0, 101))),
        Box((cont(0, 1000, True), lat(2, 5), lat(0, 101))),
    ]
    assert [p.leaf_value for p in three_trees.paths[0]] == [F("-0.17"), F("0.85"), F("-0.02")]


def _grid_check(ens):
    grid = [range(int(a.lo), int(a.hi) + 1) for a in ens.schema]
    import itertools

    for j, tree in enumerate(ens.trees):
        paths = ens.paths[j]
        for x in itertools.product(*grid):
            holders = [p for p in paths if p.box.contains(x)]
            assert len(holders) == 1
            assert holders[0].leaf_id == tree.evaluate(x).leaf_id


@pytest.mark.parametrize("seed", range(10))
def test_random_tree_paths_partition_lattice_grid(seed):
    rng = random.Random(seed)
    schema = lattice_grid_schema([4, 5, 6])
    ids = iter(range(1000))
    trees = tuple(random_tree(rng, schema, 3, EnsembleKind.GBDT, ids, full=True) for _ in range(2))
    ens = TreeEnsemble(EnsembleKind.GBDT, trees, schema)
    _grid_check(ens)
    for ps in ens.paths:
        assert sum(measure(p.box) for p in ps) == 4 * 5 * 6


# -- prediction -------------------------------------------------------------------

def test_three_trees_prediction(three_trees):
    x = (500, 1, 40)
    assert three_trees.trees[0].evaluate(x).value == F("0.85")
    pred = predict(three_trees, x)
    assert pred.score == F("2.27")
    assert pred.label == 1
    assert pred.confidence == pytest.approx(1 / (1 + math.exp(-2.27)), abs=1e-12)
    assert round(pred.confidence, 2) == 0.91


def test_zero_leaves_tie():
    ens = load_ensemble(_doc([{"leaf": "0"}, {"leaf": "0"}]))
    pred = predict(ens, [3])
    assert pred.label == TIE and pred.score == 0 and pred.confidence == 0.5


def test_random_forest_prediction_and_tie():
    doc = _doc([{"leaf": "0.5"}, {"split": {"attr": "a", "threshold": "5"}, "left": {"leaf": "0.25"}, "right": {"leaf": "0.5"}}], kind="random_forest")
    ens = load_ensemble(doc)
    assert predict(ens, [1]).label == -1
    assert predict(ens, [1]).confidence == pytest.approx(0.625)
    assert predict(ens, [7]).label == TIE


def test_out_of_domain_input_rejected(three_trees):
    with pytest.raises(ValueError):
        predict(three_trees, (1001, 0, 0))
    with pytest.raises(ValueError):
        predict(three_trees, (5, F(1, 2), 0))


def test_three_trees_tuple_of_example(three_trees):
    t = path_tuple_of(three_trees, (500, 1, 40))
    assert t.leaf_ids == (1, 3, 7)
    assert t.box == Box((cont(300, 600), lat(0, 2), lat(0, 50)))
    assert t.measure == 30000


def test_tuple_at_max_corner(three_trees):
    corner = (1000, 4, 100)
    t = path_tuple_of(three_trees, corner)
    assert t.box.contains(corner)
    assert t.box[0].closed and t.box[0].hi == 1000
    assert t.box[2].hi == 101


def test_tuple_count_and_partition(three_trees):
    assert three_trees.tuple_count == 3 * 4 * 2 == 24
    tuples = list(enumerate_tuples(three_trees))
    assert sum(t.measure for t in tuples) == 505000
    assert union_measure([t.box for t in tuples]) == 505000


def test_random_points_match_cached_tuple(three_trees):
    rng = random.Random(3)
    for _ in range(50):
        x = random_point(three_trees.schema, rng)
        t = path_tuple_of(three_trees, x)
        assert t.box.contains(x)
        assert three_trees.label_of(t.score) == predict(three_trees, x).label


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_partition_property_random(seed):
    rng = random.Random(seed)
    ens = random_ensemble(rng)
    tuples = list(enumerate_tuples(ens))
    domain = measure(Box.full(ens.schema))
    assert sum(t.measure for t in tuples) == domain
    for _ in range(30):
        x = random_point(ens.schema, rng)
        inside = [t for t in tuples if t.box.contains(x)]
        assert len(inside) == 1
        assert ens.label_of(inside[0].score) == predict(ens, x).label
        assert ens.confidence_of(inside[0].score) == predict(ens, x).confidence


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_constancy_inside_tuple_box(seed):
    rng = random.Random(seed)
    ens = random_ensemble(rng)
    for t in list(enumerate_tuples(ens))[:5]:
        pts = []
        for _ in range(4):
            x = []
            for iv in t.box:
                if iv.lattice:
                    x.append(F(rng.randrange(int(iv.lo), int(iv.hi))))
                else:
                    x.append(iv.lo + (iv.hi - iv.lo) * F(rng.random()))
            pts.append(predict(ens, x))
        assert len({(p.label, p.confidence) for p in pts}) == 1


def test_tuple_count_is_product_of_leaf_counts():
    rng = random.Random(5)
    for _ in range(20):
        ens = random_ensemble(rng)
        assert ens.tuple_count == math.prod(len(t.leaves()) for t in ens.trees)


def test_tree_leaf_enumeration_and_paths_agree():
    t = Tree(Leaf(F(1), 0))
    schema = AttributeSchema((AttributeSpec("x", AttributeKind.INTEGER, F(0), F(3)),))
    (p,) = enumerate_paths(t, schema)
    assert p.box == Box((lat(0, 4),))
