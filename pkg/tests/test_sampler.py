import io
import json
import math
from fractions import Fraction as F

import pytest

from boxqte.geometry import Box, BoxSet, Interval
from boxqte.oracle import oracle_quantify, validate_counterexample
from boxqte.sampler import cells_of, emit_idi_pairs, sample_idis, write_jsonl
from boxqte.schema import to_rational


def cont(lo, hi):
    return Interval(F(lo), F(hi))


def test_empty_region_yields_nothing(caplog):
    assert sample_idis(BoxSet(), 10) == []
    assert sample_idis(BoxSet([Box((cont(0, 1),))]), 0) == []
    assert "empty" in caplog.text


def test_negative_count_rejected():
    with pytest.raises(ValueError):
        sample_idis(BoxSet([Box((cont(0, 1),))]), -1)


def test_unit_box_samples_stay_inside():
    region = BoxSet([Box((cont(0, 1), Interval(F(2), F(5), True)))])
    for x in sample_idis(region, 2000, seed=3):
        assert 0 <= to_rational(x[0]) < 1
        assert x[1] in (2, 3, 4) and isinstance(x[1], int)


def test_seed_reproducible():
    region = BoxSet([Box((cont(0, 1),)), Box((cont(5, 7),))])
    assert sample_idis(region, 50, seed=9) == sample_idis(region, 50, seed=9)
    assert sample_idis(region, 50, seed=9) != sample_idis(region, 50, seed=10)


def test_overlapping_boxes_are_sampled_uniformly():
    # [0,3) and [2,4) overlap; the union has measure 4, so [0,1) holds a quarter
    region = BoxSet([Box((cont(0, 3),)), Box((cont(2, 4),))])
    n = 40000
    xs = [x[0] for x in sample_idis(region, n, seed=1)]
    low = sum(1 for v in xs if v < 1)
    sd = math.sqrt(n * 0.25 * 0.75)
    assert abs(low - n / 4) < 5 * sd


def test_three_to_one_ratio():
    region = BoxSet([Box((cont(0, 3),)), Box((cont(10, 11),))])
    n = 20000
    first = sum(1 for x in sample_idis(region, n, seed=2) if x[0] < 3)
    sd = math.sqrt(n * 0.75 * 0.25)
    assert abs(first - 0.75 * n) < 5 * sd


def test_chi_square_over_ten_cells():
    stats = pytest.importorskip("scipy.stats")
    # ten disjoint cells of differing size in two dimensions
    boxes = [Box((cont(i, i + 1), cont(0, 1 + i % 3))) for i in range(10)]
    region = BoxSet(boxes)
    n = 100000
    counts = [0] * 10
    for x in sample_idis(region, n, seed=5):
        counts[int(x[0])] += 1
    sizes = [1 + i % 3 for i in range(10)]
    expected = [n * s / sum(sizes) for s in sizes]
    assert stats.chisquare(counts, expected).pvalue > 0.001


def test_cells_cover_union_once():
    region = BoxSet([Box((cont(0, 3),)), Box((cont(2, 4),))], ["a", "b"])
    cells = cells_of(region)
    assert sum(c.measure for c in cells) == 4
    assert {c.tag for c in cells} <= {"a", "b"}


def _region(ens, prop, eps, kappa):
    rep = oracle_quantify(ens, prop, eps, kappa)
    return rep.unfair_region


@pytest.mark.parametrize(
    "prop,eps,kappa",
    [("fairness", [5, 0, 5], "0.5"), ("fairness", [0, 0, 0], "0.5"), ("robustness", [100, 0, 10], "0.7"), ("fairness", [100, 0, 10], "0.5")],
)
def test_pairs_are_real_counterexamples(three_trees, prop, eps, kappa):
    region = _region(three_trees, prop, eps, kappa)
    pairs = emit_idi_pairs(three_trees, region, 1500, 4, eps, kappa, prop)
    assert len(pairs) == 1500
    for p in pairs:
        assert validate_counterexample(three_trees, p["x"], p["x_prime"], eps, kappa, prop)
        assert p["class_x"] != p["class_x_prime"]
        assert p["confidence_x"] > float(kappa)


def test_zero_tolerance_partner_changes_only_sensitive(three_trees):
    eps = [0, 0, 0]
    for p in emit_idi_pairs(three_trees, _region(three_trees, "fairness", eps, "0.5"), 500, 8, eps, "0.5"):
        x, xp = [to_rational(v) for v in p["x"]], [to_rational(v) for v in p["x_prime"]]
        assert x[0] == xp[0] and x[2] == xp[2] and x[1] != xp[1]


def test_jsonl_output(three_trees):
    eps = [5, 0, 5]
    pairs = emit_idi_pairs(three_trees, _region(three_trees, "fairness", eps, "0.5"), 3, 0, eps, "0.5")
    buf = io.StringIO()
    write_jsonl(pairs, buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(rows) == 3
    assert set(rows[0]) == {"x", "x_prime", "class_x", "class_x_prime", "confidence_x"}
