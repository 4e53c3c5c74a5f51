import io
import json
from fractions import Fraction as F

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxqte.bounds import (
    ADD_T_KAPPA,
    ADD_T_KAPPA_BAR,
    ADD_T_S,
    FINALIZE_T_KAPPA_BAR,
    BoundsState,
    compute_bounds,
    update_bounds,
)


def test_initial_bounds_and_trace_line():
    sink = io.StringIO()
    st_ = BoundsState(F(505000), sink)
    assert (st_.lb, st_.ub) == (0, 1)
    first = json.loads(sink.getvalue().splitlines()[0])
    assert first["LB"] == "0" and first["UB"] == "1"
    assert set(first) == {"t_seconds", "LB", "UB", "T_s", "T_kappa", "T_kappa_bar"}


def test_compute_bounds_examples():
    assert compute_bounds(F(10), F(2), F(6), F(0)) == (F(4, 10), F(8, 10))
    assert compute_bounds(F(10), F(2), F(6), F(4)) == (F(4, 6), F(4, 6))
    assert compute_bounds(F(10), F(0), F(0), F(10)) == (1, 1)


def test_kappa_bar_after_finalize_is_ignored():
    s = BoundsState(F(10))
    update_bounds(s, ADD_T_KAPPA_BAR, 1)
    update_bounds(s, FINALIZE_T_KAPPA_BAR, 3)
    update_bounds(s, ADD_T_KAPPA_BAR, 2)
    assert s.t_kappa_bar == 3


def test_rejects_bad_deltas():
    s = BoundsState(F(10))
    with pytest.raises(ValueError):
        update_bounds(s, "add_nothing", 1)
    with pytest.raises(ValueError):
        update_bounds(s, ADD_T_S, -1)
    update_bounds(s, ADD_T_KAPPA_BAR, 4)
    with pytest.raises(ValueError):
        update_bounds(s, FINALIZE_T_KAPPA_BAR, 3)


@st.composite
def schedules(draw):
    """A partitioned input space and an interleaved stream of group completions."""
    groups = draw(st.lists(st.tuples(st.integers(1, 50), st.integers(0, 50)), min_size=0, max_size=12))
    groups = [(F(m), F(min(u, m))) for m, u in groups]
    below = draw(st.lists(st.integers(1, 50), max_size=8))
    events = [("group", g) for g in groups] + [("below", F(b)) for b in below]
    order = draw(st.permutations(events)) if events else []
    finalize_at = draw(st.integers(0, len(order)))
    return groups, [F(b) for b in below], list(order), finalize_at


@settings(max_examples=300, deadline=None)
@given(schedules())
def test_bounds_sandwich_and_monotone(sched):
    groups, below, order, finalize_at = sched
    t_kappa = sum((m for m, _ in groups), F(0))
    t_bar = sum(below, F(0))
    t_x = t_kappa + t_bar
    if t_x == 0:
        return
    truth = F(1) if t_kappa == 0 else 1 - sum((u for _, u in groups), F(0)) / t_kappa
    s = BoundsState(t_x)
    for k, (kind, item) in enumerate(order):
        if k == finalize_at:
            s.apply({FINALIZE_T_KAPPA_BAR: t_bar})
        if kind == "group":
            m, u = item
            s.apply({ADD_T_KAPPA: m, ADD_T_S: u})
        else:
            s.apply({ADD_T_KAPPA_BAR: item})
    if finalize_at == len(order):
        s.apply({FINALIZE_T_KAPPA_BAR: t_bar})
    trace = s.trace
    for p in trace:
        assert 0 <= p.lb <= truth <= p.ub <= 1
    for a, b in zip(trace, trace[1:]):
        assert b.lb >= a.lb and b.ub <= a.ub and b.t >= a.t
    assert trace[-1].lb == trace[-1].ub == truth
