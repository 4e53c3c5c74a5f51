"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import itertools
import math
import random
import time
from fractions import Fraction as F
from pathlib import Path

import pytest

from boxqte.cegar import cegar_quantify
from boxqte.geometry import Box, measure
from boxqte.model import EnsembleKind, TreeEnsemble, enumerate_tuples, path_tuple_of, predict
from boxqte.oracle import oracle_quantify, random_point, validate_counterexample
from boxqte.quantifier import Budget, quantify
from boxqte.sampler import emit_idi_pairs
from boxqte.smt import EncodingContext, Property, SolverSession, phi_unfair
from ensembles import random_ensemble, random_schema, random_tree

pytestmark = [pytest.mark.solver, pytest.mark.slow]

GOLDEN = Path(__file__).parent / "data" / "three_trees_fairness.smt2"


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    return emit


def test_c1_worked_examples(three_trees, report):
    t0 = time.perf_counter()
    x = (500, 1, 40)
    first = three_trees.trees[0].evaluate(x).value
    pred = predict(three_trees, x)
    sig = 1 / (1 + math.exp(-2.27))
    tup = path_tuple_of(three_trees, x)
    want_box = Box.full(three_trees.schema)
    want_box = want_box.replace(0, want_box[0].split_at(300)[1].split_at(600)[0])
    want_box = want_box.replace(1, want_box[1].split_at(2)[0]).replace(2, want_box[2].split_at(50)[0])
    count = sum(1 for _ in itertools.product(*three_trees.paths))
    elapsed = time.perf_counter() - t0
    ok = (
        first == F("0.85")
        and pred.score == F("2.27")
        and abs(pred.confidence - sig) <= 1e-6
        and round(pred.confidence, 2) == 0.91
        and tup.box == want_box
        and str(tup.box) == "[300,600)x[0,2)x[0,50)"
        and count == 24
        and elapsed < 1
    )
    report("C1 worked examples", ok, f"T1={first} sum={pred.score} conf={pred.confidence:.6f} box={tup.box} tuples={count} {elapsed:.3f}s")


def _assert_terms(text):
    body = "\n".join(line for line in text.splitlines() if not line.lstrip().startswith(";"))
    out, depth, start = [], 0, 0
    for i, ch in enumerate(body):
        if ch == "(":
            start = i if depth == 0 else start
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth == 0 and body[start:].startswith("(assert"):
                out.append(body[start + len("(assert") : i].strip())
    return out


def test_c2_golden_encoding(three_trees, report):
    ctx = EncodingContext(three_trees, (F(5), F(0), F(5)), F("0.8"), Property.FAIRNESS)
    emitted = phi_unfair(ctx)
    golden = _assert_terms(GOLDEN.read_text())
    claim = f"(not (= (and {' '.join(golden)}) (and {' '.join(emitted.assertions)} (> leaf_sum 0.0))))"
    t0 = time.perf_counter()
    with SolverSession() as s:
        s.send("(set-logic QF_LIRA)\n" + "\n".join(emitted.declarations) + f"\n(assert {claim})\n")
        sat = s.check()
    elapsed = time.perf_counter() - t0
    literal = "(> leaf_sum 1.3862943611198908)" in emitted.script()
    ok = not sat and literal and elapsed < 5
    report("C2 golden encoding", ok, f"equivalence {'sat' if sat else 'unsat'} in {elapsed:.2f}s, literal {'exact' if literal else 'missing'}")


C3_CONFIGS = list(itertools.product(["fairness", "robustness"], ["0", "0.1"], ["0.5", "0.7"]))


@pytest.fixture(scope="module")
def c3_runs():
    t0 = time.perf_counter()
    runs = []
    for seed in range(200):
        ens = random_ensemble(random.Random(seed))
        for prop, rate, kappa in C3_CONFIGS:
            eps = ens.schema.epsilons(rate)
            res = quantify(ens, prop, eps, kappa, Budget(timeout=120))
            truth = oracle_quantify(ens, prop, eps, kappa).measure
            runs.append((seed, prop, rate, kappa, res, truth))
    return runs, time.perf_counter() - t0


def test_c3_oracle_equivalence(c3_runs, report):
    runs, elapsed = c3_runs
    bad = [(s, p, r, k) for s, p, r, k, res, truth in runs if not res.converged or res.measure != truth]
    ok = not bad and len({r[0] for r in runs}) >= 200 and elapsed < 600
    report("C3 oracle equivalence", ok, f"{len(runs) - len(bad)}/{len(runs)} runs exact over 200 ensembles in {elapsed:.0f}s; mismatches {bad[:3]}")


def test_c4_anytime_sandwich(c3_runs, report):
    runs, _ = c3_runs
    bad = []
    points = 0
    for seed, prop, rate, kappa, res, truth in runs:
        tr = res.trace
        points += len(tr)
        for k, p in enumerate(tr):
            d = res.t_x - p.t_kappa_bar
            gap = F(0) if d == 0 else 1 - p.t_kappa / d
            fine = p.lb <= truth <= p.ub and p.ub - p.lb == gap
            if k:
                fine = fine and tr[k - 1].lb <= p.lb and tr[k - 1].ub >= p.ub
            if not fine:
                bad.append((seed, prop, rate, kappa, k))
                break
    report("C4 anytime sandwich", not bad, f"{points} trace points over {len(runs)} runs; violations {bad[:3]}")


def test_c5_enhancement_soundness(report):
    calls = {}
    bad = []
    for seed in range(20):
        rng = random.Random(5000 + seed)
        ens = random_ensemble(rng)
        prop = rng.choice(["fairness", "robustness"])
        rate, kappa = rng.choice(["0.1", "0.2"]), rng.choice(["0.5", "0.6"])
        measures = set()
        for prio, decomp, boxb in itertools.product([True, False], repeat=3):
            # a low threshold so decomposition actually fires on small fixtures
            res = quantify(ens, prop, rate, kappa, Budget(priority=prio, blocking_threshold=2 if decomp else None, box_blocking=boxb))
            measures.add(res.measure if res.converged else None)
            calls[(prio, decomp, boxb)] = calls.get((prio, decomp, boxb), 0) + res.stats["checks_unfair"]
        if len(measures) != 1 or None in measures:
            bad.append(seed)
    fewer = all(calls[(p, d, True)] <= calls[(p, d, False)] for p in (True, False) for d in (True, False))
    detail = ", ".join(f"prio={p} decomp={d}: {calls[(p, d, True)]} vs {calls[(p, d, False)]}" for p in (True, False) for d in (True, False))
    report("C5 enhancement soundness", not bad and fewer, f"disagreeing fixtures {bad}; unfair-task checks box-block on vs off: {detail}")


def test_c6_cegar_soundness(three_trees, report):
    bad, slow = [], []
    fixtures = [(three_trees, "fairness", three_trees.schema.resolve_epsilon([5, 0, 5]))]
    for seed in range(6):
        rng = random.Random(6000 + seed)
        ens = random_ensemble(rng)
        fixtures.append((ens, rng.choice(["fairness", "robustness"]), ens.schema.epsilons(rng.choice(["0", "0.1"]))))
    for k, (ens, prop, eps) in enumerate(fixtures):
        truth = oracle_quantify(ens, prop, eps, "0.5").measure
        for strategy in ("random", "node", "node_random"):
            res = cegar_quantify(ens, prop, eps, strategy, timeout=3, seed=k)
            if any(p.lb > truth for p in res.trace) or res.lb > truth:
                bad.append((k, strategy))
    lattice_runs = 0
    for seed in range(10):
        rng = random.Random(7000 + seed)
        ens = random_ensemble(rng, lattice_only=True)
        prop = ["fairness", "robustness"][seed % 2]
        eps = ens.schema.epsilons(["0", "0.1"][seed // 2 % 2])
        truth = oracle_quantify(ens, prop, eps, "0.5").measure
        res = cegar_quantify(ens, prop, eps, "node_random", timeout=60, seed=seed)
        lattice_runs += 1
        if any(p.lb > truth for p in res.trace):
            bad.append(("lattice", seed))
        if not (res.converged and res.lb == truth and res.wall_time < 60):
            slow.append(seed)
    report(
        "C6 CEGAR soundness",
        not bad and not slow,
        f"{len(fixtures)} fixtures x 3 strategies bounded; {lattice_runs - len(slow)}/{lattice_runs} lattice fixtures converged exactly; unsound {bad} unconverged {slow}",
    )


def _sampling_fixtures(three_trees):
    out = [(three_trees, p, three_trees.schema.resolve_epsilon(e), k) for p, e, k in [
        ("fairness", [5, 0, 5], "0.5"), ("fairness", [5, 0, 5], "0.8"), ("robustness", "0.1", "0.7"), ("fairness", "0.1", "0.5"),
    ]]
    seed = 0
    while len(out) < 10:
        rng = random.Random(8000 + seed)
        seed += 1
        ens = random_ensemble(rng)
        prop, rate, kappa = rng.choice(["fairness", "robustness"]), rng.choice(["0.1", "0.2"]), "0.5"
        eps = ens.schema.epsilons(rate)
        if oracle_quantify(ens, prop, eps, kappa).measure < 1:
            out.append((ens, prop, eps, kappa))
    return out


def test_c7_sampler_validity(three_trees, report):
    total = valid = 0
    for k, (ens, prop, eps, kappa) in enumerate(_sampling_fixtures(three_trees)):
        res = quantify(ens, prop, eps, kappa)
        for p in emit_idi_pairs(ens, res.region, 10_000, k, eps, kappa, prop):
            total += 1
            valid += validate_counterexample(ens, p["x"], p["x_prime"], eps, kappa, prop)
    empty = []
    for ens, prop, eps in [(three_trees.with_sensitive([]), "fairness", (F(5), F(0), F(5))), (three_trees, "fairness", (F(0), F(0), F(0)))]:
        res = quantify(ens, prop, eps, "0.99" if ens is three_trees else "0.5")
        empty.append((res.measure, len(emit_idi_pairs(ens, res.region, 1000, 0, eps, "0.5", prop))))
    ok = total == 100_000 and valid == total and all(m == 1 and n == 0 for m, n in empty)
    report("C7 sampler validity", ok, f"{valid}/{total} pairs valid over 10 fixtures; empty-region fixtures (measure, IDIs) {empty}")


def test_c8_partition_property(report):
    bad = []
    points = 0
    for seed in range(100):
        rng = random.Random(9000 + seed)
        ens = random_ensemble(rng)
        tuples = list(enumerate_tuples(ens))
        if sum(t.measure for t in tuples) != measure(Box.full(ens.schema)):
            bad.append((seed, "mass"))
            continue
        for _ in range(10_000):
            x = random_point(ens.schema, rng)
            holders = [t for t in tuples if t.box.contains(x)]
            points += 1
            if len(holders) != 1 or ens.label_of(holders[0].score) != predict(ens, x).label:
                bad.append((seed, x))
                break
    report("C8 partition property", not bad, f"100 ensembles, {points} points (10^4 per ensemble) each in exactly one tuple box with matching class; failures {bad[:3]}")


def test_c9_scalability_smoke(report):
    rng = random.Random(2024)
    schema = random_schema(rng, 6)
    ids = iter(range(10**6))
    trees = tuple(random_tree(rng, schema, 3, EnsembleKind.GBDT, ids, full=True) for _ in range(50))
    ens = TreeEnsemble(EnsembleKind.GBDT, trees, schema)
    res = quantify(ens, "fairness", "0.1", "0.5", Budget(timeout=120, workers=17))
    gaps = [p.gap for p in res.trace]
    narrowing = all(b <= a for a, b in zip(gaps, gaps[1:])) and gaps[-1] < gaps[0]
    ok = res.error is None and res.gap < 1 and narrowing and res.wall_time < 600
    report("C9 scalability smoke", ok, f"50 trees depth 3, 6 attributes: [{float(res.lb):.4f}, {float(res.ub):.4f}] gap {float(res.gap):.4f} after {res.wall_time:.0f}s, converged={res.converged}")
