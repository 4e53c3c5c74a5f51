"""Brute-force reference quantifier and counterexample checks for small ensembles."""

from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .geometry import BoxSet, union_measure, unfair_region
from .model import TIE, TreeEnsemble, enumerate_tuples
from .schema import to_rational
from .smt import Property

DEFAULT_CAP = 10**5


class OracleCapExceeded(ValueError):
    pass


@dataclass
class OracleReport:
    measure: Fraction
    unfair_region: BoxSet
    x_kappa_mass: Fraction
    violations: list[tuple[tuple[int, ...], tuple[int, ...]]] = field(default_factory=list)
    tuple_count: int = 0

    @property
    def unfair_mass(self) -> Fraction:
        return union_measure(self.unfair_region.boxes)


def _sensitive(ensemble: TreeEnsemble, prop: Property) -> frozenset[int]:
    return frozenset() if prop is Property.ROBUSTNESS else ensemble.schema.sensitive


def oracle_quantify(ensemble: TreeEnsemble, property="fairness", epsilon=0, kappa=Fraction(1, 2), cap: int = DEFAULT_CAP) -> OracleReport:
    """Inspect every ordered pair of tuple boxes and measure the violating region exactly."""
    prop = Property.parse(property)
    if ensemble.tuple_count > cap:
        raise OracleCapExceeded(f"{ensemble.tuple_count} path tuples exceed the cap of {cap}")
    schema = ensemble.schema
    eps = schema.resolve_epsilon(epsilon)
    kappa = to_rational(kappa)
    sens = _sensitive(ensemble, prop)
    tuples = list(enumerate_tuples(ensemble))
    region = BoxSet()
    violations = []
    mass = Fraction(0)
    if prop is Property.FAIRNESS and not sens:
        partners = []
    else:
        partners = [t for t in tuples if ensemble.label_of(t.score) != TIE]
    for t in tuples:
        if not ensemble.exceeds(t.score, kappa):
            continue
        mass += t.measure
        label = ensemble.label_of(t.score)
        for u in partners:
            if ensemble.label_of(u.score) == label:
                continue
            boxes = unfair_region(t.box, u.box, schema, eps, sens)
            if boxes:
                region.extend(boxes, (t.leaf_ids, u.leaf_ids))
                violations.append((t.leaf_ids, u.leaf_ids))
    value = Fraction(1) if mass == 0 else 1 - union_measure(region.boxes) / mass
    return OracleReport(value, region, mass, violations, ensemble.tuple_count)


def validate_counterexample(ensemble: TreeEnsemble, x: Sequence, x_prime: Sequence, epsilon=0, kappa=Fraction(1, 2), property="fairness") -> bool:
    """True iff ``(x, x_prime)`` violates the property at tolerance ``epsilon`` and confidence ``kappa``."""
    prop = Property.parse(property)
    schema = ensemble.schema
    eps = schema.resolve_epsilon(epsilon)
    x = [to_rational(v) for v in x]
    xp = [to_rational(v) for v in x_prime]
    if not (schema.contains(x) and schema.contains(xp)):
        return False
    sens = _sensitive(ensemble, prop)
    for i in range(len(schema)):
        if i not in sens and abs(x[i] - xp[i]) > eps[i]:
            return False
    if prop is Property.FAIRNESS and not any(x[j] != xp[j] for j in sens):
        return False
    s, sp = ensemble.score(x), ensemble.score(xp)
    if not ensemble.exceeds(s, kappa):
        return False
    a, b = ensemble.label_of(s), ensemble.label_of(sp)
    return TIE not in (a, b) and a != b


# -- pointwise reference, independent of the box geometry ----------------------

def _thresholds(ensemble: TreeEnsemble) -> dict[int, list[Fraction]]:
    out: dict[int, set] = {}
    for tree in ensemble.trees:
        for s in tree.splits():
            out.setdefault(s.attribute, set()).add(s.threshold)
    return {i: sorted(v) for i, v in out.items()}


def _axis_candidates(lo: Fraction, hi: Fraction, lattice: bool, cuts: list[Fraction]) -> list[Fraction]:
    """Values representing every prediction-relevant piece of ``[lo, hi]``."""
    if hi < lo:
        return []
    if lattice:
        return [Fraction(v) for v in range(math.ceil(lo), math.floor(hi) + 1)]
    marks = sorted({lo, hi} | {c for c in cuts if lo < c < hi})
    vals = set(marks)
    for a, b in zip(marks, marks[1:]):
        vals.add((a + b) / 2)
    return sorted(vals)


def has_violating_partner(ensemble: TreeEnsemble, x: Sequence, epsilon, kappa, property="fairness") -> bool:
    """Search partners of ``x`` directly over a finite candidate grid.

    On continuous axes predictions are constant between split thresholds, so
    the window ends, every threshold inside it and the midpoints between them
    cover all behaviours; lattice axes are enumerated in full.
    """
    prop = Property.parse(property)
    schema = ensemble.schema
    eps = schema.resolve_epsilon(epsilon)
    x = [to_rational(v) for v in x]
    s = ensemble.score(x)
    if not ensemble.exceeds(s, kappa):
        return False
    label = ensemble.label_of(s)
    sens = _sensitive(ensemble, prop)
    if prop is Property.FAIRNESS and not sens:
        return False
    cuts = _thresholds(ensemble)
    axes = []
    for i, a in enumerate(schema):
        lattice = a.kind.is_lattice
        if i in sens:
            vals = _axis_candidates(a.lo, a.hi, lattice, cuts.get(i, []))
        else:
            e = eps[i]
            if lattice:
                e = Fraction(math.floor(e))
            vals = _axis_candidates(max(a.lo, x[i] - e), min(a.hi, x[i] + e), lattice, cuts.get(i, []))
        axes.append(vals)
    for xp in itertools.product(*axes):
        if prop is Property.FAIRNESS and not any(xp[j] != x[j] for j in sens):
            continue
        lp = ensemble.label_of(ensemble.score(xp))
        if lp != TIE and lp != label:
            return True
    return False


def lattice_points(ensemble: TreeEnsemble) -> Iterable[tuple[Fraction, ...]]:
    schema = ensemble.schema
    if any(not a.kind.is_lattice for a in schema):
        raise ValueError("lattice sweep needs an integer/categorical schema")
    return itertools.product(*[[Fraction(v) for v in range(int(a.lo), int(a.hi) + 1)] for a in schema])


def sweep_measure(ensemble: TreeEnsemble, property="fairness", epsilon=0, kappa=Fraction(1, 2)) -> Fraction:
    """Exact measure on a lattice-only schema by checking every point."""
    kappa = to_rational(kappa)
    total = unfair = 0
    for x in lattice_points(ensemble):
        if not ensemble.exceeds(ensemble.score(x), kappa):
            continue
        total += 1
        unfair += has_violating_partner(ensemble, x, epsilon, kappa, property)
    return Fraction(1) if total == 0 else 1 - Fraction(unfair, total)


def random_point(schema, rng: random.Random) -> list[Fraction]:
    out = []
    for a in schema:
        if a.kind.is_lattice:
            out.append(Fraction(rng.randint(int(a.lo), int(a.hi))))
        else:
            out.append(a.lo + (a.hi - a.lo) * Fraction(rng.random()))
    return out


def sampled_measure(ensemble: TreeEnsemble, property="fairness", epsilon=0, kappa=Fraction(1, 2), samples: int = 2000, seed: int = 0) -> tuple[float, int]:
    """Monte Carlo estimate of the measure and the number of above-kappa samples used."""
    rng = random.Random(seed)
    kappa = to_rational(kappa)
    hits = unfair = 0
    for _ in range(samples):
        x = random_point(ensemble.schema, rng)
        if not ensemble.exceeds(ensemble.score(x), kappa):
            continue
        hits += 1
        unfair += has_violating_partner(ensemble, x, epsilon, kappa, property)
    return (1.0 if hits == 0 else 1 - unfair / hits), hits


def in_region(report: OracleReport, x: Sequence) -> bool:
    return any(b.contains(x) for b in report.unfair_region.boxes)
