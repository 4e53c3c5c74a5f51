"""Uniform sampling of counterexample inputs from a box union, with witness partners."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import IO, Sequence

import numpy as np

from .geometry import Box, BoxSet, disjoint_cells
from .model import TreeEnsemble
from .schema import to_rational
from .smt import Property

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Cell:
    spans: tuple[tuple[Fraction, Fraction], ...]
    tag: object

    @property
    def measure(self) -> Fraction:
        return math.prod((hi - lo for lo, hi in self.spans), start=Fraction(1))


def cells_of(region: BoxSet) -> list[Cell]:
    return [Cell(spans, tag) for spans, tag in disjoint_cells(region)]


def _lattice_axes(region: BoxSet) -> list[bool]:
    return [iv.lattice for iv in region.boxes[0].intervals]


def sample_cells(region: BoxSet, count: int, seed: int = 0) -> list[tuple[list, Cell]]:
    """``count`` points drawn uniformly from the union, each with the cell it came from."""
    if count < 0:
        raise ValueError("count must be >= 0")
    cells = cells_of(region) if len(region) else []
    cells = [c for c in cells if c.measure > 0]
    if count and not cells:
        log.warning("counterexample region is empty; no inputs sampled")
        return []
    if not count:
        return []
    lattice = _lattice_axes(region)
    rng = np.random.default_rng(seed)
    weights = np.array([float(c.measure) for c in cells])
    picks = rng.choice(len(cells), size=count, p=weights / weights.sum())
    out = []
    for k in picks:
        cell = cells[k]
        x = []
        for (lo, hi), lat in zip(cell.spans, lattice):
            if lat:
                x.append(int(rng.integers(int(lo), int(hi))))
            else:
                x.append(_uniform(rng, lo, hi))
        out.append((x, cell))
    return out


def _uniform(rng: np.random.Generator, lo: Fraction, hi: Fraction) -> float:
    """Float whose decimal reading lies in ``[lo, hi)``; redraws the rare miss at the edges."""
    a, b = float(lo), float(hi)
    while True:
        v = a + (b - a) * rng.random()
        if lo <= to_rational(v) < hi:
            return v
        if a == b:
            raise ValueError("cell too thin to sample in binary64")


def sample_idis(region: BoxSet, count: int, seed: int = 0) -> list[list]:
    return [x for x, _ in sample_cells(region, count, seed)]


def _pick_near(lo: Fraction, hi: Fraction, closed: bool, lattice: bool, v: Fraction, eps: Fraction):
    """A point of the partner interval within ``eps`` of ``v``."""
    if lo <= v and (v < hi or (closed and v == hi)) and (not lattice or v.denominator == 1):
        return v
    if v < lo:
        return lo
    if lattice:
        return hi - 1
    if closed:
        return hi
    return max(lo, v - eps)


def _other_value(iv_lo: Fraction, iv_hi: Fraction, lattice: bool, avoid: Fraction):
    if lattice:
        return iv_lo if iv_lo != avoid else iv_lo + 1
    mid = (iv_lo + iv_hi) / 2
    return mid if mid != avoid else (iv_lo + mid) / 2


def partner_for(ensemble: TreeEnsemble, x: Sequence, partner_leaves: Sequence[int], epsilon, property="fairness") -> list[Fraction]:
    """Construct a violating partner for ``x`` inside the box of ``partner_leaves``."""
    prop = Property.parse(property)
    schema = ensemble.schema
    eps = schema.resolve_epsilon(epsilon)
    box: Box = ensemble.tuple_from_leaves(partner_leaves).box
    sens = set() if prop is Property.ROBUSTNESS else set(schema.sensitive)
    x = [to_rational(v) for v in x]
    xp = []
    for i, iv in enumerate(box.intervals):
        if i in sens:
            xp.append(None)
            continue
        e = eps[i]
        if iv.lattice:
            e = Fraction(math.floor(e))
        xp.append(_pick_near(iv.lo, iv.hi, iv.closed, iv.lattice, x[i], e))
    if sens:
        # prefer a sensitive axis where the partner can take a value other than x's
        flexible = [j for j in sorted(sens) if not box[j].is_single]
        for j in sorted(sens):
            iv = box[j]
            if j == (flexible[0] if flexible else None):
                xp[j] = _other_value(iv.lo, iv.hi, iv.lattice, x[j])
            elif iv.contains(x[j]) and flexible:
                xp[j] = x[j]
            else:
                xp[j] = iv.lo
    return xp


def emit_idi_pairs(ensemble: TreeEnsemble, region: BoxSet, count: int, seed: int, epsilon, kappa, property="fairness") -> list[dict]:
    """Sample inputs and pair each with a partner built from its cell's provenance."""
    out = []
    for x, cell in sample_cells(region, count, seed):
        _, partner = cell.tag
        xp = partner_for(ensemble, x, partner, epsilon, property)
        sx, sp = ensemble.score([to_rational(v) for v in x]), ensemble.score(xp)
        out.append(
            {
                "x": x,
                "x_prime": [_plain(v, iv.lattice) for v, iv in zip(xp, region.boxes[0].intervals)],
                "class_x": ensemble.label_of(sx),
                "class_x_prime": ensemble.label_of(sp),
                "confidence_x": ensemble.confidence_of(sx),
            }
        )
    return out


def _plain(v: Fraction, lattice: bool):
    if lattice:
        return int(v)
    f = float(v)
    return f if to_rational(f) == v else str(v)


def write_jsonl(records, stream: IO[str]) -> None:
    for r in records:
        stream.write(json.dumps(r) + "\n")
