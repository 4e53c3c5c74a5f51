"""Exact interval and box algebra over mixed continuous/lattice axes.

Continuous axes are half-open ``[lo, hi)`` unless ``closed`` marks the top edge
as included (this only happens at the domain maximum). Lattice axes always use
integer endpoints with an exclusive ``hi``, so the number of lattice points in
an interval is ``hi - lo`` and both axis kinds share one measure formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

from .schema import AttributeSchema, format_rational, to_rational

ZERO = Fraction(0)


@dataclass(frozen=True)
class Interval:
    lo: Fraction
    hi: Fraction
    lattice: bool = False
    closed: bool = False

    @staticmethod
    def make_lattice(lo, hi) -> Interval:
        """Lattice interval holding the integers in ``[lo, hi)``."""
        return Interval(Fraction(math.ceil(lo)), Fraction(math.ceil(hi)), True, False)

    @property
    def is_empty(self) -> bool:
        if self.lattice:
            return self.hi <= self.lo
        return self.hi < self.lo or (self.hi == self.lo and not self.closed)

    @property
    def length(self) -> Fraction:
        return max(ZERO, self.hi - self.lo)

    @property
    def is_single(self) -> bool:
        """True for a lattice interval holding exactly one point."""
        return self.lattice and self.hi - self.lo == 1

    def contains(self, v) -> bool:
        if self.lattice:
            return Fraction(v).denominator == 1 and self.lo <= v < self.hi
        return self.lo <= v < self.hi or (self.closed and v == self.hi)

    def intersect(self, other: Interval) -> Interval:
        lo = max(self.lo, other.lo)
        if self.hi < other.hi:
            hi, closed = self.hi, self.closed
        elif other.hi < self.hi:
            hi, closed = other.hi, other.closed
        else:
            hi, closed = self.hi, self.closed and other.closed
        return Interval(lo, hi, self.lattice, closed)

    def split_at(self, t) -> tuple[Interval, Interval]:
        """Parts satisfying ``v < t`` and ``v >= t``."""
        t = Fraction(t)
        if self.lattice:
            c = Fraction(math.ceil(t))
            return (Interval(self.lo, min(self.hi, c), True), Interval(max(self.lo, c), self.hi, True))
        left = self if t > self.hi else Interval(self.lo, t, False, False)
        right = Interval(max(self.lo, t), self.hi, False, self.closed)
        return left, right

    def near(self, eps: Fraction, domain: Interval) -> Interval:
        """Points within ``eps`` of some point of this interval, clipped to ``domain``."""
        if eps == 0:
            return self.intersect(domain)
        if self.lattice:
            e = Fraction(math.floor(eps))
            return Interval(self.lo - e, self.hi + e, True).intersect(domain)
        lo = max(self.lo - eps, domain.lo)
        top = self.hi + eps
        if top > domain.hi:
            return Interval(lo, domain.hi, False, domain.closed)
        return Interval(lo, top, False, False)

    def minus_point(self, s: Fraction) -> list[Interval]:
        """Lattice difference with the single point ``s``."""
        parts = [Interval(self.lo, min(self.hi, s), True), Interval(max(self.lo, s + 1), self.hi, True)]
        return [p for p in parts if not p.is_empty]

    def __str__(self) -> str:
        lo, hi = format_rational(self.lo), format_rational(self.hi)
        if self.lattice:
            return f"[{lo},{hi})"
        return f"[{lo},{hi}{']' if self.closed else ')'}"


@dataclass(frozen=True)
class Box:
    intervals: tuple[Interval, ...]

    @staticmethod
    def full(schema: AttributeSchema) -> Box:
        ivs = []
        for a in schema:
            if a.kind.is_lattice:
                ivs.append(Interval(a.lo, a.hi + 1, True))
            else:
                ivs.append(Interval(a.lo, a.hi, False, True))
        return Box(tuple(ivs))

    def __len__(self) -> int:
        return len(self.intervals)

    def __getitem__(self, i: int) -> Interval:
        return self.intervals[i]

    def __iter__(self):
        return iter(self.intervals)

    @property
    def is_empty(self) -> bool:
        return any(iv.is_empty for iv in self.intervals)

    def contains(self, x: Sequence) -> bool:
        return all(iv.contains(v) for iv, v in zip(self.intervals, x))

    def replace(self, i: int, iv: Interval) -> Box:
        ivs = list(self.intervals)
        ivs[i] = iv
        return Box(tuple(ivs))

    def __str__(self) -> str:
        return "x".join(str(iv) for iv in self.intervals)

    def to_json(self) -> list:
        return [[format_rational(iv.lo), format_rational(iv.hi), iv.closed] for iv in self.intervals]

    @staticmethod
    def from_json(data: list, schema: AttributeSchema) -> Box:
        ivs = []
        for a, (lo, hi, closed) in zip(schema, data):
            ivs.append(Interval(to_rational(lo), to_rational(hi), a.kind.is_lattice, bool(closed) and not a.kind.is_lattice))
        return Box(tuple(ivs))


class BoxSet:
    """A list of possibly overlapping boxes, each with an optional provenance tag."""

    def __init__(self, boxes: Iterable[Box] = (), tags: Iterable | None = None):
        self.boxes: list[Box] = list(boxes)
        self.tags: list = list(tags) if tags is not None else [None] * len(self.boxes)
        if len(self.tags) != len(self.boxes):
            raise ValueError("tags and boxes differ in length")

    def add(self, box: Box, tag=None) -> None:
        self.boxes.append(box)
        self.tags.append(tag)

    def extend(self, boxes: Iterable[Box], tag=None) -> None:
        for b in boxes:
            self.add(b, tag)

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self) -> Iterator[Box]:
        return iter(self.boxes)

    def items(self):
        return zip(self.boxes, self.tags)

    def measure(self) -> Fraction:
        return union_measure(self.boxes)


def intersect(a: Box, b: Box) -> Box | None:
    """Componentwise intersection, or None when any axis empties."""
    out = tuple(x.intersect(y) for x, y in zip(a.intervals, b.intervals))
    box = Box(out)
    return None if box.is_empty else box


def measure(b: Box | None) -> Fraction:
    """Lebesgue length on continuous axes times lattice-point count on lattice axes."""
    if b is None or b.is_empty:
        return ZERO
    total = Fraction(1)
    for iv in b.intervals:
        total *= iv.length
    return total


def epsilon_neighborhood(b: Box, schema: AttributeSchema, epsilon: Sequence[Fraction]) -> Box:
    domain = Box.full(schema)
    return Box(tuple(iv.near(e, d) for iv, e, d in zip(b.intervals, epsilon, domain.intervals)))


def unfair_region(
    pi_box: Box,
    pj_box: Box,
    schema: AttributeSchema,
    epsilon: Sequence[Fraction],
    sensitive: Iterable[int] = (),
) -> list[Box]:
    """Points of ``pi_box`` that have a violating partner inside ``pj_box``.

    Non-sensitive axes are clipped to the epsilon-neighborhood of ``pj_box``.
    When every sensitive axis of ``pj_box`` is a single lattice value the
    partner's sensitive part is forced, so the point must differ from it on at
    least one sensitive axis; the result is then a union of boxes, one family
    per sensitive axis. Otherwise sensitive axes are unconstrained.
    """
    sensitive = sorted(set(sensitive))
    domain = Box.full(schema)
    ivs = list(pi_box.intervals)
    sens = set(sensitive)
    for i, (a, b) in enumerate(zip(pi_box.intervals, pj_box.intervals)):
        if i in sens:
            continue
        c = a.intersect(b.near(epsilon[i], domain[i]))
        if c.is_empty:
            return []
        ivs[i] = c
    if not sensitive:
        return [Box(tuple(ivs))]
    if not all(pj_box[j].is_single for j in sensitive):
        return [Box(tuple(ivs))]
    out = []
    for j in sensitive:
        for piece in pi_box[j].minus_point(pj_box[j].lo):
            parts = list(ivs)
            parts[j] = piece
            out.append(Box(tuple(parts)))
    return out


# -- union measure by coordinate compression ---------------------------------

def _positive(boxes: Iterable[Box]) -> list[tuple]:
    out = []
    for b in boxes:
        if b is None:
            continue
        spans = tuple((iv.lo, iv.hi) for iv in b.intervals)
        if all(hi > lo for lo, hi in spans):
            out.append(spans)
    return out


def _merge_1d(spans: list[tuple[Fraction, Fraction]]) -> Fraction:
    total = ZERO
    cur_lo = cur_hi = None
    for lo, hi in sorted(spans):
        if cur_hi is None or lo > cur_hi:
            if cur_hi is not None:
                total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        elif hi > cur_hi:
            cur_hi = hi
    if cur_hi is not None:
        total += cur_hi - cur_lo
    return total


def _slabs(items: list, axis: int):
    """Yield (lo, hi, active items) for each elementary slab along ``axis``,
    merging adjacent slabs whose active set is identical."""
    coords = sorted({s[axis][0] for s in items} | {s[axis][1] for s in items})
    prev = None
    for a, b in zip(coords, coords[1:]):
        key = tuple(k for k, s in enumerate(items) if s[axis][0] <= a and s[axis][1] >= b)
        active = [items[k] for k in key]
        if prev is not None and prev[3] == key:
            prev = (prev[0], b, prev[2], key)
            continue
        if prev is not None and prev[2]:
            yield prev[0], prev[1], prev[2]
        prev = (a, b, active, key)
    if prev is not None and prev[2]:
        yield prev[0], prev[1], prev[2]


def _sweep(items: list, axis: int) -> Fraction:
    n = len(items[0])
    if len(items) == 1:
        total = Fraction(1)
        for lo, hi in items[0][axis:]:
            total *= hi - lo
        return total
    if axis == n - 1:
        return _merge_1d([s[axis] for s in items])
    total = ZERO
    for a, b, active in _slabs(items, axis):
        total += (b - a) * _sweep(active, axis + 1)
    return total


def union_measure(boxes: Iterable[Box]) -> Fraction:
    """Exact measure of a union of possibly overlapping boxes."""
    items = _positive(boxes)
    if not items:
        return ZERO
    return _sweep(items, 0)


def disjoint_cells(boxset: BoxSet) -> Iterator[tuple[tuple[tuple[Fraction, Fraction], ...], object]]:
    """Decompose the union into disjoint cells, each with the tag of one covering box.

    Cells are yielded as tuples of ``(lo, hi)`` spans; only positive-measure
    cells are produced.
    """
    wrapped = []
    for b, tag in boxset.items():
        spans = tuple((iv.lo, iv.hi) for iv in b.intervals)
        if all(hi > lo for lo, hi in spans):
            wrapped.append(spans + ((tag,),))
    if not wrapped:
        return
    n = len(wrapped[0]) - 1

    def rec(items, axis, prefix):
        if axis == n:
            yield prefix, items[0][n][0]
            return
        for a, b, active in _slabs(items, axis):
            yield from rec(active, axis + 1, prefix + ((a, b),))

    yield from rec(wrapped, 0, ())
