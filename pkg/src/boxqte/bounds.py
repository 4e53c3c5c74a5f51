"""Shared any-time bound accumulator."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import IO, Mapping

from .schema import format_rational

ZERO = Fraction(0)

ADD_T_S = "add_T_s"
ADD_T_KAPPA = "add_T_kappa"
ADD_T_KAPPA_BAR = "add_T_kappa_bar"
FINALIZE_T_KAPPA_BAR = "finalize_T_kappa_bar"
DELTAS = (ADD_T_S, ADD_T_KAPPA, ADD_T_KAPPA_BAR, FINALIZE_T_KAPPA_BAR)


@dataclass(frozen=True)
class TracePoint:
    t: float
    lb: Fraction
    ub: Fraction
    t_s: Fraction
    t_kappa: Fraction
    t_kappa_bar: Fraction

    @property
    def gap(self) -> Fraction:
        return self.ub - self.lb

    def to_json(self) -> dict:
        return {
            "t_seconds": f"{self.t:.6f}",
            "LB": format_rational(self.lb),
            "UB": format_rational(self.ub),
            "T_s": format_rational(self.t_s),
            "T_kappa": format_rational(self.t_kappa),
            "T_kappa_bar": format_rational(self.t_kappa_bar),
        }


def compute_bounds(t_x: Fraction, t_s: Fraction, t_kappa: Fraction, t_kappa_bar: Fraction) -> tuple[Fraction, Fraction]:
    d = t_x - t_kappa_bar
    if d == 0:
        return Fraction(1), Fraction(1)
    return (t_kappa - t_s) / d, (d - t_s) / d


class BoundsState:
    """T_X, T_s, T_kappa, T_kappa_bar and the derived LB/UB.

    Every update is applied under one lock together with the LB/UB recompute
    and the trace append, so readers never observe a half-applied change.
    """

    def __init__(self, t_x: Fraction, sink: IO[str] | None = None, clock=time.monotonic):
        if t_x <= 0:
            raise ValueError("the input space must have positive measure")
        self.t_x = Fraction(t_x)
        self.t_s = ZERO
        self.t_kappa = ZERO
        self.t_kappa_bar = ZERO
        self.kappa_bar_final = False
        self.lb, self.ub = ZERO, Fraction(1)
        self._clock = clock
        self._t0 = clock()
        self._lock = threading.Lock()
        self._sink = sink
        self.trace: list[TracePoint] = []
        self._record()

    def _record(self) -> None:
        point = TracePoint(self._clock() - self._t0, self.lb, self.ub, self.t_s, self.t_kappa, self.t_kappa_bar)
        self.trace.append(point)
        if self._sink is not None:
            self._sink.write(json.dumps(point.to_json()) + "\n")
            self._sink.flush()

    def apply(self, deltas: Mapping[str, Fraction]) -> bool:
        """Apply several deltas atomically; returns False if nothing changed."""
        with self._lock:
            changed = False
            for kind, amount in deltas.items():
                amount = Fraction(amount)
                if kind not in DELTAS:
                    raise ValueError(f"unknown bound delta {kind!r}")
                if amount < 0:
                    raise ValueError("bound deltas must be non-negative")
                if kind == ADD_T_S:
                    self.t_s += amount
                elif kind == ADD_T_KAPPA:
                    self.t_kappa += amount
                elif kind == ADD_T_KAPPA_BAR:
                    if self.kappa_bar_final:
                        continue  # superseded by the exact value
                    self.t_kappa_bar += amount
                else:
                    if amount < self.t_kappa_bar:
                        raise ValueError("finalized T_kappa_bar is below the accumulated value")
                    self.t_kappa_bar = amount
                    self.kappa_bar_final = True
                changed = changed or amount != 0 or kind == FINALIZE_T_KAPPA_BAR
            if changed:
                self.lb, self.ub = compute_bounds(self.t_x, self.t_s, self.t_kappa, self.t_kappa_bar)
                self._record()
            return changed

    def snapshot(self) -> TracePoint:
        with self._lock:
            return self.trace[-1]

    @property
    def gap(self) -> Fraction:
        with self._lock:
            return self.ub - self.lb


def update_bounds(state: BoundsState, delta: str, amount) -> None:
    state.apply({delta: Fraction(amount)})
