"""Region-refinement baseline producing an any-time lower bound.

Regions are checked for counterexample pairs whose first input lies inside
them; a region without any is counted as fair, otherwise it is split in two
and both halves are queued. Confidence is fixed at 1/2.
"""

from __future__ import annotations

import json
import logging
import math
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

from .geometry import Box, Interval, measure
from .model import TreeEnsemble
from .schema import format_rational, to_rational
from .smt import (
    DEFAULT_SOLVER,
    FIRST,
    SECOND,
    EncodingContext,
    Formula,
    Property,
    SolverError,
    SolverSession,
    box_term,
    conj,
    declarations,
    encode_kappa,
    encode_trees,
    encode_unfair_pair,
    real_lit,
)

log = logging.getLogger(__name__)

HALF = Fraction(1, 2)


class Strategy(str, Enum):
    RANDOM = "random"
    NODE = "node"
    NODE_RANDOM = "node_random"

    @classmethod
    def parse(cls, text) -> Strategy:
        if isinstance(text, Strategy):
            return text
        return cls(str(text).replace("-", "_").replace("+", "_"))


@dataclass(frozen=True)
class CegarPoint:
    t: float
    lb: Fraction
    t_fair: Fraction
    t_tie: Fraction

    def to_json(self) -> dict:
        return {
            "t_seconds": f"{self.t:.6f}",
            "LB": format_rational(self.lb),
            "UB": "1",
            "T_fair": format_rational(self.t_fair),
            "T_tie": format_rational(self.t_tie),
        }


@dataclass
class CegarResult:
    lb: Fraction
    t_fair: Fraction
    t_tie: Fraction
    t_x: Fraction
    regions_processed: int
    wall_time: float
    strategy: Strategy
    converged: bool
    unresolved: int
    witnessed: int = 0
    trace: list[CegarPoint] = field(default_factory=list)
    skipped: int = 0


# -- refinement ---------------------------------------------------------------

def _splittable(iv: Interval, dom: Interval, resolution: Fraction) -> bool:
    if iv.lattice:
        return iv.hi - iv.lo >= 2
    return iv.hi - iv.lo > resolution * (dom.hi - dom.lo)


def _midpoint_split(box: Box, i: int) -> tuple[Box, Box]:
    iv = box[i]
    if iv.lattice:
        mid = iv.lo + (iv.hi - iv.lo) // 2
    else:
        mid = (iv.lo + iv.hi) / 2
    left, right = iv.split_at(mid)
    return box.replace(i, left), box.replace(i, right)


def node_conditions(ensemble: TreeEnsemble) -> list[tuple[int, Fraction]]:
    seen = set()
    for tree in ensemble.trees:
        for s in tree.splits():
            t = s.threshold
            if ensemble.schema[s.attribute].kind.is_lattice:
                t = Fraction(math.ceil(t))
            seen.add((s.attribute, t))
    return sorted(seen)


def refine(
    region: Box,
    strategy,
    ensemble: TreeEnsemble,
    rng: random.Random,
    resolution: Fraction = Fraction(1, 10**6),
    sensitive: frozenset[int] = frozenset(),
    conditions: list[tuple[int, Fraction]] | None = None,
) -> tuple[Box, Box] | None:
    """Split ``region`` into two disjoint halves covering it; None when indivisible.

    ``random`` bisects a non-sensitive axis picked uniformly (falling back to
    sensitive axes once no other axis can be split), ``node`` cuts at a split
    threshold that strictly partitions the region, ``node_random`` tries node
    first.
    """
    strategy = Strategy.parse(strategy)
    dom = Box.full(ensemble.schema)
    if strategy in (Strategy.NODE, Strategy.NODE_RANDOM):
        conds = node_conditions(ensemble) if conditions is None else conditions
        live = [(i, t) for i, t in conds if region[i].lo < t < region[i].hi]
        if live:
            i, t = rng.choice(live)
            left, right = region[i].split_at(t)
            return region.replace(i, left), region.replace(i, right)
        if strategy is Strategy.NODE:
            return None
    axes = [i for i in range(len(region)) if i not in sensitive and _splittable(region[i], dom[i], resolution)]
    if not axes:
        axes = [i for i in sorted(sensitive) if _splittable(region[i], dom[i], resolution)]
    if not axes:
        return None
    return _midpoint_split(region, rng.choice(axes))


# -- solving ------------------------------------------------------------------

def _base_formula(ctx: EncodingContext) -> Formula:
    f = declarations(ctx, FIRST) + declarations(ctx, SECOND)
    f = f + encode_trees(ctx, FIRST) + encode_trees(ctx, SECOND)
    c = real_lit(ctx.ensemble.center)
    s = ctx.leaf_sum(FIRST)
    f.declarations += ["(declare-const g_unfair Bool)", "(declare-const g_tie Bool)", "(declare-const g_nontie Bool)"]
    f.assertions += [
        f"(=> g_unfair {conj([encode_kappa(ctx)] + encode_unfair_pair(ctx))})",
        f"(=> g_tie (= {s} {c}))",
        f"(=> g_nontie (not (= {s} {c})))",
    ]
    return f


class _Cegar:
    def __init__(self, ctx: EncodingContext, strategy: Strategy, workers: int, seed: int, resolution, solver, sink):
        self.ctx = ctx
        self.strategy = strategy
        self.workers = max(1, workers)
        self.seed = seed
        self.resolution = to_rational(resolution)
        self.solver = solver
        self.sink = sink
        self.base = _base_formula(ctx)
        self.conditions = node_conditions(ctx.ensemble)
        self.t_x = measure(Box.full(ctx.schema))
        self.t_fair = Fraction(0)
        self.t_tie = Fraction(0)
        self.queue: deque[Box] = deque([Box.full(ctx.schema)])
        self.in_flight = 0
        self.processed = 0
        self.unresolved = 0
        self.witnessed = 0  # single lattice points holding a counterexample
        self.skipped = 0
        self.stopping = False
        self.cv = threading.Condition()
        self.sessions: list[SolverSession] = []
        self.trace: list[CegarPoint] = []
        self.t0 = time.monotonic()
        self._record()

    @property
    def lb(self) -> Fraction:
        d = self.t_x - self.t_tie
        return Fraction(1) if d == 0 else self.t_fair / d

    def _record(self) -> None:
        pt = CegarPoint(time.monotonic() - self.t0, self.lb, self.t_fair, self.t_tie)
        self.trace.append(pt)
        if self.sink is not None:
            self.sink.write(json.dumps(pt.to_json()) + "\n")
            self.sink.flush()

    def _open(self) -> SolverSession:
        s = SolverSession(self.solver)
        with self.cv:
            self.sessions.append(s)
        s.load(self.base)
        return s

    def _classify(self, session: SolverSession, region: Box) -> str:
        """'fair', 'tie', or 'split'."""
        session.push()
        try:
            session.assert_(box_term(self.ctx, region, FIRST))
            if session.check(["g_unfair"]):
                return "split"
            if not session.check(["g_tie"]):
                return "fair"
            if not session.check(["g_nontie"]):
                return "tie"
            return "split"
        finally:
            session.pop()

    def _worker(self, index: int) -> None:
        rng = random.Random(self.seed * 7919 + index)
        session = None
        try:
            while True:
                with self.cv:
                    while not self.queue and self.in_flight and not self.stopping:
                        self.cv.wait()
                    if self.stopping or not self.queue:
                        self.cv.notify_all()
                        return
                    region = self.queue.popleft()
                    self.in_flight += 1
                children = None
                verdict = None
                try:
                    if session is None:
                        session = self._open()
                    verdict = self._classify(session, region)
                except SolverError as exc:
                    if session is not None:
                        session.kill()
                    session = None
                    if not self.stopping:
                        log.warning("solver failure on region %s, skipping: %s", region, exc)
                    verdict = "skip"
                if verdict == "split":
                    children = refine(region, self.strategy, self.ctx.ensemble, rng, self.resolution, self.ctx.sensitive, self.conditions)
                with self.cv:
                    self.in_flight -= 1
                    if verdict == "skip":
                        if not self.stopping:
                            self.skipped += 1
                    else:
                        self.processed += 1
                        mu = measure(region)
                        if verdict == "fair" and mu:
                            self.t_fair += mu
                            self._record()
                        elif verdict == "tie" and mu:
                            self.t_tie += mu
                            self._record()
                        elif verdict == "split":
                            if children is None:
                                if all(iv.is_single for iv in region):
                                    self.witnessed += 1
                                else:
                                    self.unresolved += 1
                            else:
                                self.queue.extend(children)
                    self.cv.notify_all()
        finally:
            if session is not None:
                session.close()

    def run(self, timeout: float | None) -> CegarResult:
        threads = [threading.Thread(target=self._worker, args=(i,), daemon=True) for i in range(self.workers)]
        for th in threads:
            th.start()
        deadline = None if timeout is None else self.t0 + timeout
        try:
            with self.cv:
                while self.queue or self.in_flight:
                    wait = 0.2 if deadline is None else min(0.2, deadline - time.monotonic())
                    if wait <= 0:
                        break
                    self.cv.wait(wait)
        except KeyboardInterrupt:
            pass
        with self.cv:
            self.stopping = True
            converged = not self.queue and not self.in_flight and self.unresolved == 0 and self.skipped == 0
            self.cv.notify_all()
            sessions = list(self.sessions)
        for s in sessions:
            s.kill()
        for th in threads:
            th.join(timeout=5)
        with self.cv:
            return CegarResult(
                lb=self.lb,
                t_fair=self.t_fair,
                t_tie=self.t_tie,
                t_x=self.t_x,
                regions_processed=self.processed,
                wall_time=time.monotonic() - self.t0,
                strategy=self.strategy,
                converged=converged,
                unresolved=self.unresolved,
                witnessed=self.witnessed,
                trace=list(self.trace),
                skipped=self.skipped,
            )


def cegar_quantify(
    ensemble: TreeEnsemble,
    property="fairness",
    epsilon=0,
    strategy="node_random",
    timeout: float | None = 600.0,
    workers: int = 1,
    seed: int = 0,
    resolution=Fraction(1, 10**6),
    solver: str = DEFAULT_SOLVER,
    kappa=HALF,
    trace_sink=None,
) -> CegarResult:
    """Lower bound on the fair proportion of non-tie inputs.

    Only regions proven free of counterexamples and of ties add to the fair
    mass; regions made up entirely of ties leave the denominator.
    """
    if to_rational(kappa) != HALF:
        raise ValueError("the refinement baseline supports kappa = 1/2 only")
    eps = ensemble.schema.resolve_epsilon(epsilon)
    ctx = EncodingContext(ensemble, eps, HALF, Property.parse(property))
    return _Cegar(ctx, Strategy.parse(strategy), workers, seed, resolution, solver, trace_sink).run(timeout)
