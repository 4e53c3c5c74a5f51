"""Parallel any-time quantification over path tuples.

Three worker pools share one bound accumulator:

* *kappa* workers enumerate tuples whose confidence exceeds kappa and spawn
  one unfair task per tuple,
* *kappa-bar* workers accumulate the mass of low-confidence tuples until the
  kappa enumeration finishes and the exact value is known,
* *unfair* workers enumerate, for a fixed tuple, every partner tuple that
  admits a violating pair and add the measure of the resulting region.

Each worker owns one solver session and reuses it across tasks through
push/pop. A task whose blocking clauses exceed the threshold is split into
two tasks over disjoint leaf-id ranges of one tree.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

from .bounds import (
    ADD_T_KAPPA,
    ADD_T_KAPPA_BAR,
    ADD_T_S,
    FINALIZE_T_KAPPA_BAR,
    BoundsState,
    TracePoint,
)
from .geometry import Box, BoxSet, measure, union_measure, unfair_region
from .model import PathTuple, TreeEnsemble
from .schema import to_rational
from .smt import (
    DEFAULT_SOLVER,
    FIRST,
    SECOND,
    EncodingContext,
    Property,
    SolverError,
    SolverSession,
    block_tuple_term,
    fix_tuple_term,
    next_projected_solution,
    outside_box_term,
    phi_kappa,
    phi_unfair,
    restriction_term,
)

log = logging.getLogger(__name__)


class TaskKind(str, Enum):
    KAPPA = "kappa"
    KAPPA_BAR = "kappa_bar"
    UNFAIR = "unfair"


def split_workers(total: int) -> tuple[int, int, int]:
    """(kappa-bar, kappa, unfair) pool sizes, one slot reserved for the manager.

    17 gives the 2/4/10 split; smaller totals keep at least one worker per pool.
    """
    avail = max(3, total - 1)
    kb = max(1, round(avail * 2 / 16))
    k = max(1, round(avail * 4 / 16))
    return kb, k, max(1, avail - kb - k)


@dataclass
class Budget:
    timeout: float | None = 600.0
    workers: int = 17
    blocking_threshold: int | None = 100
    priority: bool = True
    box_blocking: bool = True
    solver: str = DEFAULT_SOLVER
    pools: tuple[int, int, int] | None = None  # overrides split_workers


class _Group:
    """Accumulator for all sub-tasks of one source tuple."""

    def __init__(self, source: PathTuple):
        self.source = source
        self.mass = source.measure
        self.outstanding = 1
        self.boxes: list[Box] = []
        self.tags: list = []
        self.lock = threading.Lock()

    def add(self, boxes: list[Box], tag) -> None:
        with self.lock:
            self.boxes.extend(boxes)
            self.tags.extend([tag] * len(boxes))

    def snapshot(self) -> list[Box]:
        with self.lock:
            return list(self.boxes)


@dataclass(eq=False)
class TaskDescriptor:
    kind: TaskKind
    ranges: dict[int, tuple[int, int]]
    blocked: list[tuple[int, ...]] = field(default_factory=list)
    source: PathTuple | None = None
    group: _Group | None = None

    @property
    def priority(self) -> Fraction:
        return self.source.measure if self.source is not None else Fraction(0)

    @property
    def blocking_count(self) -> int:
        return len(self.blocked)

    @property
    def which(self) -> str:
        return SECOND if self.kind is TaskKind.UNFAIR else FIRST


def full_ranges(ensemble: TreeEnsemble) -> dict[int, tuple[int, int]]:
    return {j: (0, len(ids) - 1) for j, ids in enumerate(ensemble.leaf_ids)}


def decompose_task(task: TaskDescriptor, ensemble: TreeEnsemble) -> tuple[TaskDescriptor, TaskDescriptor] | None:
    """Bisect the widest leaf-id range; blocked tuples follow their id. None if indivisible."""
    j, (lo, hi) = max(task.ranges.items(), key=lambda kv: (kv[1][1] - kv[1][0], -kv[0]))
    if hi == lo:
        return None
    mid = (lo + hi) // 2
    cut = ensemble.leaf_ids[j][mid]
    left_ranges, right_ranges = dict(task.ranges), dict(task.ranges)
    left_ranges[j] = (lo, mid)
    right_ranges[j] = (mid + 1, hi)
    left = [b for b in task.blocked if b[j] <= cut]
    right = [b for b in task.blocked if b[j] > cut]
    return (
        TaskDescriptor(task.kind, left_ranges, left, task.source, task.group),
        TaskDescriptor(task.kind, right_ranges, right, task.source, task.group),
    )


def initial_tasks(kind: TaskKind, ensemble: TreeEnsemble, count: int) -> list[TaskDescriptor]:
    """Up to ``count`` tasks covering the whole tuple space disjointly."""
    tasks = [TaskDescriptor(kind, full_ranges(ensemble))]
    while len(tasks) < count:
        tasks.sort(key=lambda t: -max(hi - lo for lo, hi in t.ranges.values()))
        halves = decompose_task(tasks[0], ensemble)
        if halves is None:
            break
        tasks[0:1] = halves
    return tasks


class TaskQueue:
    """Blocking queue ordered by descending priority, or FIFO."""

    def __init__(self, by_priority: bool = False):
        self.by_priority = by_priority
        self._heap: list = []
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._closed = False

    def put(self, task: TaskDescriptor) -> None:
        key = -task.priority if self.by_priority else 0
        with self._cv:
            heapq.heappush(self._heap, (key, next(self._seq), task))
            self._cv.notify()

    def get(self) -> TaskDescriptor | None:
        with self._cv:
            while not self._heap and not self._closed:
                self._cv.wait()
            if self._closed:
                return None
            return heapq.heappop(self._heap)[2]

    def pop_nowait(self) -> TaskDescriptor | None:
        with self._cv:
            return heapq.heappop(self._heap)[2] if self._heap else None

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def __len__(self) -> int:
        with self._cv:
            return len(self._heap)


def schedule(pending: TaskQueue, free_workers: int) -> list[TaskDescriptor]:
    """Take up to ``free_workers`` tasks in dispatch order."""
    out = []
    while len(out) < free_workers:
        task = pending.pop_nowait()
        if task is None:
            break
        out.append(task)
    return out


@dataclass
class QuantifyResult:
    measure: Fraction | None
    lb: Fraction
    ub: Fraction
    converged: bool
    vacuous: bool
    wall_time: float
    stats: dict
    region: BoxSet
    trace: list[TracePoint]
    t_s: Fraction
    t_kappa: Fraction
    t_kappa_bar: Fraction
    t_x: Fraction
    error: str | None = None
    interrupted: bool = False

    @property
    def gap(self) -> Fraction:
        return self.ub - self.lb


class _Cancelled(Exception):
    pass


class _Quantifier:
    def __init__(self, ctx: EncodingContext, budget: Budget, sink=None):
        self.ctx = ctx
        self.ensemble = ctx.ensemble
        self.budget = budget
        self.t_x = measure(Box.full(ctx.schema))
        self.state = BoundsState(self.t_x, sink)
        self.queues = {
            TaskKind.KAPPA: TaskQueue(),
            TaskKind.KAPPA_BAR: TaskQueue(),
            TaskKind.UNFAIR: TaskQueue(by_priority=budget.priority),
        }
        self.pools = dict(zip((TaskKind.KAPPA_BAR, TaskKind.KAPPA, TaskKind.UNFAIR), budget.pools or split_workers(budget.workers)))
        self._cv = threading.Condition()
        self._sessions: dict[int, tuple[TaskKind, SolverSession]] = {}
        self._kappa_outstanding = 0
        self._groups_outstanding = 0
        self._kappa_mass = Fraction(0)
        self._kappa_final = False
        self._stopping = False
        self.error: str | None = None
        self.region = BoxSet()
        self.stats = {
            "checks_kappa": 0,
            "checks_kappa_bar": 0,
            "checks_unfair": 0,
            "kappa_tuples": 0,
            "kappa_bar_tuples": 0,
            "unfair_tasks": 0,
            "partners": 0,
            "decompositions": 0,
            "retries": 0,
        }

    # -- bookkeeping -------------------------------------------------------

    def _bump(self, key: str, n: int = 1) -> None:
        with self._cv:
            self.stats[key] += n

    @property
    def done(self) -> bool:
        return self._kappa_final and self._groups_outstanding == 0

    def _cancelled(self, kind: TaskKind) -> bool:
        return self._stopping or (kind is TaskKind.KAPPA_BAR and self._kappa_final)

    def _open(self, kind: TaskKind) -> SolverSession:
        session = SolverSession(self.budget.solver)
        with self._cv:
            self._sessions[threading.get_ident()] = (kind, session)
        if kind is TaskKind.UNFAIR:
            session.load(phi_unfair(self.ctx))
        else:
            session.load(phi_kappa(self.ctx, negate=kind is TaskKind.KAPPA_BAR))
        return session

    def _discard(self, session: SolverSession | None) -> None:
        with self._cv:
            self._sessions.pop(threading.get_ident(), None)
        if session is not None:
            session.kill()
            session.close()

    def _kill_sessions(self, kinds) -> None:
        with self._cv:
            victims = [s for k, s in self._sessions.values() if k in kinds]
        for s in victims:
            s.kill()

    # -- task bodies ---------------------------------------------------------

    def _on_kappa(self, t: PathTuple) -> None:
        mu = t.measure
        self._bump("kappa_tuples")
        if mu == 0:
            return
        with self._cv:
            self._kappa_mass += mu
            self._groups_outstanding += 1
            self.stats["unfair_tasks"] += 1
        self.queues[TaskKind.UNFAIR].put(TaskDescriptor(TaskKind.UNFAIR, full_ranges(self.ensemble), source=t, group=_Group(t)))

    def _on_kappa_bar(self, t: PathTuple) -> None:
        self._bump("kappa_bar_tuples")
        self.state.apply({ADD_T_KAPPA_BAR: t.measure})

    def _on_unfair(self, task: TaskDescriptor, t: PathTuple, session: SolverSession) -> None:
        boxes = unfair_region(task.source.box, t.box, self.ctx.schema, self.ctx.epsilon, self.ctx.sensitive)
        if not boxes:
            log.warning("solver witness for %s/%s produced an empty region", task.source.leaf_ids, t.leaf_ids)
        self._bump("partners")
        task.group.add(boxes, (task.source.leaf_ids, t.leaf_ids))
        if self.budget.box_blocking:
            for b in boxes:
                session.add_box_block(outside_box_term(self.ctx, b, FIRST))

    def _run(self, task: TaskDescriptor, session: SolverSession):
        """Enumerate the task's solution space; returns sub-tasks if it decomposed."""
        ctx, kind = self.ctx, task.kind
        checks_key = f"checks_{kind.value}"
        session.push()
        try:
            if kind is TaskKind.UNFAIR:
                session.assert_(fix_tuple_term(ctx, task.source.leaf_ids, FIRST))
            r = restriction_term(ctx, task.ranges, task.which)
            if r != "true":
                session.assert_(r)
            for b in task.blocked:
                session.add_blocking(block_tuple_term(ctx, b, task.which))
            if kind is TaskKind.UNFAIR and self.budget.box_blocking:
                for b in task.group.snapshot():
                    session.add_box_block(outside_box_term(ctx, b, FIRST))
            threshold = self.budget.blocking_threshold
            while True:
                if self._cancelled(kind):
                    raise _Cancelled
                if threshold is not None and task.blocking_count > threshold:
                    halves = decompose_task(task, self.ensemble)
                    if halves is not None:
                        return halves
                self._bump(checks_key)
                sol = next_projected_solution(session, ctx, "p_pair" if kind is TaskKind.UNFAIR else "p")
                if sol is None:
                    return None
                t = sol.tuple2 if kind is TaskKind.UNFAIR else sol.tuple
                task.blocked.append(t.leaf_ids)
                if kind is TaskKind.KAPPA:
                    self._on_kappa(t)
                elif kind is TaskKind.KAPPA_BAR:
                    self._on_kappa_bar(t)
                else:
                    self._on_unfair(task, t, session)
                session.add_blocking(block_tuple_term(ctx, t.leaf_ids, task.which))
        finally:
            if session.proc.poll() is None:
                try:
                    session.pop()
                except SolverError:
                    pass

    def _finish(self, task: TaskDescriptor, halves) -> None:
        q = self.queues[task.kind]
        if halves is not None:
            self._bump("decompositions")
            if task.kind is TaskKind.KAPPA:
                with self._cv:
                    self._kappa_outstanding += 1
            elif task.kind is TaskKind.UNFAIR:
                with task.group.lock:
                    task.group.outstanding += 1
            for h in halves:
                q.put(h)
            return
        if task.kind is TaskKind.KAPPA:
            with self._cv:
                self._kappa_outstanding -= 1
                last = self._kappa_outstanding == 0
            if last:
                self.state.apply({FINALIZE_T_KAPPA_BAR: self.t_x - self._kappa_mass})
                with self._cv:
                    self._kappa_final = True
                    self._cv.notify_all()
                self.queues[TaskKind.KAPPA_BAR].close()
                self._kill_sessions({TaskKind.KAPPA_BAR})
        elif task.kind is TaskKind.UNFAIR:
            g = task.group
            with g.lock:
                g.outstanding -= 1
                last = g.outstanding == 0
            if last:
                self.state.apply({ADD_T_S: union_measure(g.boxes), ADD_T_KAPPA: g.mass})
                with self._cv:
                    for b, tag in zip(g.boxes, g.tags):
                        self.region.add(b, tag)
                    self._groups_outstanding -= 1
                    self._cv.notify_all()

    def _fail(self, message: str) -> None:
        with self._cv:
            if self.error is None:
                self.error = message
            self._cv.notify_all()

    def _worker(self, kind: TaskKind) -> None:
        session = None
        q = self.queues[kind]
        try:
            while True:
                task = q.get()
                if task is None:
                    return
                attempts = 0
                while True:
                    try:
                        if session is None:
                            session = self._open(kind)
                        halves = self._run(task, session)
                    except _Cancelled:
                        return
                    except SolverError as exc:
                        self._discard(session)
                        session = None
                        if self._cancelled(kind):
                            return
                        attempts += 1
                        if attempts > 1:
                            self._fail(f"{kind.value} task failed twice: {exc}")
                            return
                        self._bump("retries")
                        log.warning("%s task failed, retrying once: %s", kind.value, exc)
                        continue
                    self._finish(task, halves)
                    break
        except Exception as exc:  # keep the manager informed instead of hanging
            log.exception("worker crashed")
            self._fail(f"worker crashed: {exc!r}")
        finally:
            self._discard(session)

    # -- main loop ------------------------------------------------------------

    def run(self) -> QuantifyResult:
        start = time.monotonic()
        self.ensemble.paths  # warm caches before threads share them
        self.ensemble.path_by_leaf
        self.ensemble.leaf_ids
        kappa_tasks = initial_tasks(TaskKind.KAPPA, self.ensemble, self.pools[TaskKind.KAPPA])
        self._kappa_outstanding = len(kappa_tasks)
        for t in kappa_tasks:
            self.queues[TaskKind.KAPPA].put(t)
        for t in initial_tasks(TaskKind.KAPPA_BAR, self.ensemble, self.pools[TaskKind.KAPPA_BAR]):
            self.queues[TaskKind.KAPPA_BAR].put(t)
        threads = []
        for kind, n in self.pools.items():
            for i in range(n):
                th = threading.Thread(target=self._worker, args=(kind,), name=f"{kind.value}-{i}", daemon=True)
                th.start()
                threads.append(th)
        deadline = None if self.budget.timeout is None else start + self.budget.timeout
        interrupted = False
        try:
            with self._cv:
                while not self.done and self.error is None:
                    wait = 0.2 if deadline is None else min(0.2, deadline - time.monotonic())
                    if wait <= 0:
                        break
                    self._cv.wait(wait)
        except KeyboardInterrupt:
            interrupted = True
        self._stopping = True
        for q in self.queues.values():
            q.close()
        self._kill_sessions(set(TaskKind))
        for th in threads:
            th.join(timeout=5)
        return self._result(time.monotonic() - start, interrupted)

    def _result(self, wall: float, interrupted: bool) -> QuantifyResult:
        pt = self.state.snapshot()
        converged = self.done and self.error is None
        vacuous = self._kappa_final and self._kappa_mass == 0
        value = None
        if converged:
            if vacuous:
                log.warning("no input exceeds the confidence threshold; measure is vacuously 1")
                value = Fraction(1)
            else:
                value = 1 - pt.t_s / pt.t_kappa
                log.info("converged: 1 - T_s/T_kappa = %s (T_s/T_kappa = %s)", value, pt.t_s / pt.t_kappa)
                assert value == pt.lb == pt.ub
        stats = dict(self.stats)
        stats["trace_points"] = len(self.state.trace)
        return QuantifyResult(
            measure=value,
            lb=pt.lb,
            ub=pt.ub,
            converged=converged,
            vacuous=vacuous,
            wall_time=wall,
            stats=stats,
            region=self.region,
            trace=list(self.state.trace),
            t_s=pt.t_s,
            t_kappa=pt.t_kappa,
            t_kappa_bar=pt.t_kappa_bar,
            t_x=self.t_x,
            error=self.error,
            interrupted=interrupted,
        )


def make_context(ensemble: TreeEnsemble, property="fairness", epsilon=0, kappa=Fraction(1, 2)) -> EncodingContext:
    eps = ensemble.schema.resolve_epsilon(epsilon)
    return EncodingContext(ensemble, eps, to_rational(kappa), Property.parse(property))


def quantify(
    ensemble: TreeEnsemble,
    property="fairness",
    epsilon=0,
    kappa=Fraction(1, 2),
    budget: Budget | None = None,
    trace_sink=None,
) -> QuantifyResult:
    """Measure of the above-kappa inputs that admit no violating partner.

    ``epsilon`` is a rate (scalar) or a per-attribute vector. The result carries
    any-time bounds; ``measure`` is set only once every task has finished.
    """
    ctx = make_context(ensemble, property, epsilon, kappa)
    return _Quantifier(ctx, budget or Budget(), trace_sink).run()
