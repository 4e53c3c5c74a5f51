"""SMT-LIB2 encoding of tree ensembles and a pipe-driven solver session.

Variables: ``x_i``/``xp_i`` inputs, ``v_j``/``vp_j`` tree values, ``p_j``/``pp_j``
path ids, ``leaf_sum``/``leaf_sum_p`` the ensemble scores. Attribute and tree
indices in names are 1-based.
"""

from __future__ import annotations

import logging
import os
import select
import shlex
import subprocess
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Sequence

from .geometry import Box, Interval
from .model import PathTuple, TreeEnsemble, check_kappa
from .schema import format_rational

log = logging.getLogger(__name__)

DEFAULT_SOLVER = "z3 -in"


class Property(str, Enum):
    FAIRNESS = "fairness"
    ROBUSTNESS = "robustness"

    @classmethod
    def parse(cls, text) -> Property:
        if isinstance(text, Property):
            return text
        aliases = {"fair": cls.FAIRNESS, "fairness": cls.FAIRNESS, "robust": cls.ROBUSTNESS, "robustness": cls.ROBUSTNESS}
        try:
            return aliases[str(text).lower()]
        except KeyError:
            raise ValueError(f"unknown property {text!r}") from None


# -- literals -----------------------------------------------------------------

def real_lit(q) -> str:
    q = Fraction(q)
    if q < 0:
        return f"(- {real_lit(-q)})"
    text = format_rational(q)
    if "/" in text:
        return f"(/ {q.numerator}.0 {q.denominator}.0)"
    return text if "." in text else text + ".0"


def int_lit(q) -> str:
    q = Fraction(q)
    if q.denominator != 1:
        raise ValueError(f"not an integer: {q}")
    return str(q.numerator) if q >= 0 else f"(- {-q.numerator})"


def conj(terms: Sequence[str]) -> str:
    terms = list(terms)
    if not terms:
        return "true"
    return terms[0] if len(terms) == 1 else f"(and {' '.join(terms)})"


def disj(terms: Sequence[str]) -> str:
    terms = list(terms)
    if not terms:
        return "false"
    return terms[0] if len(terms) == 1 else f"(or {' '.join(terms)})"


# -- encoding -----------------------------------------------------------------

FIRST, SECOND = "first", "second"


@dataclass(frozen=True)
class EncodingContext:
    ensemble: TreeEnsemble
    epsilon: tuple[Fraction, ...]
    kappa: Fraction
    prop: Property = Property.FAIRNESS

    def __post_init__(self):
        object.__setattr__(self, "kappa", check_kappa(self.kappa))
        object.__setattr__(self, "prop", Property.parse(self.prop))
        if len(self.epsilon) != len(self.ensemble.schema):
            raise ValueError("epsilon vector does not match the schema")

    @property
    def schema(self):
        return self.ensemble.schema

    @property
    def sensitive(self) -> frozenset[int]:
        if self.prop is Property.ROBUSTNESS:
            return frozenset()
        return self.schema.sensitive

    @staticmethod
    def _sfx(which: str) -> str:
        return "" if which == FIRST else "p"

    def x(self, i: int, which: str = FIRST) -> str:
        return f"x{self._sfx(which)}_{i + 1}"

    def v(self, j: int, which: str = FIRST) -> str:
        return f"v{self._sfx(which)}_{j + 1}"

    def p(self, j: int, which: str = FIRST) -> str:
        return f"p{self._sfx(which)}_{j + 1}"

    def leaf_sum(self, which: str = FIRST) -> str:
        return "leaf_sum" if which == FIRST else "leaf_sum_p"


@dataclass
class Formula:
    declarations: list[str] = field(default_factory=list)
    assertions: list[str] = field(default_factory=list)

    def __add__(self, other: Formula) -> Formula:
        return Formula(self.declarations + other.declarations, self.assertions + other.assertions)

    def script(self, logic: str = "QF_LIRA") -> str:
        lines = [f"(set-logic {logic})"] + self.declarations + [f"(assert {a})" for a in self.assertions]
        return "\n".join(lines) + "\n"


def _domain(ctx: EncodingContext) -> Box:
    return Box.full(ctx.schema)


def interval_bounds(var: str, iv: Interval, dom: Interval) -> list[str]:
    """Membership of ``var`` in ``iv``: lower bound ``<=``, upper ``<`` except at a closed top edge."""
    if iv.lattice:
        lo = f"(<= {int_lit(iv.lo)} {var})"
        if iv.hi >= dom.hi:
            return [lo, f"(<= {var} {int_lit(dom.hi - 1)})"]
        return [lo, f"(< {var} {int_lit(iv.hi)})"]
    lo = f"(<= {real_lit(iv.lo)} {var})"
    if iv.closed:
        return [lo, f"(<= {var} {real_lit(iv.hi)})"]
    return [lo, f"(< {var} {real_lit(iv.hi)})"]


def box_term(ctx: EncodingContext, box: Box, which: str = FIRST) -> str:
    dom = _domain(ctx)
    terms = []
    for i, (iv, d) in enumerate(zip(box.intervals, dom.intervals)):
        terms.extend(interval_bounds(ctx.x(i, which), iv, d))
    return conj(terms)


def outside_box_term(ctx: EncodingContext, box: Box, which: str = FIRST) -> str:
    """Negation of box membership, omitting sides that coincide with the domain."""
    dom = _domain(ctx)
    terms = []
    for i, (iv, d) in enumerate(zip(box.intervals, dom.intervals)):
        var = ctx.x(i, which)
        lit = int_lit if iv.lattice else real_lit
        if iv.lo > d.lo:
            terms.append(f"(< {var} {lit(iv.lo)})")
        if iv.lattice:
            if iv.hi < d.hi:
                terms.append(f"(>= {var} {int_lit(iv.hi)})")
        elif iv.closed:
            if iv.hi < d.hi:
                terms.append(f"(> {var} {real_lit(iv.hi)})")
        else:
            terms.append(f"(>= {var} {real_lit(iv.hi)})")
    return disj(terms)


def declarations(ctx: EncodingContext, which: str = FIRST) -> Formula:
    decls, asserts = [], []
    dom = _domain(ctx)
    for i, a in enumerate(ctx.schema):
        sort = "Int" if a.kind.is_lattice else "Real"
        decls.append(f"(declare-const {ctx.x(i, which)} {sort})")
        asserts.append(conj(interval_bounds(ctx.x(i, which), dom[i], dom[i])))
    for j in range(ctx.ensemble.m):
        decls.append(f"(declare-const {ctx.v(j, which)} Real)")
        decls.append(f"(declare-const {ctx.p(j, which)} Int)")
    decls.append(f"(declare-const {ctx.leaf_sum(which)} Real)")
    return Formula(decls, asserts)


def encode_trees(ctx: EncodingContext, which: str = FIRST) -> Formula:
    """Path implications for every tree plus the leaf-sum definition."""
    out = []
    for j, paths in enumerate(ctx.ensemble.paths):
        for path in paths:
            lhs = box_term(ctx, path.box, which)
            rhs = f"(and (= {ctx.v(j, which)} {real_lit(path.leaf_value)}) (= {ctx.p(j, which)} {int_lit(path.leaf_id)}))"
            out.append(f"(=> {lhs} {rhs})")
    addends = [ctx.v(j, which) for j in range(ctx.ensemble.m)]
    if ctx.ensemble.base_score != 0:
        addends.insert(0, real_lit(ctx.ensemble.base_score))
    total = addends[0] if len(addends) == 1 else f"(+ {' '.join(addends)})"
    out.append(f"(= {ctx.leaf_sum(which)} {total})")
    return Formula([], out)


def encode_kappa(ctx: EncodingContext, negate: bool = False, which: str = FIRST) -> str:
    """Confidence strictly above kappa; for GBDT via the logit of kappa."""
    hi, lo = ctx.ensemble.kappa_bounds(ctx.kappa)
    s = ctx.leaf_sum(which)
    term = f"(or (> {s} {real_lit(hi)}) (< {s} {real_lit(lo)}))"
    return f"(not {term})" if negate else term


def encode_tolerance(ctx: EncodingContext, i: int) -> str:
    eps = ctx.epsilon[i]
    a = ctx.schema[i]
    x, xp = ctx.x(i), ctx.x(i, SECOND)
    if eps == 0:
        return f"(= {x} {xp})"
    lit = real_lit
    if a.kind.is_lattice:
        # integer difference: |d| <= eps  iff  |d| <= floor(eps)
        eps = Fraction(eps.numerator // eps.denominator)
        lit = int_lit
        if eps == 0:
            return f"(= {x} {xp})"
    d = f"(- {x} {xp})"
    return f"(and (<= {lit(-eps)} {d}) (<= {d} {lit(eps)}))"


def encode_unfair_pair(ctx: EncodingContext) -> list[str]:
    """Tolerance on non-sensitive axes, a sensitive difference, and opposite classes."""
    sens = ctx.sensitive
    out = [encode_tolerance(ctx, i) for i in range(len(ctx.schema)) if i not in sens]
    if ctx.prop is Property.FAIRNESS:
        diffs = []
        for j in sorted(sens):
            x, xp = ctx.x(j), ctx.x(j, SECOND)
            if ctx.schema[j].kind.is_lattice:
                diffs.append(f"(not (= {x} {xp}))")
            else:
                diffs.append(f"(or (< {x} {xp}) (> {x} {xp}))")
        out.append(disj(diffs))
    c = real_lit(ctx.ensemble.center)
    s, sp = ctx.leaf_sum(), ctx.leaf_sum(SECOND)
    out.append(f"(or (and (< {s} {c}) (> {sp} {c})) (and (> {s} {c}) (< {sp} {c})))")
    return out


def phi_unfair(ctx: EncodingContext) -> Formula:
    f = declarations(ctx, FIRST) + declarations(ctx, SECOND)
    f = f + encode_trees(ctx, FIRST) + encode_trees(ctx, SECOND)
    return f + Formula([], [encode_kappa(ctx)] + encode_unfair_pair(ctx))


def phi_kappa(ctx: EncodingContext, negate: bool = False) -> Formula:
    f = declarations(ctx, FIRST) + encode_trees(ctx, FIRST)
    return f + Formula([], [encode_kappa(ctx, negate)])


def restriction_term(ctx: EncodingContext, ranges: dict[int, tuple[int, int]], which: str = FIRST) -> str:
    """Restrict tree ``j``'s path id to positions ``lo..hi`` of its sorted leaf ids."""
    terms = []
    for j, (lo, hi) in sorted(ranges.items()):
        ids = ctx.ensemble.leaf_ids[j]
        if lo == 0 and hi == len(ids) - 1:
            continue
        p = ctx.p(j, which)
        terms.append(f"(<= {int_lit(ids[lo])} {p})")
        terms.append(f"(<= {p} {int_lit(ids[hi])})")
    return conj(terms)


def fix_tuple_term(ctx: EncodingContext, leaf_ids: Sequence[int], which: str = FIRST) -> str:
    return conj([f"(= {ctx.p(j, which)} {int_lit(i)})" for j, i in enumerate(leaf_ids)])


def block_tuple_term(ctx: EncodingContext, leaf_ids: Sequence[int], which: str = FIRST) -> str:
    return disj([f"(not (= {ctx.p(j, which)} {int_lit(i)}))" for j, i in enumerate(leaf_ids)])


# -- solver session -----------------------------------------------------------

class SolverError(RuntimeError):
    pass


class SolverTimeout(SolverError):
    pass


def parse_sexpr(text: str):
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()
    pos = 0

    def rec():
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            out = []
            while tokens[pos] != ")":
                out.append(rec())
            pos += 1
            return out
        return tok

    return rec()


def sexpr_value(e) -> Fraction:
    """Numeric value of a solver model term: numerals, ``(- t)`` and ``(/ a b)``."""
    if isinstance(e, str):
        return Fraction(e)
    head = e[0]
    if head == "-" and len(e) == 2:
        return -sexpr_value(e[1])
    if head == "/" and len(e) == 3:
        return sexpr_value(e[1]) / sexpr_value(e[2])
    raise SolverError(f"unsupported model value {e!r}")


class SolverSession:
    """An external SMT-LIB2 solver process driven over stdin/stdout.

    Tracks the blocking clauses asserted since the base formula; ``push`` and
    ``pop`` keep that list in step with the solver's assertion stack.
    """

    def __init__(self, command: str | Sequence[str] = DEFAULT_SOLVER, timeout: float | None = None):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        try:
            self.proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, bufsize=0
            )
        except OSError as exc:
            raise SolverError(f"cannot start solver {argv!r}: {exc}") from exc
        self.timeout = timeout
        self.blocking: list[str] = []
        self.box_blocks: list[str] = []
        self.checks = 0
        self._frames: list[tuple[int, int]] = []
        self._buf = b""
        self._closed = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def blocking_count(self) -> int:
        return len(self.blocking)

    def send(self, text: str) -> None:
        if self._closed:
            raise SolverError("session is closed")
        try:
            self.proc.stdin.write(text.encode())
            if not text.endswith("\n"):
                self.proc.stdin.write(b"\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as exc:
            raise SolverError(f"solver pipe closed: {exc}") from exc

    def load(self, formula: Formula) -> None:
        self.send(formula.script())

    def assert_(self, term: str) -> None:
        self.send(f"(assert {term})")

    def push(self) -> None:
        self._frames.append((len(self.blocking), len(self.box_blocks)))
        self.send("(push 1)")

    def pop(self) -> None:
        nb, nbox = self._frames.pop()
        del self.blocking[nb:]
        del self.box_blocks[nbox:]
        self.send("(pop 1)")

    def add_blocking(self, term: str) -> None:
        self.assert_(term)
        self.blocking.append(term)

    def add_box_block(self, term: str) -> None:
        self.assert_(term)
        self.box_blocks.append(term)

    def _readline(self, deadline: float | None) -> str:
        fd = self.proc.stdout.fileno()
        while b"\n" not in self._buf:
            wait = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                ready, _, _ = select.select([fd], [], [], wait)
            except (ValueError, OSError) as exc:
                raise SolverError("solver pipe closed") from exc
            if not ready:
                self.kill()
                raise SolverTimeout("solver did not answer in time")
            try:
                chunk = os.read(fd, 65536)
            except OSError as exc:
                raise SolverError(f"solver pipe closed: {exc}") from exc
            if not chunk:
                raise SolverError("solver exited unexpectedly")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line.decode().strip()

    def _response(self, deadline: float | None) -> str:
        while True:
            line = self._readline(deadline)
            if not line or line.startswith(";"):
                continue
            if line.startswith("(error") or line == "unsupported":
                raise SolverError(f"solver error: {line}")
            return line

    def _deadline(self, timeout: float | None) -> float | None:
        t = self.timeout if timeout is None else timeout
        return None if t is None else time.monotonic() + t

    def check(self, assumptions: Sequence[str] = (), timeout: float | None = None) -> bool:
        """Run check-sat; True for sat, False for unsat."""
        self.checks += 1
        if assumptions:
            self.send(f"(check-sat-assuming ({' '.join(assumptions)}))")
        else:
            self.send("(check-sat)")
        answer = self._response(self._deadline(timeout))
        if answer == "sat":
            return True
        if answer == "unsat":
            return False
        raise SolverError(f"solver answered {answer!r}")

    def get_values(self, names: Sequence[str], timeout: float | None = None) -> dict[str, Fraction]:
        self.send(f"(get-value ({' '.join(names)}))")
        deadline = self._deadline(timeout)
        text = self._response(deadline)
        while text.count("(") > text.count(")"):
            text += " " + self._readline(deadline)
        parsed = parse_sexpr(text)
        if not isinstance(parsed, list) or parsed[:1] == ["error"]:
            raise SolverError(f"bad get-value answer: {text}")
        return {name: sexpr_value(val) for name, val in parsed}

    def kill(self) -> None:
        """Terminate the solver; safe to call from another thread."""
        if self.proc.poll() is None:
            try:
                self.proc.kill()
            except OSError:
                pass

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            if self.proc.poll() is None:
                self.proc.stdin.write(b"(exit)\n")
                self.proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError):
            pass
        try:
            self.proc.stdin.close()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=1)
        except subprocess.TimeoutExpired:
            self.kill()
            self.proc.wait()
        self.proc.stdout.close()


# -- sessions over the encodings ---------------------------------------------

@dataclass(frozen=True)
class ProjectedSolution:
    tuple: PathTuple
    tuple2: PathTuple | None = None


def build_phi_unfair(ctx: EncodingContext, solver: str = DEFAULT_SOLVER, timeout: float | None = None) -> SolverSession:
    session = SolverSession(solver, timeout)
    try:
        session.load(phi_unfair(ctx))
    except SolverError:
        session.kill()
        raise
    return session


def build_phi_kappa(
    ctx: EncodingContext, negate: bool = False, solver: str = DEFAULT_SOLVER, timeout: float | None = None
) -> SolverSession:
    session = SolverSession(solver, timeout)
    try:
        session.load(phi_kappa(ctx, negate))
    except SolverError:
        session.kill()
        raise
    return session


def next_projected_solution(session: SolverSession, ctx: EncodingContext, project: str = "p") -> ProjectedSolution | None:
    """Next model projected on ``p`` or on ``p`` and ``p'``; None once exhausted.

    The caller blocks the returned tuple before asking again.
    """
    if not session.check():
        return None
    m = ctx.ensemble.m
    names = [ctx.p(j) for j in range(m)]
    if project == "p_pair":
        names += [ctx.p(j, SECOND) for j in range(m)]
    vals = session.get_values(names)
    ids = [int(vals[ctx.p(j)]) for j in range(m)]
    t1 = ctx.ensemble.tuple_from_leaves(ids)
    t2 = None
    if project == "p_pair":
        t2 = ctx.ensemble.tuple_from_leaves([int(vals[ctx.p(j, SECOND)]) for j in range(m)])
    return ProjectedSolution(t1, t2)


def model_inputs(session: SolverSession, ctx: EncodingContext, which: str = FIRST) -> list[Fraction]:
    names = [ctx.x(i, which) for i in range(len(ctx.schema))]
    vals = session.get_values(names)
    return [vals[n] for n in names]


def block_tuple(session: SolverSession, ctx: EncodingContext, t: PathTuple, target: str = "p") -> None:
    which = FIRST if target == "p" else SECOND
    session.add_blocking(block_tuple_term(ctx, t.leaf_ids, which))


def block_box(session: SolverSession, ctx: EncodingContext, region: Iterable[Box]) -> None:
    """Exclude first inputs lying in an already-counted counterexample region."""
    for box in region:
        session.add_box_block(outside_box_term(ctx, box, FIRST))
