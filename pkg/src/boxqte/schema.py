"""Attribute schema: kinds, domains, sensitivity and tolerances."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Iterable, Mapping, Sequence


class SchemaError(ValueError):
    pass


class AttributeKind(str, Enum):
    CONTINUOUS = "continuous"
    INTEGER = "integer"
    CATEGORICAL = "categorical"

    @property
    def is_lattice(self) -> bool:
        return self is not AttributeKind.CONTINUOUS


def to_rational(value) -> Fraction:
    """Parse a decimal string, int, Fraction or float into an exact rational.

    Floats are converted through their shortest repr, so ``0.1`` becomes
    ``1/10`` rather than the binary expansion.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise SchemaError(f"not a number: {value!r}")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(repr(value))
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise SchemaError(f"not a rational: {value!r}") from exc
    try:
        return Fraction(value)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"not a rational: {value!r}") from exc


def format_rational(q: Fraction) -> str:
    """Render as a terminating decimal when possible, else ``p/q``."""
    q = Fraction(q)
    if q.denominator == 1:
        return str(q.numerator)
    d = q.denominator
    twos = fives = 0
    while d % 2 == 0:
        d //= 2
        twos += 1
    while d % 5 == 0:
        d //= 5
        fives += 1
    if d != 1:
        return f"{q.numerator}/{q.denominator}"
    digits = max(twos, fives)
    scaled = abs(q.numerator) * (10**digits // q.denominator)
    sign = "-" if q < 0 else ""
    text = str(scaled).rjust(digits + 1, "0")
    return f"{sign}{text[:-digits]}.{text[-digits:]}"


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    kind: AttributeKind
    lo: Fraction
    hi: Fraction
    # Fixed tolerance; None means "derive from the epsilon rate".
    epsilon: Fraction | None = None

    def __post_init__(self):
        if self.kind is AttributeKind.CONTINUOUS:
            if not self.lo < self.hi:
                raise SchemaError(f"{self.name}: continuous domain needs lo < hi")
        else:
            if self.lo.denominator != 1 or self.hi.denominator != 1:
                raise SchemaError(f"{self.name}: {self.kind.value} bounds must be integers")
            if self.lo > self.hi:
                raise SchemaError(f"{self.name}: domain needs lo <= hi")
        if self.epsilon is not None:
            if self.epsilon < 0:
                raise SchemaError(f"{self.name}: epsilon must be >= 0")
            if self.kind is AttributeKind.CATEGORICAL and self.epsilon != 0:
                raise SchemaError(f"{self.name}: categorical attributes take epsilon 0")

    @property
    def width(self) -> Fraction:
        return self.hi - self.lo

    def contains(self, value) -> bool:
        if not self.lo <= value <= self.hi:
            return False
        if self.kind.is_lattice:
            return Fraction(value).denominator == 1
        return True


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attributes plus the sensitive set.

    ``sensitive`` holds 0-based attribute positions.
    """

    attributes: tuple[AttributeSpec, ...]
    sensitive: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.attributes:
            raise SchemaError("schema has no attributes")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate attribute names")
        bad = [s for s in self.sensitive if not 0 <= s < len(self.attributes)]
        if bad:
            raise SchemaError(f"sensitive positions out of range: {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.attributes)

    def __iter__(self):
        return iter(self.attributes)

    def __getitem__(self, i: int) -> AttributeSpec:
        return self.attributes[i]

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def position(self, ref) -> int:
        """Resolve an attribute name or 0-based position."""
        if isinstance(ref, int) and not isinstance(ref, bool):
            if 0 <= ref < len(self.attributes):
                return ref
            raise SchemaError(f"attribute position {ref} out of range")
        for i, a in enumerate(self.attributes):
            if a.name == ref:
                return i
        raise SchemaError(f"unknown attribute {ref!r}")

    def with_sensitive(self, refs: Iterable) -> AttributeSchema:
        return replace(self, sensitive=frozenset(self.position(r) for r in refs))

    def epsilons(self, rate=0) -> tuple[Fraction, ...]:
        """Per-attribute tolerance: fixed value if set, else rate * width (0 for categorical)."""
        rate = to_rational(rate)
        if rate < 0:
            raise SchemaError("epsilon rate must be >= 0")
        out = []
        for a in self.attributes:
            if a.epsilon is not None:
                out.append(a.epsilon)
            elif a.kind is AttributeKind.CATEGORICAL:
                out.append(Fraction(0))
            else:
                out.append(rate * a.width)
        return tuple(out)

    def resolve_epsilon(self, epsilon) -> tuple[Fraction, ...]:
        """Accept either a rate (scalar) or an explicit per-attribute vector."""
        if isinstance(epsilon, (str, int, float, Fraction)):
            return self.epsilons(epsilon)
        eps = tuple(to_rational(e) for e in epsilon)
        if len(eps) != len(self.attributes):
            raise SchemaError(f"epsilon vector has {len(eps)} entries, schema has {len(self.attributes)}")
        for a, e in zip(self.attributes, eps):
            if e < 0:
                raise SchemaError(f"{a.name}: epsilon must be >= 0")
        return eps

    def contains(self, x: Sequence) -> bool:
        return len(x) == len(self.attributes) and all(a.contains(v) for a, v in zip(self.attributes, x))

    def to_json(self) -> list[dict]:
        out = []
        for a in self.attributes:
            item = {"name": a.name, "kind": a.kind.value, "lo": format_rational(a.lo), "hi": format_rational(a.hi)}
            if a.epsilon is not None:
                item["epsilon"] = format_rational(a.epsilon)
            out.append(item)
        return out


def attribute_from_json(item: Mapping, where: str = "attribute") -> AttributeSpec:
    try:
        name = item["name"]
        kind = AttributeKind(item["kind"])
        lo = to_rational(item["lo"])
        hi = to_rational(item["hi"])
    except KeyError as exc:
        raise SchemaError(f"{where}: missing field {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from exc
    eps = item.get("epsilon")
    try:
        return AttributeSpec(name, kind, lo, hi, None if eps is None else to_rational(eps))
    except SchemaError as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def schema_from_json(doc: Mapping) -> AttributeSchema:
    """Build a schema from ``{"attributes": [...], "sensitive": [...]}``.

    A bare list of attribute objects is accepted as well.
    """
    if isinstance(doc, list):
        doc = {"attributes": doc}
    attrs = doc.get("attributes")
    if not isinstance(attrs, list):
        raise SchemaError("schema: 'attributes' must be a list")
    specs = tuple(attribute_from_json(a, f"attributes[{i}]") for i, a in enumerate(attrs))
    schema = AttributeSchema(specs)
    return schema.with_sensitive(doc.get("sensitive", ()))
