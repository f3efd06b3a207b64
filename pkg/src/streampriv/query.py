"""Query, answer and budget vocabulary plus the key=value text form.

A query block looks like::

    query_id=42
    where=city = "San Francisco"
    where=speed >= 0
    buckets=numeric speed
    bucket=0 1
    bucket=1 11
    bucket=101 inf
    f=60000
    w=600000
    delta=60000
    inverted=false
    budget=zk 1.2
    error_target=0.05
    confidence=0.95

``where`` and ``bucket`` lines repeat and keep their order.  For regex
buckets the header line is ``buckets=regex <field>`` and every ``bucket=``
line holds one pattern.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Union

from .errors import BucketTypeError, QueryFormatError

Scalar = Union[float, int, str]

OPS = ("=", "!=", "<", "<=", ">", ">=", "contains")
_OP_ALIASES = {"≠": "!=", "≤": "<=", "≥": ">=", "==": "="}
_ORDERING_OPS = {"<", "<=", ">", ">="}
U64_MAX = 2**64 - 1


@dataclass(frozen=True)
class Condition:
    field: str
    op: str
    value: Scalar

    def matches(self, record: Mapping[str, Scalar]) -> bool:
        if self.field not in record:
            return False
        actual = record[self.field]
        op = self.op
        if op == "contains":
            return isinstance(actual, str) and str(self.value) in actual
        if op in _ORDERING_OPS and isinstance(actual, str) != isinstance(self.value, str):
            return False
        if op == "=":
            return actual == self.value
        if op == "!=":
            return actual != self.value
        if op == "<":
            return actual < self.value
        if op == "<=":
            return actual <= self.value
        if op == ">":
            return actual > self.value
        return actual >= self.value

    def problems(self) -> list[str]:
        out = []
        if not self.field:
            out.append("predicate field name is empty")
        if self.op not in OPS:
            out.append(f"unknown predicate operator {self.op!r}")
        elif self.op in _ORDERING_OPS and isinstance(self.value, str):
            out.append(f"operator {self.op} needs a numeric value")
        elif self.op == "contains" and not isinstance(self.value, str):
            out.append("operator contains needs a text value")
        return out


@dataclass(frozen=True)
class Predicate:
    """Conjunction of conditions; no conditions selects every record."""

    conditions: tuple[Condition, ...] = ()

    def matches(self, record: Mapping[str, Scalar]) -> bool:
        return all(c.matches(record) for c in self.conditions)


@dataclass(frozen=True)
class BucketSpec:
    kind: str  # "numeric" or "regex"
    field: str
    entries: tuple = ()

    @classmethod
    def from_edges(cls, field: str, edges: Iterable[float]) -> "BucketSpec":
        """Contiguous half-open intervals between consecutive edges."""
        e = list(edges)
        return cls("numeric", field, tuple((e[i], e[i + 1]) for i in range(len(e) - 1)))

    @property
    def n(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class Query:
    query_id: int
    predicate: Predicate
    buckets: BucketSpec
    answer_frequency_ms: int
    window_length_ms: int
    slide_interval_ms: int
    inverted: bool = False

    @property
    def n_buckets(self) -> int:
        return self.buckets.n


@dataclass(frozen=True)
class AnswerVector:
    bits: tuple[int, ...]
    query_id: int
    timestamp_ms: int


@dataclass(frozen=True)
class Budget:
    kind: str  # "zk" or "dp"
    epsilon: float
    error_target: float | None = None
    confidence_level: float = 0.95

    def __post_init__(self):
        if self.kind not in ("zk", "dp"):
            raise ValueError(f"budget kind must be 'zk' or 'dp', got {self.kind!r}")
        if not self.epsilon > 0:
            raise ValueError("budget epsilon must be positive")
        if not 0 < self.confidence_level < 1:
            raise ValueError("confidence level must lie in (0, 1)")
        if self.error_target is not None and not self.error_target > 0:
            raise ValueError("error target must be positive")


@dataclass(frozen=True)
class ExecutionParams:
    """Sampling probability s and coin probabilities p, q.

    ``test_mode`` admits s = 0 and p = 1, which give no privacy and exist only
    for exactness checks.
    """

    s: float
    p: float
    q: float
    test_mode: bool = field(default=False, compare=False)

    def __post_init__(self):
        lo_s = 0.0 <= self.s if self.test_mode else 0.0 < self.s
        if not (lo_s and self.s <= 1.0):
            raise ValueError(f"sampling probability out of range: {self.s}")
        hi_p = self.p <= 1.0 if self.test_mode else self.p < 1.0
        if not (0.0 < self.p and hi_p):
            raise ValueError(f"first-coin probability out of range: {self.p}")
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"second-coin probability out of range: {self.q}")


def validate_query(q: Query) -> list[str]:
    """Every invariant violation of ``q``; an empty list means valid."""
    out: list[str] = []
    if not 0 <= q.query_id <= U64_MAX:
        out.append("query_id is not a 64-bit unsigned integer")
    for name in ("answer_frequency_ms", "window_length_ms", "slide_interval_ms"):
        v = getattr(q, name)
        if not (isinstance(v, int) and v > 0):
            out.append(f"{name} must be a positive integer")
    if q.slide_interval_ms > q.window_length_ms:
        out.append("slide interval exceeds window length")
    for c in q.predicate.conditions:
        out.extend(c.problems())
    spec = q.buckets
    if spec.n == 0:
        out.append("empty bucket spec")
    if not spec.field:
        out.append("bucket field name is empty")
    if spec.kind == "numeric":
        for lo, hi in spec.entries:
            if not lo < hi:
                out.append(f"bucket [{lo}, {hi}) is empty")
        for (lo1, hi1), (lo2, hi2) in zip(spec.entries, spec.entries[1:]):
            if lo2 < lo1:
                out.append("buckets not sorted by lower bound")
            elif lo2 < hi1:
                out.append("buckets overlap")
    elif spec.kind == "regex":
        for pat in spec.entries:
            try:
                re.compile(pat)
            except (re.error, TypeError):
                out.append(f"bad bucket pattern {pat!r}")
    else:
        out.append(f"unknown bucket kind {spec.kind!r}")
    return out


@lru_cache(maxsize=1024)
def _compiled(pattern: str) -> re.Pattern:
    return re.compile(pattern)


def bucketize(value: Scalar | None, spec: BucketSpec) -> tuple[int, ...]:
    """Truthful answer bits for one record value.

    Numeric buckets are half-open; a value outside every bucket (or ``None``)
    gives all zeros.  Regex buckets set a bit for every matching rule.
    """
    if value is None:
        return (0,) * spec.n
    if spec.kind == "numeric":
        if isinstance(value, str) or isinstance(value, bool):
            raise BucketTypeError(f"numeric buckets cannot take {value!r}")
        return tuple(int(lo <= value < hi) for lo, hi in spec.entries)
    if not isinstance(value, str):
        raise BucketTypeError(f"regex buckets need text, got {value!r}")
    return tuple(int(_compiled(p).search(value) is not None) for p in spec.entries)


# ---------------------------------------------------------------- text form


def _format_number(x: float) -> str:
    if isinstance(x, int):
        return str(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def _format_scalar(v: Scalar) -> str:
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return _format_number(v)


def _parse_number(tok: str) -> float | int:
    try:
        return int(tok)
    except ValueError:
        return float(tok)


def _parse_scalar(tok: str) -> Scalar:
    tok = tok.strip()
    if len(tok) >= 2 and tok[0] == tok[-1] == '"':
        return re.sub(r"\\(.)", r"\1", tok[1:-1])
    try:
        return _parse_number(tok)
    except ValueError:
        return tok


_COND_RE = re.compile(r"^\s*([^\s=!<>≠≤≥]+)\s*(contains|==|!=|<=|>=|=|<|>|≠|≤|≥)\s*(.+?)\s*$")


def parse_condition(text: str) -> Condition:
    m = _COND_RE.match(text)
    if not m:
        raise QueryFormatError(f"cannot parse condition {text!r}")
    name, op, value = m.groups()
    return Condition(name, _OP_ALIASES.get(op, op), _parse_scalar(value))


def format_condition(c: Condition) -> str:
    return f"{c.field} {c.op} {_format_scalar(c.value)}"


def iter_key_values(text: str) -> Iterable[tuple[str, str]]:
    """(key, value) pairs of a key=value block; blank and ``#`` lines skipped."""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise QueryFormatError(f"line {lineno}: expected key=value, got {raw!r}")
        yield key.strip(), value.strip()


def _parse_bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise QueryFormatError(f"not a boolean: {v!r}")


def format_query_block(query: Query, budget: Budget | None = None) -> str:
    lines = [f"query_id={query.query_id}"]
    lines += [f"where={format_condition(c)}" for c in query.predicate.conditions]
    spec = query.buckets
    lines.append(f"buckets={spec.kind} {spec.field}")
    for entry in spec.entries:
        if spec.kind == "numeric":
            lines.append(f"bucket={_format_number(entry[0])} {_format_number(entry[1])}")
        else:
            lines.append(f"bucket={entry}")
    lines += [
        f"f={query.answer_frequency_ms}",
        f"w={query.window_length_ms}",
        f"delta={query.slide_interval_ms}",
        f"inverted={'true' if query.inverted else 'false'}",
    ]
    if budget is not None:
        lines.append(f"budget={budget.kind} {_format_number(budget.epsilon)}")
        if budget.error_target is not None:
            lines.append(f"error_target={_format_number(budget.error_target)}")
        lines.append(f"confidence={_format_number(budget.confidence_level)}")
    return "\n".join(lines) + "\n"


def parse_query_block(text: str) -> tuple[Query, Budget | None]:
    """Inverse of :func:`format_query_block`."""
    conds: list[Condition] = []
    entries: list = []
    scalars: dict[str, str] = {}
    kind = bucket_field = None
    for key, value in iter_key_values(text):
        if key == "where":
            conds.append(parse_condition(value))
        elif key == "buckets":
            parts = value.split(None, 1)
            if len(parts) != 2:
                raise QueryFormatError(f"buckets needs '<kind> <field>', got {value!r}")
            kind, bucket_field = parts
        elif key == "bucket":
            if kind is None:
                raise QueryFormatError("bucket line before buckets line")
            if kind == "numeric":
                parts = value.split()
                if len(parts) != 2:
                    raise QueryFormatError(f"numeric bucket needs 'lo hi', got {value!r}")
                try:
                    entries.append((_parse_number(parts[0]), _parse_number(parts[1])))
                except ValueError as exc:
                    raise QueryFormatError(f"bad bucket bound in {value!r}") from exc
            else:
                entries.append(value)
        else:
            scalars[key] = value
    try:
        query = Query(
            query_id=int(scalars["query_id"]),
            predicate=Predicate(tuple(conds)),
            buckets=BucketSpec(kind or "numeric", bucket_field or "", tuple(entries)),
            answer_frequency_ms=int(scalars["f"]),
            window_length_ms=int(scalars["w"]),
            slide_interval_ms=int(scalars["delta"]),
            inverted=_parse_bool(scalars.get("inverted", "false")),
        )
    except KeyError as exc:
        raise QueryFormatError(f"missing query field {exc.args[0]}") from exc
    except ValueError as exc:
        raise QueryFormatError(str(exc)) from exc
    budget = None
    if "budget" in scalars:
        parts = scalars["budget"].split()
        if len(parts) != 2:
            raise QueryFormatError(f"budget needs '<kind> <epsilon>', got {scalars['budget']!r}")
        try:
            budget = Budget(
                kind=parts[0],
                epsilon=float(parts[1]),
                error_target=float(scalars["error_target"]) if "error_target" in scalars else None,
                confidence_level=float(scalars.get("confidence", 0.95)),
            )
        except ValueError as exc:
            raise QueryFormatError(str(exc)) from exc
    return query, budget


def format_params(params: ExecutionParams) -> str:
    return f"s={params.s!r}\np={params.p!r}\nq={params.q!r}\n"


def parse_params(text: str) -> ExecutionParams:
    kv = dict(iter_key_values(text))
    try:
        return ExecutionParams(float(kv["s"]), float(kv["p"]), float(kv["q"]),
                               test_mode=_parse_bool(kv.get("test_mode", "false")))
    except KeyError as exc:
        raise QueryFormatError(f"missing parameter {exc.args[0]}") from exc


def parse_record(line: str) -> tuple[int, dict[str, Scalar]]:
    """``timestamp_ms,field=value,...`` to (timestamp, fields)."""
    parts = line.strip().split(",")
    try:
        ts = int(parts[0])
    except ValueError as exc:
        raise QueryFormatError(f"bad record timestamp in {line!r}") from exc
    fields: dict[str, Scalar] = {}
    for part in parts[1:]:
        if not part:
            continue
        key, sep, value = part.partition("=")
        if not sep:
            raise QueryFormatError(f"bad record field {part!r}")
        fields[key.strip()] = _parse_scalar(value)
    return ts, fields
