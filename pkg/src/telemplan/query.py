"""Dataflow queries, refinement levels and dependency chains.

A query is an ordered pipeline of ``filter``/``map``/``distinct``/``reduce``
operators over packet tuples.  Queries carry a hierarchical *refinement key*
(an IPv4 field) that can be executed at coarser prefix lengths first and
re-executed at finer ones for the keys that passed in the previous window.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Iterable, Mapping, NamedTuple, Sequence

PACKET_FIELDS = ("ts", "sIP", "dIP", "sPort", "dPort", "proto", "len", "tcpFlags")
HIERARCHICAL_FIELDS = frozenset({"sIP", "dIP"})
OP_KINDS = ("filter", "map", "distinct", "reduce")
STATEFUL_KINDS = frozenset({"distinct", "reduce"})
ROOT_LEVEL = 0
DEFAULT_LEVELS = (0, 8, 16, 24, 32)

_CMP = {
    "eq": lambda a, b: a == b,
    "ne": lambda a, b: a != b,
    "gt": lambda a, b: a > b,
    "ge": lambda a, b: a >= b,
    "lt": lambda a, b: a < b,
    "le": lambda a, b: a <= b,
    "in": lambda a, b: a in b,
}


class QueryError(ValueError):
    pass


def compare(cmp: str, a, b) -> bool:
    return _CMP[cmp](a, b)


def mask_ip(value: int, bits: int) -> int:
    """Keep the top ``bits`` bits of a 32-bit address."""
    if bits <= 0:
        return 0
    if bits >= 32:
        return value & 0xFFFFFFFF
    return value & ((0xFFFFFFFF << (32 - bits)) & 0xFFFFFFFF)


def level_label(level: int) -> str:
    return "*" if level == ROOT_LEVEL else str(level)


@dataclass(frozen=True)
class FieldRef:
    name: str
    mask_bits: int | None = None

    def __post_init__(self):
        if self.mask_bits is not None:
            if self.name not in HIERARCHICAL_FIELDS:
                raise QueryError(f"mask on non-hierarchical field {self.name!r}")
            if not 0 <= self.mask_bits <= 32:
                raise QueryError(f"mask bits out of range: {self.mask_bits}")

    def read(self, tup: Mapping[str, int]) -> int:
        v = tup[self.name]
        return v if self.mask_bits is None else mask_ip(v, self.mask_bits)

    def to_json(self):
        if self.mask_bits is None:
            return self.name
        return {"name": self.name, "mask": self.mask_bits}

    @classmethod
    def from_json(cls, obj) -> FieldRef:
        if isinstance(obj, str):
            return cls(obj)
        return cls(obj["name"], obj.get("mask"))


@dataclass(frozen=True)
class Clause:
    """``field [masked] <cmp> value``; ``cmp='in'`` takes a frozenset."""

    field: str
    cmp: str
    value: Any
    mask_bits: int | None = None

    def __post_init__(self):
        if self.cmp not in _CMP:
            raise QueryError(f"unknown comparison {self.cmp!r}")

    def holds(self, tup: Mapping[str, int]) -> bool:
        v = tup[self.field]
        if self.mask_bits is not None:
            v = mask_ip(v, self.mask_bits)
        return _CMP[self.cmp](v, self.value)


@dataclass(frozen=True)
class MapField:
    """One output column of a ``map``: a source field (optionally masked or
    integer-divided) or a constant."""

    name: str
    src: str | None = None
    const: int | None = None
    mask_bits: int | None = None
    div: int | None = None

    def eval(self, tup: Mapping[str, int]) -> int:
        if self.const is not None:
            return self.const
        v = tup[self.src or self.name]
        if self.mask_bits is not None:
            v = mask_ip(v, self.mask_bits)
        if self.div:
            v //= self.div
        return v


@dataclass(frozen=True)
class DataflowOp:
    kind: str
    where: tuple[Clause, ...] = ()
    threshold: int | None = None
    threshold_field: str | None = None
    threshold_cmp: str = "gt"
    fields: tuple[MapField, ...] | None = None
    masks: tuple[tuple[str, int], ...] = ()
    keys: tuple[FieldRef, ...] = ()
    value: str | None = None
    aggregate: str = "sum"

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise QueryError(f"unknown operator kind {self.kind!r}")
        if self.kind == "reduce":
            if not self.keys:
                raise QueryError("reduce needs at least one key")
            if self.aggregate != "sum":
                raise QueryError("only sum aggregation is supported")
        if self.threshold is not None and self.threshold_field is None:
            raise QueryError("threshold filter needs a field")
        if self.threshold_cmp not in _CMP:
            raise QueryError(f"unknown comparison {self.threshold_cmp!r}")

    @property
    def stateful(self) -> bool:
        return self.kind in STATEFUL_KINDS


@dataclass(frozen=True)
class QuerySpec:
    qid: int
    ops: tuple[DataflowOp, ...]
    refinement_key: FieldRef
    candidate_levels: tuple[int, ...] = DEFAULT_LEVELS
    name: str = ""
    group: int | None = None

    def __post_init__(self):
        if not self.ops:
            raise QueryError(f"query {self.qid} has no operators")
        levels = tuple(self.candidate_levels)
        if levels != tuple(sorted(set(levels))) or levels[0] != ROOT_LEVEL:
            raise QueryError(f"query {self.qid}: levels must be increasing and start at root")
        for _, op in stateful_operators(self):
            if op.keys and self.refinement_key.name not in {k.name for k in op.keys}:
                raise QueryError(
                    f"query {self.qid}: refinement key {self.refinement_key.name} "
                    "missing from a stateful operator's keys")

    @property
    def finest_level(self) -> int:
        return self.candidate_levels[-1]

    @property
    def n_stateful(self) -> int:
        return len(stateful_operators(self))

    def shape(self) -> QueryShape:
        return QueryShape(self.qid, tuple(self.candidate_levels), self.n_stateful)


@dataclass(frozen=True)
class QueryShape:
    """What planning needs to know about a query: its levels and how many
    stateful operators one refined instance contains."""

    qid: int
    candidate_levels: tuple[int, ...]
    n_stateful: int

    @property
    def finest_level(self) -> int:
        return self.candidate_levels[-1]

    def transitions(self):
        return list(combinations(self.candidate_levels, 2))


class OpRef(NamedTuple):
    """A stateful operator of a refined query instance; also the cost-matrix key."""

    qid: int
    prior: int
    level: int
    k: int

    def label(self) -> str:
        return f"q{self.qid}:{level_label(self.prior)}-{self.level}:{self.k}"


@dataclass(frozen=True)
class DependencyChain:
    chain_id: int
    operators: tuple[OpRef, ...]

    def __post_init__(self):
        qs = {(o.qid, o.prior, o.level) for o in self.operators}
        if len(qs) != 1:
            raise QueryError("chain operators must share one refined query instance")
        if [o.k for o in self.operators] != list(range(len(self.operators))):
            raise QueryError("chain order must follow pipeline order")

    def position(self, op: OpRef) -> int:
        """1-based chain position of ``op``."""
        return self.operators.index(op) + 1

    def __len__(self):
        return len(self.operators)


@dataclass(frozen=True)
class RefinementPlan:
    per_query: Mapping[int, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for qid, seq in self.per_query.items():
            if not seq or seq[0] != ROOT_LEVEL:
                raise QueryError(f"plan for query {qid} must start at root")
            if any(a >= b for a, b in zip(seq, seq[1:])):
                raise QueryError(f"plan for query {qid} must be strictly increasing")
            if len(seq) < 2:
                raise QueryError(f"plan for query {qid} has no refinement transition")

    def transitions(self, qid: int) -> list[tuple[int, int]]:
        seq = self.per_query[qid]
        return list(zip(seq, seq[1:]))

    def sort_key(self):
        return tuple(sorted((q, tuple(s)) for q, s in self.per_query.items()))

    def to_json(self) -> dict:
        return {str(q): list(s) for q, s in sorted(self.per_query.items())}

    @classmethod
    def from_json(cls, obj: Mapping) -> RefinementPlan:
        return cls({int(q): tuple(s) for q, s in obj.items()})

    def __hash__(self):
        return hash(self.sort_key())

    def __eq__(self, other):
        return isinstance(other, RefinementPlan) and self.sort_key() == other.sort_key()


def stateful_operators(q: QuerySpec) -> list[tuple[int, DataflowOp]]:
    return [(i, op) for i, op in enumerate(q.ops) if op.stateful]


def refine_query(q: QuerySpec, prior_level: int, level: int, upto_op: int | None = None,
                 allow_set: Iterable[int] | None = None) -> QuerySpec:
    """Synthesize the query that runs ``q`` at ``level`` after ``prior_level``.

    The refinement key is masked to ``level`` up front.  When ``allow_set`` is
    given (the prior window's ``prior_level`` output) only tuples whose key
    prefix is in it survive; ``None`` means the universe.  ``upto_op`` is the
    ordinal of the last stateful operator to keep; operators after it are
    dropped, except that keeping the last stateful operator keeps the
    trailing stateless tail.
    """
    levels = q.candidate_levels
    if prior_level not in levels or level not in levels or prior_level >= level:
        raise QueryError(f"invalid refinement pair ({prior_level}, {level}) for query {q.qid}")
    stateful = stateful_operators(q)
    if upto_op is None:
        upto_op = len(stateful) - 1
    if not stateful or not 0 <= upto_op < len(stateful):
        raise QueryError(f"query {q.qid} has no stateful operator {upto_op}")
    cut = len(q.ops) if upto_op == len(stateful) - 1 else stateful[upto_op][0] + 1
    key = q.refinement_key.name
    prefix: list[DataflowOp] = []
    if allow_set is not None and prior_level != ROOT_LEVEL:
        prefix.append(DataflowOp("filter", where=(
            Clause(key, "in", frozenset(allow_set), mask_bits=prior_level),)))
    prefix.append(DataflowOp("map", masks=((key, level),)))
    return QuerySpec(q.qid, tuple(prefix) + q.ops[:cut], q.refinement_key,
                     q.candidate_levels, q.name, q.group)


def _shape_of(q) -> QueryShape:
    return q.shape() if isinstance(q, QuerySpec) else q


def build_chains(plan: RefinementPlan, queries: Sequence[QuerySpec | QueryShape]) -> list[DependencyChain]:
    """One chain per (query, refinement transition), ordered by qid then level."""
    chains = []
    for q in sorted((_shape_of(q) for q in queries), key=lambda s: s.qid):
        if q.qid not in plan.per_query:
            raise QueryError(f"plan does not cover query {q.qid}")
        if q.n_stateful == 0:
            continue
        for prior, level in plan.transitions(q.qid):
            ops = tuple(OpRef(q.qid, prior, level, k) for k in range(q.n_stateful))
            chains.append(DependencyChain(len(chains), ops))
    return chains


def finest_plan(queries: Sequence[QuerySpec | QueryShape]) -> RefinementPlan:
    return RefinementPlan({s.qid: (ROOT_LEVEL, s.finest_level)
                           for s in map(_shape_of, queries)})


# --- JSON --------------------------------------------------------------------

def _op_from_json(obj: Mapping) -> DataflowOp:
    kind = obj["kind"]
    if kind == "filter":
        where = tuple(Clause(c["field"], c.get("cmp", "eq"), c["value"], c.get("mask"))
                      for c in obj.get("where", ()))
        return DataflowOp("filter", where=where, threshold=obj.get("threshold"),
                          threshold_field=obj.get("field"), threshold_cmp=obj.get("cmp", "gt"))
    if kind == "map":
        fields = None
        if "fields" in obj:
            fields = tuple(MapField(f["name"], f.get("src"), f.get("const"), f.get("mask"),
                                    f.get("div")) for f in obj["fields"])
        masks = tuple(sorted((k, int(v)) for k, v in obj.get("mask", {}).items()))
        return DataflowOp("map", fields=fields, masks=masks)
    if kind == "distinct":
        return DataflowOp("distinct", keys=tuple(FieldRef.from_json(k) for k in obj.get("keys", ())))
    if kind == "reduce":
        return DataflowOp("reduce", keys=tuple(FieldRef.from_json(k) for k in obj["keys"]),
                          value=obj.get("value", "count"), aggregate=obj.get("aggregate", "sum"))
    raise QueryError(f"unknown operator kind {kind!r}")


def _op_to_json(op: DataflowOp) -> dict:
    out: dict[str, Any] = {"kind": op.kind}
    if op.kind == "filter":
        if op.where:
            out["where"] = [{"field": c.field, "cmp": c.cmp, "value": c.value,
                             **({"mask": c.mask_bits} if c.mask_bits is not None else {})}
                            for c in op.where]
        if op.threshold is not None:
            out["field"] = op.threshold_field
            out["threshold"] = op.threshold
            if op.threshold_cmp != "gt":
                out["cmp"] = op.threshold_cmp
    elif op.kind == "map":
        if op.fields is not None:
            out["fields"] = [{k: v for k, v in (("name", f.name), ("src", f.src), ("const", f.const),
                                                ("mask", f.mask_bits), ("div", f.div))
                              if v is not None} for f in op.fields]
        if op.masks:
            out["mask"] = dict(op.masks)
    elif op.kind == "distinct":
        if op.keys:
            out["keys"] = [k.to_json() for k in op.keys]
    else:
        out.update(keys=[k.to_json() for k in op.keys], value=op.value, aggregate=op.aggregate)
    return out


def query_from_json(obj: Mapping) -> QuerySpec:
    return QuerySpec(
        qid=int(obj["qid"]),
        ops=tuple(_op_from_json(o) for o in obj["ops"]),
        refinement_key=FieldRef.from_json(obj["refinement_key"]),
        candidate_levels=tuple(obj.get("levels", DEFAULT_LEVELS)),
        name=obj.get("name", ""),
        group=obj.get("group"),
    )


def query_to_json(q: QuerySpec) -> dict:
    out = {"qid": q.qid, "refinement_key": q.refinement_key.to_json(),
           "levels": list(q.candidate_levels), "ops": [_op_to_json(o) for o in q.ops]}
    if q.name:
        out["name"] = q.name
    if q.group is not None:
        out["group"] = q.group
    return out


def load_queries(path) -> list[QuerySpec]:
    with open(path) as fh:
        return [query_from_json(o) for o in json.load(fh)]


def dump_queries(queries: Sequence[QuerySpec], path) -> None:
    with open(path, "w") as fh:
        json.dump([query_to_json(q) for q in queries], fh, indent=2)
        fh.write("\n")
