"""Packet traces, per-window query execution and cost matrices."""
from __future__ import annotations

import csv
import ipaddress
import json
import math
import random
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .query import (
    ROOT_LEVEL,
    DataflowOp,
    OpRef,
    QueryShape,
    QuerySpec,
    compare,
    mask_ip,
    refine_query,
)

TRACE_HEADER = ("ts", "sip", "dip", "sport", "dport", "proto", "len", "tcpflags")
DEFAULT_ENTRY_BITS = {"reduce": 32, "distinct": 1}

_FIELD_LIMITS = {
    "sPort": 0xFFFF,
    "dPort": 0xFFFF,
    "proto": 0xFF,
    "tcpFlags": 0xFF,
}


class TraceFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class PacketRecord:
    ts: float
    sIP: int
    dIP: int
    sPort: int = 0
    dPort: int = 0
    proto: int = 6
    len: int = 64
    tcpFlags: int = 0

    def as_tuple(self) -> dict:
        return {"ts": self.ts, "sIP": self.sIP, "dIP": self.dIP, "sPort": self.sPort,
                "dPort": self.dPort, "proto": self.proto, "len": self.len,
                "tcpFlags": self.tcpFlags}


@dataclass(frozen=True)
class CostEntry:
    B: int
    n_in: int
    n_out: int

    def __post_init__(self):
        if self.B < 0 or self.n_out < 0 or self.n_in < 0:
            raise ValueError(f"negative cost entry {self}")
        if self.n_out > self.n_in:
            raise ValueError(f"n_out > n_in in {self}")


ZERO_COST = CostEntry(0, 0, 0)


@dataclass(frozen=True)
class CostMatrix:
    window: int
    entries: Mapping[OpRef, CostEntry] = field(default_factory=dict)

    def __getitem__(self, key: OpRef) -> CostEntry:
        return self.entries[key]

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __len__(self):
        return len(self.entries)

    def to_json(self) -> dict:
        rows = [{"qid": k.qid, "i": k.prior, "j": k.level, "k": k.k,
                 "B": e.B, "n_in": e.n_in, "n_out": e.n_out}
                for k, e in sorted(self.entries.items())]
        return {"window": self.window, "entries": rows}

    @classmethod
    def from_json(cls, obj: Mapping) -> CostMatrix:
        entries = {OpRef(int(r["qid"]), int(r["i"]), int(r["j"]), int(r["k"])):
                   CostEntry(int(r["B"]), int(r["n_in"]), int(r["n_out"]))
                   for r in obj["entries"]}
        return cls(int(obj["window"]), entries)


@dataclass(frozen=True)
class WorkloadConfig:
    window_seconds: float = 3.0
    speedup: float = 1.0
    entry_bits: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_ENTRY_BITS))

    def __post_init__(self):
        if self.window_seconds <= 0:
            raise ValueError("window_seconds must be positive")
        if self.speedup <= 0:
            raise ValueError("speedup must be positive")


# --- trace I/O ---------------------------------------------------------------

def _parse_ip(text: str) -> int:
    text = text.strip()
    if "." in text:
        return int(ipaddress.IPv4Address(text))
    v = int(text)
    if not 0 <= v <= 0xFFFFFFFF:
        raise ValueError(f"address out of range: {v}")
    return v


def load_trace(path) -> list[PacketRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip().lower() for h in header) != TRACE_HEADER:
            raise TraceFormatError(1, f"expected header {','.join(TRACE_HEADER)}")
        last_ts = -math.inf
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(TRACE_HEADER):
                raise TraceFormatError(lineno, f"expected {len(TRACE_HEADER)} fields, got {len(row)}")
            try:
                ts = float(row[0])
                vals = dict(sPort=int(row[3]), dPort=int(row[4]), proto=int(row[5]),
                            len=int(row[6]), tcpFlags=int(row[7]))
                rec = PacketRecord(ts, _parse_ip(row[1]), _parse_ip(row[2]), **vals)
            except ValueError as exc:
                raise TraceFormatError(lineno, str(exc)) from None
            for name, hi in _FIELD_LIMITS.items():
                v = getattr(rec, name)
                if not 0 <= v <= hi:
                    raise TraceFormatError(lineno, f"{name}={v} out of range 0..{hi}")
            if rec.len < 0:
                raise TraceFormatError(lineno, f"negative length {rec.len}")
            if ts < last_ts:
                raise TraceFormatError(lineno, "timestamps must be non-decreasing")
            last_ts = ts
            records.append(rec)
    return records


def write_trace(records: Iterable[PacketRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in records:
            w.writerow([repr(r.ts), str(ipaddress.IPv4Address(r.sIP)),
                        str(ipaddress.IPv4Address(r.dIP)), r.sPort, r.dPort, r.proto,
                        r.len, r.tcpFlags])


def window_records(records: Sequence[PacketRecord], window_seconds: float = 3.0,
                   speedup: float = 1.0) -> list[list[PacketRecord]]:
    """Split a trace into consecutive windows starting at the first timestamp.

    ``speedup`` compresses time, so more packets fall into each window.
    Empty windows between busy ones are kept.
    """
    if not records:
        return []
    t0 = records[0].ts
    span = window_seconds * speedup
    out: list[list[PacketRecord]] = []
    for r in records:
        w = int((r.ts - t0) // span)
        while len(out) <= w:
            out.append([])
        out[w].append(r)
    return out


# --- execution ---------------------------------------------------------------

def _apply_stateless(op: DataflowOp, tuples: list[dict]) -> list[dict]:
    if op.kind == "filter":
        out = [t for t in tuples if all(c.holds(t) for c in op.where)]
        if op.threshold is not None:
            f, th, cmp = op.threshold_field, op.threshold, op.threshold_cmp
            out = [t for t in out if compare(cmp, t[f], th)]
        return out
    # map
    if op.fields is not None:
        tuples = [{f.name: f.eval(t) for f in op.fields} for t in tuples]
    elif op.masks:
        tuples = [dict(t) for t in tuples]
    for name, bits in op.masks:
        for t in tuples:
            t[name] = mask_ip(t[name], bits)
    return tuples


def execute_pipeline(q: QuerySpec, tuples: Iterable[Mapping],
                     entry_bits: Mapping[str, int] | None = None):
    """Run ``q`` over one window of tuples.

    Returns the output tuples and one :class:`CostEntry` per stateful operator,
    where ``B`` is the operator's distinct key count times the per-entry width
    for its kind.
    """
    bits = dict(DEFAULT_ENTRY_BITS)
    if entry_bits:
        bits.update(entry_bits)
    cur = [dict(t) for t in tuples]
    costs = []
    for op in q.ops:
        if not op.stateful:
            cur = _apply_stateless(op, cur)
            continue
        n_in = len(cur)
        if op.kind == "distinct":
            names = [k.name for k in op.keys] if op.keys else None
            seen = {}
            for t in cur:
                row = ({k.name: k.read(t) for k in op.keys} if names else t)
                key = tuple(sorted(row.items()))
                if key not in seen:
                    seen[key] = dict(row)
            cur = list(seen.values())
        else:
            groups: dict[tuple, int] = {}
            for t in cur:
                key = tuple(k.read(t) for k in op.keys)
                groups[key] = groups.get(key, 0) + t[op.value]
            names = [k.name for k in op.keys]
            cur = [dict(zip(names, key), **{op.value: v}) for key, v in groups.items()]
        costs.append(CostEntry(len(cur) * bits[op.kind], n_in, len(cur)))
    return cur, costs


def _output_keys(q: QuerySpec, outputs: list[dict], level: int) -> frozenset:
    name = q.refinement_key.name
    try:
        return frozenset(mask_ip(t[name], level) for t in outputs)
    except KeyError:
        raise ValueError(f"query {q.qid}: output lacks refinement key {name!r}") from None


def generate_cost_matrix(queries: Sequence[QuerySpec], window_tuples: Iterable[Mapping],
                         prior_outputs: Mapping[tuple[int, int], frozenset] | None = None,
                         cfg: WorkloadConfig | None = None, window: int = 0):
    """Cost matrix for one window plus this window's per-level outputs.

    Every (query, i, j) transition with i < j is executed; level-``j`` runs are
    filtered by the previous window's level-``i`` output (``prior_outputs``,
    ``None`` in the first window meaning no filtering).  The returned outputs
    map ``(qid, level)`` to the key prefixes reported by the unfiltered
    root-to-``level`` run, and feed the next window.
    """
    cfg = cfg or WorkloadConfig()
    tuples = [t.as_tuple() if isinstance(t, PacketRecord) else dict(t) for t in window_tuples]
    entries: dict[OpRef, CostEntry] = {}
    outputs: dict[tuple[int, int], frozenset] = {}
    for q in queries:
        for i, j in q.shape().transitions():
            allow = None
            if i != ROOT_LEVEL and prior_outputs is not None:
                allow = prior_outputs.get((q.qid, i), frozenset())
            rq = refine_query(q, i, j, allow_set=allow)
            out, costs = execute_pipeline(rq, tuples, cfg.entry_bits)
            for k, c in enumerate(costs):
                entries[OpRef(q.qid, i, j, k)] = c
            if i == ROOT_LEVEL:
                outputs[(q.qid, j)] = _output_keys(q, out, j)
    return CostMatrix(window, entries), outputs


def cost_matrices_for_trace(queries: Sequence[QuerySpec], records: Sequence[PacketRecord],
                            cfg: WorkloadConfig | None = None) -> list[CostMatrix]:
    cfg = cfg or WorkloadConfig()
    history = []
    prior = None
    for w, recs in enumerate(window_records(records, cfg.window_seconds, cfg.speedup)):
        cm, prior = generate_cost_matrix(queries, recs, prior, cfg, window=w)
        history.append(cm)
    return history


def expected_entry_count(shapes: Iterable[QueryShape]) -> int:
    return sum(math.comb(len(s.candidate_levels), 2) * s.n_stateful for s in shapes)


def query_shapes(cm: CostMatrix) -> list[QueryShape]:
    """Recover per-query level sets and operator counts from a matrix's keys."""
    levels: dict[int, set] = {}
    ops: dict[int, int] = {}
    for key in cm.entries:
        levels.setdefault(key.qid, set()).update((key.prior, key.level))
        ops[key.qid] = max(ops.get(key.qid, 0), key.k + 1)
    return [QueryShape(q, tuple(sorted(levels[q])), ops[q]) for q in sorted(levels)]


def save_cost_history(history: Sequence[CostMatrix], path) -> None:
    with open(path, "w") as fh:
        json.dump([cm.to_json() for cm in history], fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_cost_history(path) -> list[CostMatrix]:
    with open(path) as fh:
        obj = json.load(fh)
    if isinstance(obj, dict):
        obj = [obj]
    return [CostMatrix.from_json(o) for o in obj]


# --- synthetic workloads -----------------------------------------------------

@dataclass(frozen=True)
class BimodalConfig:
    """Two-phase trace: SYN traffic to ``syn_keys`` destinations and UDP
    traffic over ``udp_pairs`` (sIP, dIP) pairs, swapped at ``flip_at``."""

    windows: int = 6
    window_seconds: float = 1.0
    flip_at: float = 3.0
    syn_keys: tuple[int, int] = (10, 100)
    udp_pairs: tuple[int, int] = (100, 10)
    syn_pkts_per_key: int = 8
    udp_pkts_per_pair: int = 2
    seed: int = 7


def synth_bimodal(cfg: BimodalConfig = BimodalConfig()) -> list[PacketRecord]:
    rng = random.Random(cfg.seed)
    syn_pool = [rng.getrandbits(32) for _ in range(max(cfg.syn_keys))]
    victims = [rng.getrandbits(32) for _ in range(4)]
    src_pool = [rng.getrandbits(32) for _ in range(max(cfg.udp_pairs))]
    records = []
    for w in range(cfg.windows):
        start = w * cfg.window_seconds
        phase = 0 if start < cfg.flip_at else 1
        pkts = []
        for d in syn_pool[:cfg.syn_keys[phase]]:
            for _ in range(cfg.syn_pkts_per_key):
                pkts.append(PacketRecord(0.0, rng.getrandbits(32), d,
                                         rng.randrange(1024, 65536), 80, 6, 64, 2))
        for n, s in enumerate(src_pool[:cfg.udp_pairs[phase]]):
            d = victims[n % len(victims)]
            for _ in range(cfg.udp_pkts_per_pair):
                pkts.append(PacketRecord(0.0, s, d, 53, rng.randrange(1024, 65536), 17, 512, 0))
        rng.shuffle(pkts)
        offsets = sorted(rng.random() * cfg.window_seconds for _ in pkts)
        records.extend(PacketRecord(round(start + off, 6), *_fields(p)[1:])
                       for p, off in zip(pkts, offsets))
    return records


def _fields(r: PacketRecord):
    return (r.ts, r.sIP, r.dIP, r.sPort, r.dPort, r.proto, r.len, r.tcpFlags)


def synth_cost_history(shapes: Sequence[QueryShape], n_windows: int, seed: int = 0,
                       base_keys: Mapping[int, int] | int = 1000, amplitude: float = 0.5,
                       tuples_per_key: int = 4, entry_bits: int = 32,
                       key_decay: float = 0.5) -> list[CostMatrix]:
    """Cost-level workload whose per-query demand swings in anti-phase.

    Even-indexed queries grow when odd-indexed ones shrink, so individual
    operators vary a lot while the aggregate stays roughly flat.  Finer
    levels hold more keys; filtering by a finer prior level removes more.
    """
    rng = random.Random(seed)
    out = []
    for w in range(n_windows):
        swing = rng.choice((-1.0, 1.0)) * (0.5 + 0.5 * rng.random())
        entries = {}
        for n, s in enumerate(shapes):
            base = base_keys if isinstance(base_keys, int) else base_keys[s.qid]
            sign = 1 if n % 2 == 0 else -1
            factor = max(0.05, 1 + sign * amplitude * swing + rng.gauss(0, 0.02))
            finest = s.finest_level or 32
            for i, j in s.transitions():
                keys = base * factor * (j / finest) ** 2 * (1 - 0.8 * i / finest)
                n_in = int(round(keys * tuples_per_key))
                for k in range(s.n_stateful):
                    keys_k = int(round(keys * key_decay ** k))
                    keys_k = min(keys_k, n_in)
                    entries[OpRef(s.qid, i, j, k)] = CostEntry(keys_k * entry_bits, n_in, keys_k)
                    n_in = keys_k
        out.append(CostMatrix(w, entries))
    return out


# --- variability -------------------------------------------------------------

def _cov(series: Sequence[float]) -> float:
    mean = statistics.fmean(series)
    if mean == 0:
        return 0.0
    return statistics.pstdev(series) / mean


@dataclass(frozen=True)
class CovReport:
    per_operator: Mapping[OpRef, float]
    aggregate: float


def cov_report(history: Sequence[CostMatrix], keys: Iterable[OpRef] | None = None) -> CovReport:
    """Coefficient of variation (population) of required memory across windows."""
    if len(history) < 2:
        raise ValueError("need at least two windows")
    keys = sorted(keys if keys is not None else history[0].entries)
    per_op = {k: _cov([cm[k].B for cm in history]) for k in keys}
    agg = _cov([sum(cm[k].B for k in keys) for cm in history])
    return CovReport(per_op, agg)
