"""Operator-to-register mapping (general optimal assignment).

Registers have a capacity and a stage.  Operators have a size, a satisfied
cost and an unsatisfied cost, and are grouped into dependency chains: a child
may only get registers once its parent is fully satisfied, and only at
stages strictly after all of the parent's registers.  A chain costs the
(interpolated) cost of its first unsatisfied operator, or the satisfied cost
of its last operator when every operator is satisfied.

All costs are exact rationals; nothing here compares floats.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterator, Mapping, Sequence

from .bootstrap import Register, RegisterConfig
from .query import DependencyChain, OpRef

EXACT_MAX_REGISTERS = 12
EXACT_MAX_OPERATORS = 6


class GuardError(ValueError):
    pass


@dataclass(frozen=True)
class GoaOperator:
    op_id: int
    size: int
    c_s: int
    c_u: int
    chain_id: int
    position: int

    def __post_init__(self):
        if self.size < 0:
            raise ValueError(f"operator {self.op_id}: negative size")
        if not 0 <= self.c_s <= self.c_u:
            raise ValueError(f"operator {self.op_id}: need 0 <= c_s <= c_u")

    def cost(self, cap: int) -> Fraction:
        if cap >= self.size:
            return Fraction(self.c_s)
        return Fraction(self.c_s * cap + self.c_u * (self.size - cap), self.size)


@dataclass(frozen=True)
class GoaInstance:
    registers: RegisterConfig
    operators: tuple[GoaOperator, ...]
    chains: tuple[tuple[int, ...], ...]
    refs: tuple[OpRef, ...] | None = None

    def __post_init__(self):
        ids = [o.op_id for o in self.operators]
        if ids != list(range(len(ids))):
            raise ValueError("operator ids must be 0..n-1 in order")
        seen = sorted(i for ch in self.chains for i in ch)
        if seen != ids:
            raise ValueError("chains must partition the operators")
        for c, ch in enumerate(self.chains):
            for pos, i in enumerate(ch, start=1):
                o = self.operators[i]
                if (o.chain_id, o.position) != (c, pos):
                    raise ValueError(f"operator {i} disagrees with its chain placement")

    def parent(self, op_id: int) -> int | None:
        o = self.operators[op_id]
        return self.chains[o.chain_id][o.position - 2] if o.position > 1 else None

    def child(self, op_id: int) -> int | None:
        o = self.operators[op_id]
        ch = self.chains[o.chain_id]
        return ch[o.position] if o.position < len(ch) else None

    def to_json(self) -> dict:
        return {
            "registers": self.registers.to_json(),
            "operators": [{"id": o.op_id, "size": o.size, "c_s": o.c_s, "c_u": o.c_u}
                          for o in self.operators],
            "chains": [list(ch) for ch in self.chains],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> GoaInstance:
        where = {i: (c, p) for c, ch in enumerate(obj["chains"]) for p, i in enumerate(ch, 1)}
        ops = tuple(GoaOperator(int(o["id"]), int(o["size"]), int(o["c_s"]), int(o["c_u"]),
                                *where[int(o["id"])]) for o in obj["operators"])
        return cls(RegisterConfig.from_json(obj["registers"]), ops,
                   tuple(tuple(ch) for ch in obj["chains"]))


@dataclass(frozen=True)
class Assignment:
    """Partial map register id -> operator id."""

    mapping: Mapping[int, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.mapping)

    def items(self):
        return sorted(self.mapping.items())

    def to_json(self) -> list:
        return [[r, o] for r, o in self.items()]

    @classmethod
    def from_json(cls, rows) -> Assignment:
        return cls({int(r): int(o) for r, o in rows})


def _as_map(alpha) -> Mapping[int, int]:
    return alpha.mapping if isinstance(alpha, Assignment) else alpha


def chain_specs(chains: Sequence[Sequence[tuple[int, int, int]]],
                registers: Sequence[tuple[int, int]]) -> GoaInstance:
    """Instance from plain tuples: chains of (size, c_s, c_u), registers (stage, bits)."""
    ops, ch_ids = [], []
    for c, chain in enumerate(chains):
        ids = []
        for pos, (size, c_s, c_u) in enumerate(chain, start=1):
            ids.append(len(ops))
            ops.append(GoaOperator(len(ops), size, c_s, c_u, c, pos))
        ch_ids.append(tuple(ids))
    regs = RegisterConfig(tuple(Register(n, st, bits) for n, (st, bits) in enumerate(registers)))
    return GoaInstance(regs, tuple(ops), tuple(ch_ids))


# --- costs and feasibility ---------------------------------------------------

def _caps(alpha: Mapping[int, int], instance: GoaInstance) -> list[int]:
    caps = [0] * len(instance.operators)
    regs = instance.registers.by_id()
    for r, o in alpha.items():
        caps[o] += regs[r].bits
    return caps


def satisfaction_ratio(op_id: int, alpha, instance: GoaInstance) -> Fraction:
    op = instance.operators[op_id]
    cap = _caps(_as_map(alpha), instance)[op_id]
    if op.size == 0:
        return Fraction(1)
    return min(Fraction(cap, op.size), Fraction(1))


def _chain_cost(chain: Sequence[int], caps: Sequence[int], instance: GoaInstance) -> Fraction:
    ops = instance.operators
    for i in chain:
        if caps[i] < ops[i].size:
            return ops[i].cost(caps[i])
    return Fraction(ops[chain[-1]].c_s)


def chain_cost(chain_id: int, alpha, instance: GoaInstance) -> Fraction:
    return _chain_cost(instance.chains[chain_id], _caps(_as_map(alpha), instance), instance)


def assignment_cost(alpha, instance: GoaInstance) -> Fraction:
    caps = _caps(_as_map(alpha), instance)
    return sum((_chain_cost(ch, caps, instance) for ch in instance.chains), Fraction(0))


def is_feasible(alpha, instance: GoaInstance) -> bool:
    alpha = _as_map(alpha)
    regs = instance.registers.by_id()
    n_ops = len(instance.operators)
    if any(r not in regs or not 0 <= o < n_ops for r, o in alpha.items()):
        return False
    caps = _caps(alpha, instance)
    stages: dict[int, list[int]] = {}
    for r, o in alpha.items():
        stages.setdefault(o, []).append(regs[r].stage)
    for o, st in stages.items():
        p = instance.parent(o)
        if p is None:
            continue
        if caps[p] < instance.operators[p].size:
            return False
        if p in stages and max(stages[p]) >= min(st):
            return False
    return True


# --- greedy ------------------------------------------------------------------

class _State:
    """Mutable bookkeeping for the greedy search."""

    def __init__(self, instance: GoaInstance):
        self.inst = instance
        self.ops = instance.operators
        self.regs = instance.registers.by_id()
        self.n_stages = 1 + max((r.stage for r in self.regs.values()), default=-1)
        self.alpha: dict[int, int] = {}
        self.caps = [0] * len(self.ops)
        self.op_regs: list[list[int]] = [[] for _ in self.ops]
        # free registers per stage, ascending id
        self.free: list[list[int]] = [[] for _ in range(self.n_stages)]
        self._scales: dict[int, int] = {}
        self.bits = {r: reg.bits for r, reg in self.regs.items()}
        for r in sorted(self.regs):
            self.free[self.regs[r].stage].append(r)

    def assign(self, r: int, o: int):
        self.alpha[r] = o
        self.caps[o] += self.regs[r].bits
        self.op_regs[o].append(r)
        self.free[self.regs[r].stage].remove(r)

    def drop_from(self, stage: int):
        for r in [r for r in self.alpha if self.regs[r].stage >= stage]:
            o = self.alpha.pop(r)
            self.caps[o] -= self.regs[r].bits
            self.op_regs[o].remove(r)
            self.free[self.regs[r].stage].append(r)
        for lst in self.free:
            lst.sort()

    def max_stage(self, o: int, extra: Mapping[int, int] = None) -> int:
        st = [self.regs[r].stage for r in self.op_regs[o]]
        if extra and o in extra:
            st.append(extra[o])
        return max(st, default=-1)

    def active(self, chain: Sequence[int], caps) -> int | None:
        for pos, o in enumerate(chain):
            if caps[o] < self.ops[o].size:
                return pos
        return None

    def active_stage(self, chain, pos, caps, top: Mapping[int, int], taken=()) -> int | None:
        lo = 0
        if pos > 0:
            p = chain[pos - 1]
            lo = max(self.max_stage(p), top.get(p, -1)) + 1
        for t in range(lo, self.n_stages):
            if any(r not in taken for r in self.free[t]):
                return t
        return None

    def _scale(self, chain_id: int) -> int:
        """Common multiplier that makes every cost in the chain an integer."""
        if chain_id not in self._scales:
            dens = [1]
            for o in self.inst.chains[chain_id]:
                op = self.ops[o]
                dens += [max(op.size, 1), Fraction(op.c_s).denominator, Fraction(op.c_u).denominator]
            self._scales[chain_id] = math.lcm(*dens)
        return self._scales[chain_id]

    def _scaled_cost(self, chain: Sequence[int], caps: Sequence[int], scale: int) -> int:
        ops = self.ops
        for o, cap in zip(chain, caps):
            op = ops[o]
            if cap < op.size:
                return int((op.c_s * cap + op.c_u * (op.size - cap)) * (scale // op.size))
        return int(ops[chain[-1]].c_s * scale)

    def ladder(self, chain_id: int):
        """Walk the chain's extension ladder.

        Yields (delta, added, regs) per step, where ``delta`` is the cost
        reduction multiplied by ``self._scale(chain_id)``.
        """
        chain = self.inst.chains[chain_id]
        scale = self._scale(chain_id)
        ops, bits = self.ops, self.bits
        caps = [self.caps[o] for o in chain]
        top = [self.max_stage(o) for o in chain]
        base = self._scaled_cost(chain, caps, scale)
        left = list(map(list, self.free))  # registers this walk has not taken yet
        taken: list[int] = []
        added = 0
        pos = 0
        while True:
            while pos < len(chain) and caps[pos] >= ops[chain[pos]].size:
                pos += 1
            if pos == len(chain):
                return
            lo = top[pos - 1] + 1 if pos else 0
            t = next((t for t in range(lo, self.n_stages) if left[t]), None)
            if t is None:
                return
            cands = left[t]
            need = ops[chain[pos]].size - caps[pos]
            fits = [r for r in cands if bits[r] >= need]
            if fits:
                r = min(fits, key=lambda r: (bits[r], r))
            else:
                r = max(cands, key=lambda r: (bits[r], -r))
            cands.remove(r)
            taken.append(r)
            caps[pos] += bits[r]
            top[pos] = max(top[pos], t)
            added += bits[r]
            yield base - self._scaled_cost(chain, caps, scale), added, tuple(taken)

    def chain_stage(self, chain_id: int) -> int | None:
        chain = self.inst.chains[chain_id]
        pos = self.active(chain, self.caps)
        if pos is None:
            return None
        return self.active_stage(chain, pos, self.caps, {})


def greedy_map(instance: GoaInstance, enhanced: bool = True) -> Assignment:
    """Bang-per-buck greedy assignment.

    Chains are considered in groups sharing the lowest active stage; within
    the first group that offers a cost-reducing extension, the extension with
    the best cost reduction per unit of added capacity wins.  ``enhanced``
    releases every register at or beyond a newly reached active stage so the
    choices made there can be revisited with more information.
    """
    st = _State(instance)
    last_stage = -1
    # chain -> (best extension or None, registers its ladder drew on).  A ladder
    # only changes when one of those registers is taken or the chain itself grows;
    # releases clear everything.
    cache: dict[int, tuple] = {}

    def best_of(c):
        if c not in cache:
            top = None
            used: tuple = ()
            for delta, added, regs in st.ladder(c):
                used = regs
                if delta <= 0:
                    continue
                # same scale along one ladder, so compare ratios by cross-multiplying;
                # later steps are longer, so ties keep the earlier one
                if top is None or delta * top[1] > top[0] * added or (
                        delta * top[1] == top[0] * added and delta > top[0]):
                    top = (delta, added, regs)
            best = None
            if top is not None:
                delta, added, regs = top
                scale = st._scale(c)
                d = Fraction(delta, scale)
                best = ((d / added, d, -c, -regs[0], -len(regs)), c, regs)
            cache[c] = (best, set(used))
        return cache[c][0]

    while True:
        groups: dict[int, list[int]] = {}
        for c in range(len(instance.chains)):
            t = st.chain_stage(c)
            if t is not None:
                groups.setdefault(t, []).append(c)
        chosen = None
        chosen_stage = None
        for t in sorted(groups):
            best = None
            for c in groups[t]:
                cand = best_of(c)
                if cand is not None and (best is None or cand[0] > best[0]):
                    best = cand
            if best is not None:
                chosen, chosen_stage = best, t
                break
        if chosen is None:
            break
        if enhanced and chosen_stage > last_stage:
            last_stage = chosen_stage
            if any(st.regs[r].stage >= chosen_stage for r in st.alpha):
                st.drop_from(chosen_stage)
                cache.clear()
                continue
        _, c, regs = chosen
        chain = instance.chains[c]
        for r in regs:
            pos = st.active(chain, st.caps)
            st.assign(r, chain[pos])
        cache.pop(c, None)
        for k in [k for k, (_, used) in cache.items() if used.intersection(regs)]:
            del cache[k]
    return Assignment(dict(st.alpha))


# --- exhaustive search -------------------------------------------------------

def check_guard(instance: GoaInstance) -> None:
    n_r, n_o = len(instance.registers.registers), len(instance.operators)
    if n_r > EXACT_MAX_REGISTERS or n_o > EXACT_MAX_OPERATORS:
        raise GuardError(f"instance too large for exhaustive search ({n_r} registers, "
                         f"{n_o} operators; limits {EXACT_MAX_REGISTERS}/{EXACT_MAX_OPERATORS}); "
                         "use greedy_map")


def enumerate_feasible(instance: GoaInstance) -> Iterator[dict[int, int]]:
    """Every feasible partial assignment, in lexicographic order over registers
    sorted by (stage, id); unassigned sorts before operator 0."""
    for alpha, _ in walk_feasible(instance):
        yield dict(alpha)


def walk_feasible(instance: GoaInstance, distinct: bool = False):
    """Like enumerate_feasible but yields live ``(alpha, caps)`` views; copy to keep.

    With ``distinct``, registers of equal stage and size are treated as
    interchangeable and only the lexicographically first assignment of each
    group of equivalent ones is produced.
    """
    # stage order: by the time a child gets its first register, every register
    # its parent could still use has been decided
    regs = sorted(instance.registers.registers, key=lambda r: (r.stage, r.reg_id))
    twin = [-1] * len(regs)  # previous register with the same stage and size
    if distinct:
        last: dict[tuple[int, int], int] = {}
        for n, r in enumerate(regs):
            twin[n] = last.get((r.stage, r.bits), -1)
            last[(r.stage, r.bits)] = n
    choice = [-1] * len(regs)
    ops = instance.operators
    n_ops = len(ops)
    parent = [instance.parent(o) for o in range(n_ops)]
    child = [instance.child(o) for o in range(n_ops)]
    lo = [99**9] * n_ops   # min stage per operator
    hi = [-1] * n_ops      # max stage per operator
    caps = [0] * n_ops
    alpha: dict[int, int] = {}

    def rec(n: int):
        if n == len(regs):
            yield alpha, caps
            return
        r = regs[n]
        floor = choice[twin[n]] if twin[n] >= 0 else -1
        if floor < 0:
            yield from rec(n + 1)
        for o in range(max(floor, 0), n_ops):
            p, c = parent[o], child[o]
            if p is not None and (hi[p] >= r.stage or caps[p] < ops[p].size):
                continue
            if c is not None and hi[c] >= 0 and lo[c] <= r.stage:
                continue
            saved = lo[o], hi[o]
            alpha[r.reg_id] = o
            lo[o], hi[o] = min(lo[o], r.stage), max(hi[o], r.stage)
            caps[o] += r.bits
            choice[n] = o
            yield from rec(n + 1)
            choice[n] = -1
            caps[o] -= r.bits
            lo[o], hi[o] = saved
            del alpha[r.reg_id]

    yield from rec(0)


def exact_search(instance: GoaInstance, objective: Callable[[Mapping[int, int]], object]):
    """Minimize ``objective`` over all feasible assignments (first minimum in
    lexicographic order wins)."""
    check_guard(instance)
    best, best_val = None, None
    for alpha in enumerate_feasible(instance):
        val = objective(alpha)
        if best_val is None or val < best_val:
            best, best_val = alpha, val
    return Assignment(best), best_val


def exact_map(instance: GoaInstance) -> tuple[Assignment, Fraction]:
    check_guard(instance)
    ops = instance.operators
    scale = math.lcm(*(o.size for o in ops if o.size > 0)) if ops else 1
    # chain cost scaled by the common denominator, so comparisons stay integral
    def scaled(chain, caps):
        for i in chain:
            o = ops[i]
            if caps[i] < o.size:
                return (o.c_s * caps[i] + o.c_u * (o.size - caps[i])) * (scale // o.size)
        return ops[chain[-1]].c_s * scale

    best, best_val = {}, None
    for alpha, caps in walk_feasible(instance, distinct=True):
        val = sum(scaled(ch, caps) for ch in instance.chains)
        if best_val is None or val < best_val:
            best, best_val = dict(alpha), val
    return Assignment(best), Fraction(best_val or 0, scale)


# --- building instances from cost data ---------------------------------------

def build_goa_instance(chains: Sequence[DependencyChain], registers: RegisterConfig,
                       costs: Mapping, scale: Mapping[OpRef, Fraction] | None = None) -> GoaInstance:
    """Translate chains and (predicted) cost entries into a mapping instance.

    An unsatisfied operator spills its whole input (``c_u = N_in``); a
    satisfied one hands off on-switch (``c_s = 0``) unless it is last in its
    chain, where its output goes to the stream processor (``c_s = N_out``).
    ``scale`` multiplies required memory per operator.
    """
    ops, chain_ids, refs = [], [], []
    for c, ch in enumerate(chains):
        ids = []
        for pos, ref in enumerate(ch.operators, start=1):
            try:
                e = costs[ref]
            except KeyError:
                raise KeyError(f"no cost prediction for {ref.label()}") from None
            size = e.B
            if scale is not None and ref in scale:
                size = round(Fraction(size) * Fraction(scale[ref]))
            last = pos == len(ch.operators)
            ids.append(len(ops))
            refs.append(ref)
            ops.append(GoaOperator(len(ops), int(size), e.n_out if last else 0, e.n_in, c, pos))
        chain_ids.append(tuple(ids))
    return GoaInstance(registers, tuple(ops), tuple(chain_ids), tuple(refs))


def to_opref_mapping(alpha, instance: GoaInstance) -> dict[int, OpRef]:
    if instance.refs is None:
        raise ValueError("instance carries no operator references")
    return {r: instance.refs[o] for r, o in _as_map(alpha).items()}


def save_instance(instance: GoaInstance, path) -> None:
    with open(path, "w") as fh:
        json.dump(instance.to_json(), fh, indent=1)
