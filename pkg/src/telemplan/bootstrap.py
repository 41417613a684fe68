"""Compile-time planning: refinement-plan choice and register sizing."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from typing import Mapping, Sequence

from .query import (
    ROOT_LEVEL,
    DependencyChain,
    OpRef,
    QueryShape,
    QuerySpec,
    RefinementPlan,
    build_chains,
)
from .workload import CostMatrix, query_shapes

MAX_PLAN_LENGTH = 4


class PlanningError(ValueError):
    pass


class MissingCostError(KeyError):
    def __init__(self, key: OpRef, window: int):
        super().__init__(f"no cost entry for {key.label()} (qid={key.qid}, i={key.prior}, "
                         f"j={key.level}, k={key.k}) in window {window}")
        self.key = key


@dataclass(frozen=True)
class SwitchConfig:
    stages: int = 12
    alus_per_stage: int = 8
    stage_mem_bits: int = 1_500_000
    max_reg_bits: int = 750_000

    def __post_init__(self):
        if min(self.stages, self.alus_per_stage, self.stage_mem_bits, self.max_reg_bits) <= 0:
            raise ValueError("switch parameters must be positive")
        if self.max_reg_bits > self.stage_mem_bits:
            raise ValueError("max_reg_bits exceeds stage_mem_bits")

    @property
    def total_regs(self) -> int:
        return self.stages * self.alus_per_stage

    @property
    def total_mem_bits(self) -> int:
        return self.stages * self.stage_mem_bits

    def to_json(self) -> dict:
        return {"stages": self.stages, "alus_per_stage": self.alus_per_stage,
                "stage_mem_bits": self.stage_mem_bits, "max_reg_bits": self.max_reg_bits}

    @classmethod
    def from_json(cls, obj: Mapping) -> SwitchConfig:
        return cls(int(obj["stages"]), int(obj["alus_per_stage"]),
                   int(obj["stage_mem_bits"]), int(obj["max_reg_bits"]))

    @classmethod
    def load(cls, path) -> SwitchConfig:
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class Register:
    reg_id: int
    stage: int
    bits: int


@dataclass(frozen=True)
class RegisterConfig:
    registers: tuple[Register, ...]

    def __post_init__(self):
        ids = [r.reg_id for r in self.registers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate register ids")
        if any(r.bits < 0 for r in self.registers):
            raise ValueError("negative register capacity")

    def by_id(self) -> dict[int, Register]:
        return {r.reg_id: r for r in self.registers}

    def validate(self, cfg: SwitchConfig) -> None:
        per_stage: dict[int, list[Register]] = {}
        for r in self.registers:
            if not 0 <= r.stage < cfg.stages:
                raise ValueError(f"register {r.reg_id} on missing stage {r.stage}")
            if r.bits > cfg.max_reg_bits:
                raise ValueError(f"register {r.reg_id} exceeds the per-register cap")
            per_stage.setdefault(r.stage, []).append(r)
        for stage, regs in per_stage.items():
            if len(regs) > cfg.alus_per_stage:
                raise ValueError(f"stage {stage} has more registers than ALUs")
            if sum(r.bits for r in regs) > cfg.stage_mem_bits:
                raise ValueError(f"stage {stage} exceeds its memory")

    def to_json(self) -> list:
        return [{"id": r.reg_id, "stage": r.stage, "bits": r.bits} for r in self.registers]

    @classmethod
    def from_json(cls, rows) -> RegisterConfig:
        return cls(tuple(Register(int(r["id"]), int(r["stage"]), int(r["bits"])) for r in rows))


@dataclass(frozen=True)
class BootstrapPlan:
    refinement: RefinementPlan
    registers: RegisterConfig
    chains: tuple[DependencyChain, ...] = ()

    def to_json(self) -> dict:
        return {"refinement": self.refinement.to_json(), "registers": self.registers.to_json()}

    @classmethod
    def from_json(cls, obj: Mapping, shapes: Sequence[QueryShape] | None = None) -> BootstrapPlan:
        plan = RefinementPlan.from_json(obj["refinement"])
        chains = tuple(build_chains(plan, shapes)) if shapes is not None else ()
        return cls(plan, RegisterConfig.from_json(obj["registers"]), chains)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path, shapes: Sequence[QueryShape] | None = None) -> BootstrapPlan:
        with open(path) as fh:
            return cls.from_json(json.load(fh), shapes)


def _shapes(queries, history: Sequence[CostMatrix]) -> list[QueryShape]:
    if queries is None:
        return query_shapes(history[0])
    return [q.shape() if isinstance(q, QuerySpec) else q for q in queries]


def plan_operators(plan: RefinementPlan, shapes: Sequence[QueryShape]) -> list[OpRef]:
    return [op for ch in build_chains(plan, shapes) for op in ch.operators]


# --- TOM ---------------------------------------------------------------------

@dataclass(frozen=True)
class TomResult:
    series: tuple[int, ...]
    mean: Fraction


def tom_of_plan(plan: RefinementPlan, history: Sequence[CostMatrix],
                queries: Sequence[QuerySpec | QueryShape] | None = None) -> TomResult:
    """Total operator memory of ``plan`` in every window, and its mean."""
    shapes = [s for s in _shapes(queries, history) if s.qid in plan.per_query]
    ops = plan_operators(plan, shapes)
    series = []
    for cm in history:
        total = 0
        for op in ops:
            if op not in cm:
                raise MissingCostError(op, cm.window)
            total += cm[op].B
        series.append(total)
    mean = Fraction(sum(series), len(series)) if series else Fraction(0)
    return TomResult(tuple(series), mean)


def enumerate_query_plans(shape: QueryShape, max_length: int = MAX_PLAN_LENGTH) -> list[tuple[int, ...]]:
    """Every increasing level sequence from root to the finest level."""
    middle = [lv for lv in shape.candidate_levels if lv not in (ROOT_LEVEL, shape.finest_level)]
    plans = []
    for n in range(0, max(0, max_length - 2) + 1):
        for mid in combinations(middle, n):
            plans.append((ROOT_LEVEL, *mid, shape.finest_level))
    return sorted(plans)


def _query_tom_sums(shape: QueryShape, seq: tuple[int, ...], history: Sequence[CostMatrix]) -> int:
    total = 0
    for cm in history:
        for i, j in zip(seq, seq[1:]):
            for k in range(shape.n_stateful):
                key = OpRef(shape.qid, i, j, k)
                if key not in cm:
                    raise MissingCostError(key, cm.window)
                total += cm[key].B
    return total


@dataclass(frozen=True)
class TomPoint:
    k: int
    min_mean_tom: Fraction
    utility: Fraction | None
    plan: RefinementPlan


def min_mean_tom_curve(queries, history: Sequence[CostMatrix], cfg: SwitchConfig,
                       max_length: int = MAX_PLAN_LENGTH) -> list[TomPoint]:
    """For each operator count k, the plan with the smallest mean TOM.

    TOM is additive across queries, so per-query minima are combined with a
    min-plus convolution over operator counts; ties prefer the
    lexicographically smaller plan.
    """
    if not history:
        raise PlanningError("need at least one window of cost history")
    shapes = sorted(_shapes(queries, history), key=lambda s: s.qid)
    acc: dict[int, tuple[int, tuple]] = {0: (0, ())}
    for s in shapes:
        per_k: dict[int, tuple[int, tuple]] = {}
        for seq in enumerate_query_plans(s, max_length):
            k = (len(seq) - 1) * s.n_stateful
            cand = (_query_tom_sums(s, seq, history), seq)
            if k not in per_k or cand < per_k[k]:
                per_k[k] = cand
        nxt: dict[int, tuple[int, tuple]] = {}
        for k1, (t1, p1) in acc.items():
            for k2, (t2, seq) in per_k.items():
                cand = (t1 + t2, p1 + ((s.qid, seq),))
                if k1 + k2 not in nxt or cand < nxt[k1 + k2]:
                    nxt[k1 + k2] = cand
        acc = nxt
    n = len(history)
    points = []
    for k in sorted(acc):
        tom_sum, plans = acc[k]
        mean = Fraction(tom_sum, n)
        m = cfg.total_mem_bits - mean
        o = cfg.total_regs - k
        util = m * o if m > 0 and o > 0 else None
        points.append(TomPoint(k, mean, util, RefinementPlan(dict(plans))))
    return points


def select_refinement_plan(queries, history: Sequence[CostMatrix], cfg: SwitchConfig,
                           max_length: int = MAX_PLAN_LENGTH) -> RefinementPlan:
    """Pick the plan maximizing (spare memory) x (spare registers)."""
    best = None
    for pt in min_mean_tom_curve(queries, history, cfg, max_length):
        if pt.utility is not None and (best is None or pt.utility > best.utility):
            best = pt
    if best is None:
        raise PlanningError("no refinement plan fits the switch")
    return best.plan


# --- register sizing ---------------------------------------------------------

def snr_scale(cfg: SwitchConfig) -> Fraction:
    """Largest S with A*S <= max_reg and S*A(A+1)/2 <= stage_mem."""
    a = cfg.alus_per_stage
    return min(Fraction(cfg.max_reg_bits, a), Fraction(2 * cfg.stage_mem_bits, a * (a + 1)))


def snr_sizes(cfg: SwitchConfig) -> RegisterConfig:
    """Slice-n-Repeat: sizes S, 2S, ..., A*S in every stage, floored to bits."""
    s = snr_scale(cfg)
    a = cfg.alus_per_stage
    regs = [Register(stage * a + slot, stage, math.floor(s * (slot + 1)))
            for stage in range(cfg.stages) for slot in range(a)]
    return RegisterConfig(tuple(regs))


def exact_fit_registers(chains: Sequence[DependencyChain], sizes: Mapping[OpRef, int],
                        cfg: SwitchConfig):
    """Size one register per operator and pack them into stages.

    First-fit-decreasing over the operators whose parent is already placed;
    a child goes strictly after its parent's stage.  Sizes above the register
    cap are truncated; when no stage has room, the operator takes the free
    ALU with the most remaining memory (truncated) or stays unmapped.
    Returns ``(RegisterConfig, {reg_id: OpRef})``.
    """
    parent: dict[OpRef, OpRef | None] = {}
    for ch in chains:
        for n, op in enumerate(ch.operators):
            parent[op] = ch.operators[n - 1] if n else None
    free_alus = [cfg.alus_per_stage] * cfg.stages
    free_mem = [cfg.stage_mem_bits] * cfg.stages
    placed: dict[OpRef, tuple[int, bool]] = {}
    regs: list[Register] = []
    mapping: dict[int, OpRef] = {}
    pending = set(parent)
    while True:
        ready = [op for op in pending
                 if parent[op] is None or (parent[op] in placed and placed[parent[op]][1])]
        if not ready:
            break
        ready.sort(key=lambda op: (-sizes[op], op))
        op = ready[0]
        pending.discard(op)
        if sizes[op] <= 0:
            placed[op] = (placed[parent[op]][0] if parent[op] is not None else -1, True)
            continue
        want = min(sizes[op], cfg.max_reg_bits)
        lo = placed[parent[op]][0] + 1 if parent[op] is not None else 0
        stage = next((t for t in range(lo, cfg.stages)
                      if free_alus[t] and free_mem[t] >= want), None)
        bits = want
        if stage is None:
            options = [t for t in range(lo, cfg.stages) if free_alus[t] and free_mem[t] > 0]
            if not options:
                continue
            stage = max(options, key=lambda t: (free_mem[t], -t))
            bits = free_mem[stage]
        free_alus[stage] -= 1
        free_mem[stage] -= bits
        reg_id = len(regs)
        regs.append(Register(reg_id, stage, bits))
        mapping[reg_id] = op
        placed[op] = (stage, bits >= sizes[op])
    return RegisterConfig(tuple(regs)), mapping
