"""Stream-processor load estimates for a register assignment."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

from .bootstrap import RegisterConfig
from .query import DependencyChain, OpRef
from .workload import CostEntry

MODES = ("average", "best", "worst")
DEFAULT_KEY_BITS = 32


class InfeasibleAssignment(ValueError):
    pass


@dataclass(frozen=True)
class LoadConfig:
    key_bits: int = DEFAULT_KEY_BITS
    mode: str = "average"

    def __post_init__(self):
        if self.key_bits <= 0:
            raise ValueError("key_bits must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")


@dataclass(frozen=True)
class OperatorLoad:
    op: OpRef
    alloc_bits: int
    req_bits: int
    rho: Fraction
    load: Fraction


@dataclass(frozen=True)
class LoadEstimate:
    per_operator: tuple[OperatorLoad, ...]
    total: Fraction
    mode: str

    def by_op(self) -> dict[OpRef, OperatorLoad]:
        return {o.op: o for o in self.per_operator}


def spill_load(entry: CostEntry, b_alloc: int) -> Fraction:
    """Tuples from evicted keys: the share of input whose keys found no room."""
    if entry.B == 0 or b_alloc >= entry.B:
        return Fraction(0)
    return Fraction(entry.n_in * (entry.B - b_alloc), entry.B)


def operator_load(entry: CostEntry, b_alloc: int, cfg: LoadConfig = LoadConfig()) -> Fraction:
    if b_alloc < 0:
        raise ValueError("negative allocation")
    b_req = entry.B
    if b_req == 0 or b_alloc >= b_req:
        return Fraction(entry.n_out)
    if cfg.mode == "average":
        est = Fraction(entry.n_out * b_alloc, b_req) + spill_load(entry, b_alloc)
    elif cfg.mode == "best":
        est = entry.n_out + Fraction(b_req - b_alloc, cfg.key_bits)
    else:
        est = entry.n_in - Fraction(b_alloc, cfg.key_bits)
    return min(max(est, Fraction(0)), Fraction(entry.n_in))


def check_structure(mapping: Mapping[int, OpRef], chains: Sequence[DependencyChain],
                    registers: RegisterConfig) -> None:
    """Register ids exist and every child sits strictly after its parent."""
    regs = registers.by_id()
    stages: dict[OpRef, list[int]] = {}
    for r, op in mapping.items():
        if r not in regs:
            raise InfeasibleAssignment(f"unknown register {r}")
        stages.setdefault(op, []).append(regs[r].stage)
    known = {op for ch in chains for op in ch.operators}
    for op in stages:
        if op not in known:
            raise InfeasibleAssignment(f"{op.label()} is not in any chain")
    for ch in chains:
        for parent, child in zip(ch.operators, ch.operators[1:]):
            if parent in stages and child in stages and max(stages[parent]) >= min(stages[child]):
                raise InfeasibleAssignment(
                    f"{child.label()} placed at or before its parent's stage")


def assignment_load(mapping: Mapping[int, OpRef], chains: Sequence[DependencyChain],
                    true_costs: Mapping[OpRef, CostEntry], registers: RegisterConfig,
                    cfg: LoadConfig = LoadConfig()) -> LoadEstimate:
    """Walk each chain; the first under-provisioned operator spills and the
    rest of the chain is bypassed.  A fully provisioned chain emits its last
    operator's output."""
    check_structure(mapping, chains, registers)
    regs = registers.by_id()
    alloc: dict[OpRef, int] = {}
    for r, op in mapping.items():
        alloc[op] = alloc.get(op, 0) + regs[r].bits
    rows = []
    total = Fraction(0)
    for ch in chains:
        for pos, op in enumerate(ch.operators):
            e = true_costs[op]
            a = alloc.get(op, 0)
            rho = Fraction(1) if e.B == 0 else min(Fraction(a, e.B), Fraction(1))
            last = pos == len(ch.operators) - 1
            if rho < 1:
                load = operator_load(e, a, cfg)
            elif last:
                load = Fraction(e.n_out)
            else:
                load = Fraction(0)
            rows.append(OperatorLoad(op, a, e.B, rho, load))
            total += load
            if rho < 1:
                # bypass: downstream operators never see tuples on the switch
                for rest in ch.operators[pos + 1:]:
                    r_e, r_a = true_costs[rest], alloc.get(rest, 0)
                    r_rho = Fraction(1) if r_e.B == 0 else min(Fraction(r_a, r_e.B), Fraction(1))
                    rows.append(OperatorLoad(rest, r_a, r_e.B, r_rho, Fraction(0)))
                break
    return LoadEstimate(tuple(rows), total, cfg.mode)
