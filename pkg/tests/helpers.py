"""Shared fixtures and independent oracles for the test suite."""
from __future__ import annotations

import random
from fractions import Fraction
from pathlib import Path

from telemplan.mapping import chain_specs
from telemplan.query import OpRef, QueryShape
from telemplan.workload import CostEntry, CostMatrix

DATA = Path(__file__).resolve().parents[1] / "src" / "telemplan" / "data"

# Required bits for the superspreader query, keyed (prior level, level).
# k=0 is the distinct, k=1 the reduce.
SUPERSPREADER_DISTINCT = {
    (0, 8): 523_700, (0, 16): 727_300, (0, 24): 954_900, (0, 32): 1_200_000,
    (8, 16): 572_500, (8, 24): 766_100, (8, 32): 948_800,
    (16, 24): 384_700, (16, 32): 521_900,
    (24, 32): 244_300,
}
SUPERSPREADER_REDUCE = {
    (0, 8): 6_500, (0, 16): 596_600, (0, 24): 6_700_000, (0, 32): 18_600_000,
    (8, 16): 232_300, (8, 24): 4_100_000, (8, 32): 14_000_000,
    (16, 24): 267_400, (16, 32): 5_400_000,
    (24, 32): 93_300,
}
SUPERSPREADER = QueryShape(1, (0, 8, 16, 24, 32), 2)


def superspreader_matrix(window: int = 0) -> CostMatrix:
    entries = {}
    for (i, j), b in SUPERSPREADER_DISTINCT.items():
        entries[OpRef(1, i, j, 0)] = CostEntry(b, b, b // 2)
    for (i, j), b in SUPERSPREADER_REDUCE.items():
        entries[OpRef(1, i, j, 1)] = CostEntry(b, b, b // 4)
    return CostMatrix(window, entries)


def random_goa(rng: random.Random, max_regs=6, max_stages=3, max_chains=3, max_len=2,
               max_ops=6):
    """Small random mapping instance within the exhaustive-search guard."""
    regs = [(rng.randrange(max_stages), rng.choice((2, 3, 4, 6, 8, 10)))
            for _ in range(rng.randint(0, max_regs))]
    chains, n_ops = [], 0
    for _ in range(rng.randint(1, max_chains)):
        length = min(rng.randint(1, max_len), max_ops - n_ops)
        if length <= 0:
            break
        ch = []
        for _ in range(length):
            c_u = rng.randint(0, 20)
            ch.append((rng.randint(1, 12), rng.randint(0, c_u), c_u))
        chains.append(ch)
        n_ops += length
    return chain_specs(chains, regs)


# --- a second, independently written exhaustive search -------------------------

def _brute_feasible(mapping, inst) -> bool:
    regs = {r.reg_id: r for r in inst.registers.registers}
    cap = [0] * len(inst.operators)
    stages = [[] for _ in inst.operators]
    for r, o in mapping.items():
        cap[o] += regs[r].bits
        stages[o].append(regs[r].stage)
    for chain in inst.chains:
        for parent, child in zip(chain, chain[1:]):
            if not stages[child]:
                continue
            if cap[parent] < inst.operators[parent].size:
                return False
            if stages[parent] and max(stages[parent]) >= min(stages[child]):
                return False
    return True


def _brute_cost(mapping, inst) -> Fraction:
    regs = {r.reg_id: r for r in inst.registers.registers}
    cap = [0] * len(inst.operators)
    for r, o in mapping.items():
        cap[o] += regs[r].bits
    total = Fraction(0)
    for chain in inst.chains:
        for o in chain:
            op = inst.operators[o]
            if cap[o] < op.size:
                rho = Fraction(cap[o], op.size)
                total += op.c_s * rho + op.c_u * (1 - rho)
                break
        else:
            total += inst.operators[chain[-1]].c_s
    return total


def brute_force_min(inst) -> Fraction:
    reg_ids = sorted(r.reg_id for r in inst.registers.registers)
    n_ops = len(inst.operators)
    best = [None]

    def rec(n, mapping):
        if n == len(reg_ids):
            if _brute_feasible(mapping, inst):
                c = _brute_cost(mapping, inst)
                if best[0] is None or c < best[0]:
                    best[0] = c
            return
        rec(n + 1, mapping)
        for o in range(n_ops):
            rec(n + 1, {**mapping, reg_ids[n]: o})

    rec(0, {})
    return best[0]


# --- simulation scenarios ------------------------------------------------------

MICRO_SHAPES = [QueryShape(1, (0, 16, 32), 1), QueryShape(2, (0, 16, 32), 2)]


def micro_switch():
    from telemplan.bootstrap import SwitchConfig
    return SwitchConfig(stages=2, alus_per_stage=2, stage_mem_bits=8000, max_reg_bits=6000)


def micro_history(seed: int, windows: int = 20):
    from telemplan.workload import synth_cost_history
    return synth_cost_history(MICRO_SHAPES, windows, seed=seed, base_keys=120, amplitude=0.6)


def case_study_history():
    from telemplan.query import load_queries
    from telemplan.workload import WorkloadConfig, cost_matrices_for_trace, synth_bimodal
    queries = load_queries(DATA / "case_study_queries.json")
    cfg = WorkloadConfig(window_seconds=1.0, entry_bits={"reduce": 32, "distinct": 32})
    return [q.shape() for q in queries], cost_matrices_for_trace(queries, synth_bimodal(), cfg)


def case_study_registers():
    from telemplan.bootstrap import Register, RegisterConfig
    return RegisterConfig((Register(0, 0, 64 * 32), Register(1, 0, 2048 * 32)))
