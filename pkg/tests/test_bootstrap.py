import itertools
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import SUPERSPREADER, superspreader_matrix
from telemplan.bootstrap import (
    BootstrapPlan,
    MissingCostError,
    PlanningError,
    RegisterConfig,
    SwitchConfig,
    enumerate_query_plans,
    exact_fit_registers,
    min_mean_tom_curve,
    select_refinement_plan,
    snr_scale,
    snr_sizes,
    tom_of_plan,
)
from telemplan.query import OpRef, QueryShape, RefinementPlan, build_chains
from telemplan.workload import CostEntry, CostMatrix, synth_cost_history


def test_tom_two_step_plan_via_8():
    res = tom_of_plan(RefinementPlan({1: (0, 8, 32)}), [superspreader_matrix()], [SUPERSPREADER])
    assert res.series == (523_700 + 948_800 + 6_500 + 14_000_000,)
    assert abs(res.mean - 15_500_000) <= 50_000


def test_tom_two_step_plan_via_16():
    res = tom_of_plan(RefinementPlan({1: (0, 16, 32)}), [superspreader_matrix()], [SUPERSPREADER])
    assert res.series == (727_300 + 521_900 + 596_600 + 5_400_000,)


def test_tom_without_stateful_ops_is_zero():
    shape = QueryShape(5, (0, 32), 0)
    res = tom_of_plan(RefinementPlan({5: (0, 32)}), [CostMatrix(0, {})], [shape])
    assert res.mean == 0


def test_tom_missing_entry_names_key():
    cm = CostMatrix(3, {OpRef(1, 0, 32, 0): CostEntry(1, 1, 1)})
    with pytest.raises(MissingCostError, match=r"qid=1, i=0, j=32, k=1"):
        tom_of_plan(RefinementPlan({1: (0, 32)}), [cm], [QueryShape(1, (0, 32), 2)])


def test_tom_additive_over_queries():
    shapes = [QueryShape(1, (0, 16, 32), 2), QueryShape(2, (0, 8, 32), 1)]
    hist = synth_cost_history(shapes, 4, seed=3)
    plan = RefinementPlan({1: (0, 16, 32), 2: (0, 8, 32)})
    both = tom_of_plan(plan, hist, shapes)
    one = tom_of_plan(RefinementPlan({1: (0, 16, 32)}), hist, shapes[:1])
    two = tom_of_plan(RefinementPlan({2: (0, 8, 32)}), hist, shapes[1:])
    assert both.series == tuple(a + b for a, b in zip(one.series, two.series))


def test_plan_enumeration():
    plans = enumerate_query_plans(QueryShape(1, (0, 8, 16, 24, 32), 1))
    assert (0, 32) in plans and (0, 8, 16, 32) in plans
    assert all(len(p) <= 4 and p[0] == 0 and p[-1] == 32 for p in plans)
    assert len(plans) == 1 + 3 + 3


def test_select_single_candidate():
    shape = QueryShape(1, (0, 32), 1)
    cm = CostMatrix(0, {OpRef(1, 0, 32, 0): CostEntry(100, 10, 1)})
    assert select_refinement_plan([shape], [cm], SwitchConfig()) == RefinementPlan({1: (0, 32)})


def test_select_prefers_smaller_tom_at_same_k():
    # (0,8,32) and (0,16,32) both use two operators; the second needs less memory
    shape = QueryShape(1, (0, 8, 16, 32), 1)
    big = {(0, 8): 5, (8, 32): 5, (0, 16): 3, (16, 32): 2, (0, 32): 10**9, (8, 16): 10**9}
    entries = {OpRef(1, i, j, 0): CostEntry(big[(i, j)], 1, 1) for i, j in shape.transitions()}
    cfg = SwitchConfig(stages=1, alus_per_stage=3, stage_mem_bits=1000, max_reg_bits=1000)
    plan = select_refinement_plan([shape], [CostMatrix(0, entries)], cfg)
    assert plan == RefinementPlan({1: (0, 16, 32)})


def test_select_matches_exhaustive_utility():
    shapes = [QueryShape(1, (0, 16, 24, 32), 1), QueryShape(2, (0, 8, 32), 2)]
    hist = synth_cost_history(shapes, 3, seed=11, base_keys=60)
    cfg = SwitchConfig(stages=3, alus_per_stage=4, stage_mem_bits=9000, max_reg_bits=6000)
    best = None
    for pick in itertools.product(*(enumerate_query_plans(s) for s in shapes)):
        plan = RefinementPlan({s.qid: p for s, p in zip(shapes, pick)})
        k = sum((len(p) - 1) * s.n_stateful for s, p in zip(shapes, pick))
        m = cfg.total_mem_bits - tom_of_plan(plan, hist, shapes).mean
        o = cfg.total_regs - k
        if m > 0 and o > 0 and (best is None or m * o > best):
            best = m * o
    chosen = select_refinement_plan(shapes, hist, cfg)
    k = sum((len(p) - 1) * s.n_stateful for s, p in zip(shapes, chosen.per_query.values()))
    m = cfg.total_mem_bits - tom_of_plan(chosen, hist, shapes).mean
    assert m * (cfg.total_regs - k) == best


def test_curve_starts_at_finest_operator_count():
    shapes = [QueryShape(1, (0, 16, 32), 2), QueryShape(2, (0, 8, 32), 1)]
    pts = min_mean_tom_curve(shapes, synth_cost_history(shapes, 2), SwitchConfig())
    assert pts[0].k == 3
    assert [p.k for p in pts] == sorted(p.k for p in pts)


def test_select_raises_when_nothing_fits():
    shape = QueryShape(1, (0, 32), 1)
    cm = CostMatrix(0, {OpRef(1, 0, 32, 0): CostEntry(10**9, 1, 1)})
    with pytest.raises(PlanningError):
        select_refinement_plan([shape], [cm], SwitchConfig())


def test_snr_sizes_example():
    cfg = SwitchConfig(stages=2, alus_per_stage=8, stage_mem_bits=2_000_000, max_reg_bits=1_000_000)
    assert snr_scale(cfg) == Fraction(1_000_000, 18)
    sizes = [r.bits for r in snr_sizes(cfg).registers if r.stage == 0]
    assert sizes == [k * 1_000_000 // 18 for k in range(1, 9)]


@given(st.integers(1, 12), st.integers(1, 16), st.integers(1, 10**7), st.data())
def test_snr_is_maximal_and_valid(stages, alus, stage_mem, data):
    max_reg = data.draw(st.integers(1, stage_mem))
    cfg = SwitchConfig(stages, alus, stage_mem, max_reg)
    s = snr_scale(cfg)
    assert alus * s <= max_reg and s * alus * (alus + 1) / 2 <= stage_mem
    assert alus * s == max_reg or s * alus * (alus + 1) / 2 == stage_mem
    regs = snr_sizes(cfg)
    regs.validate(cfg)
    assert len(regs.registers) == cfg.total_regs


def test_exact_fit_orders_children_after_parents():
    shape = QueryShape(1, (0, 16, 32), 2)
    chains = build_chains(RefinementPlan({1: (0, 16, 32)}), [shape])
    sizes = {op: 1000 for ch in chains for op in ch.operators}
    cfg = SwitchConfig(stages=4, alus_per_stage=2, stage_mem_bits=4000, max_reg_bits=2000)
    regs, mapping = exact_fit_registers(chains, sizes, cfg)
    regs.validate(cfg)
    stage = {op: regs.by_id()[r].stage for r, op in mapping.items()}
    for ch in chains:
        assert stage[ch.operators[0]] < stage[ch.operators[1]]
    assert sorted(r.bits for r in regs.registers) == [1000] * 4


def test_exact_fit_truncates_oversized_operator():
    shape = QueryShape(1, (0, 32), 1)
    chains = build_chains(RefinementPlan({1: (0, 32)}), [shape])
    cfg = SwitchConfig(stages=1, alus_per_stage=2, stage_mem_bits=500, max_reg_bits=300)
    regs, mapping = exact_fit_registers(chains, {chains[0].operators[0]: 10_000}, cfg)
    assert [r.bits for r in regs.registers] == [300]


def test_bootstrap_plan_round_trip(tmp_path):
    plan = BootstrapPlan(RefinementPlan({1: (0, 8, 32)}), snr_sizes(SwitchConfig()))
    plan.save(tmp_path / "p.json")
    back = BootstrapPlan.load(tmp_path / "p.json", [SUPERSPREADER])
    assert back.refinement == plan.refinement and back.registers == plan.registers
    assert len(back.chains) == 2


def test_register_config_validation():
    cfg = SwitchConfig(stages=1, alus_per_stage=1, stage_mem_bits=10, max_reg_bits=10)
    with pytest.raises(ValueError):
        RegisterConfig.from_json([{"id": 0, "stage": 0, "bits": 11}]).validate(cfg)
    with pytest.raises(ValueError):
        SwitchConfig(stages=1, alus_per_stage=1, stage_mem_bits=10, max_reg_bits=20)
