import ipaddress

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import DATA
from telemplan.query import (
    DataflowOp,
    FieldRef,
    MapField,
    QueryError,
    QuerySpec,
    RefinementPlan,
    build_chains,
    dump_queries,
    finest_plan,
    load_queries,
    mask_ip,
    refine_query,
    stateful_operators,
)
from telemplan.workload import execute_pipeline


@pytest.fixture(scope="module")
def table1():
    return {q.qid: q for q in load_queries(DATA / "table1_queries.json")}


def ip(text):
    return int(ipaddress.IPv4Address(text))


def test_single_reduce_query_has_one_stateful_op(table1):
    ops = stateful_operators(table1[1])
    assert [op.kind for _, op in ops] == ["reduce"]


def test_superspreader_has_distinct_then_reduce(table1):
    ops = stateful_operators(table1[3])
    assert [op.kind for _, op in ops] == ["distinct", "reduce"]
    assert ops[0][0] < ops[1][0]


def test_stateless_query_has_no_stateful_ops():
    q = QuerySpec(9, (DataflowOp("filter"), DataflowOp("map", fields=(MapField("sIP"),))),
                  FieldRef("sIP"))
    assert stateful_operators(q) == []


def test_refine_inserts_mask_before_distinct(table1):
    q = table1[3]
    rq = refine_query(q, 0, 8)
    assert rq.ops[0].kind == "map"
    assert rq.ops[0].masks == (("sIP", 8),)
    # no allow-set filter when refining from the root
    assert len(rq.ops) == len(q.ops) + 1
    assert rq.ops[1:] == q.ops


def test_refine_from_root_truncates_at_first_stateful(table1):
    q = table1[3]
    rq = refine_query(q, 0, 32, upto_op=0, allow_set={1, 2})
    kinds = [op.kind for op in rq.ops]
    assert kinds == ["map", "map", "distinct"]


def test_refine_allow_set_filters_prior_prefix(table1):
    q = table1[3]
    rq = refine_query(q, 8, 32, upto_op=0, allow_set={ip("10.0.0.0")})
    tuples = [
        {"sIP": ip("10.1.2.3"), "dIP": 1},
        {"sIP": ip("10.9.9.9"), "dIP": 2},
        {"sIP": ip("11.0.0.1"), "dIP": 3},
        {"sIP": ip("10.1.2.3"), "dIP": 1},
        {"sIP": ip("192.168.0.1"), "dIP": 4},
    ]
    out, costs = execute_pipeline(rq, tuples)
    assert {t["sIP"] >> 24 for t in out} == {10}
    assert costs[0].n_in == 3
    assert costs[0].n_out == 2


def test_refine_rejects_bad_pairs(table1):
    with pytest.raises(QueryError):
        refine_query(table1[3], 16, 8)
    with pytest.raises(QueryError):
        refine_query(table1[3], 0, 12)
    with pytest.raises(QueryError):
        refine_query(table1[3], 0, 8, upto_op=5)


def test_superspreader_two_step_plan_gives_two_chains(table1):
    plan = RefinementPlan({3: (0, 8, 32)})
    chains = build_chains(plan, [table1[3]])
    assert [len(c) for c in chains] == [2, 2]
    assert [c.operators[0].level for c in chains] == [8, 32]
    assert sum(len(c) for c in chains) == 4


def test_single_op_query_gives_one_chain(table1):
    chains = build_chains(RefinementPlan({1: (0, 32)}), [table1[1]])
    assert len(chains) == 1 and len(chains[0]) == 1


def test_finest_plan_operator_total(table1):
    chains = build_chains(finest_plan(list(table1.values())), list(table1.values()))
    assert sum(len(c) for c in chains) == 17


def test_chain_positions_are_a_bijection(table1):
    plan = RefinementPlan({q: (0, 16, 32) for q in table1})
    for ch in build_chains(plan, list(table1.values())):
        assert sorted(ch.position(op) for op in ch.operators) == list(range(1, len(ch) + 1))


def test_build_chains_deterministic(table1):
    plan = RefinementPlan({q: (0, 8, 24, 32) for q in table1})
    qs = list(table1.values())
    assert build_chains(plan, qs) == build_chains(plan, list(reversed(qs)))


def test_plan_must_cover_every_query(table1):
    with pytest.raises(QueryError):
        build_chains(RefinementPlan({1: (0, 32)}), [table1[1], table1[3]])


def test_plan_validation():
    with pytest.raises(QueryError):
        RefinementPlan({1: (8, 32)})
    with pytest.raises(QueryError):
        RefinementPlan({1: (0, 16, 16)})


def test_json_round_trip(table1, tmp_path):
    path = tmp_path / "q.json"
    dump_queries(list(table1.values()), path)
    assert {q.qid: q for q in load_queries(path)} == table1


def test_mask_ip():
    assert mask_ip(ip("10.1.2.3"), 8) == ip("10.0.0.0")
    assert mask_ip(ip("10.1.2.3"), 0) == 0
    assert mask_ip(ip("10.1.2.3"), 32) == ip("10.1.2.3")


packet = st.fixed_dictionaries({
    "sIP": st.integers(0, 2**32 - 1), "dIP": st.integers(0, 2**32 - 1),
    "sPort": st.integers(0, 65535), "dPort": st.sampled_from([22, 80, 443]),
    "proto": st.sampled_from([6, 17]), "len": st.integers(40, 1500),
    "tcpFlags": st.sampled_from([0, 2, 16, 18]), "ts": st.just(0.0),
})


@given(st.lists(packet, max_size=40), st.sampled_from([(0, 8), (0, 32), (8, 16), (16, 32)]))
def test_refined_operators_never_grow_tuples(tuples, pair):
    for q in load_queries(DATA / "table1_queries.json"):
        rq = refine_query(q, *pair, allow_set={mask_ip(t["sIP"], pair[0]) for t in tuples[::2]})
        _, costs = execute_pipeline(rq, tuples)
        assert all(c.n_out <= c.n_in for c in costs)
