from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdcsim.interconnect import CollectiveKind, PlaneSpec, default_planes, estimate_collective
from pdcsim.pipeline import EventLoop
from pdcsim.prefill_hybrid import (AllocationError, Instance, compare_dp_vs_hybrid, map_connections,
                                   pack_sequences, plan_mla_stages, schedule_kv_transfer,
                                   simulate_decode_with_transfers)
from pdcsim.workload import WorkloadSpec, generate_workload

RDMA = default_planes()["rdma"]
KV_PER_TOKEN = 70272


# -- packing ---------------------------------------------------------------

def test_pack_even_split():
    p = pack_sequences([5, 3, 2, 6], 4)
    assert p.rank_token_counts == (4, 4, 4, 4)
    assert p.segment_map[0] == ((0, 0, 4),)
    assert p.segment_map[1] == ((0, 4, 5), (1, 0, 3))


def test_pack_identity():
    p = pack_sequences([(42, 100)], 1)
    assert p.rank_token_counts == (100,) and p.segment_map == (((42, 0, 100),),)


def test_pack_remainder_rule():
    assert pack_sequences([7], 4).rank_token_counts == (2, 2, 2, 1)


def test_pack_errors():
    with pytest.raises(ValueError):
        pack_sequences([], 4)
    with pytest.raises(ValueError):
        pack_sequences([3], 0)


@settings(max_examples=200, deadline=None)
@given(lens=st.lists(st.integers(0, 5000), min_size=1, max_size=40), ranks=st.integers(1, 64))
def test_packing_invariants(lens, ranks):
    p = pack_sequences(lens, ranks)
    assert sum(p.rank_token_counts) == sum(lens)
    assert max(p.rank_token_counts) - min(p.rank_token_counts) <= 1
    # Segments tile each rank exactly and replay the requests in order.
    flat = [seg for rank in p.segment_map for seg in rank]
    for r, segs in enumerate(p.segment_map):
        assert sum(hi - lo for _, lo, hi in segs) == p.rank_token_counts[r]
    rebuilt: dict[int, int] = {}
    last = -1
    for rid, lo, hi in flat:
        assert rid >= last
        last = rid
        assert lo == rebuilt.get(rid, 0) and hi > lo
        rebuilt[rid] = hi
    assert all(rebuilt.get(i, 0) == n for i, n in enumerate(lens))


# -- DP vs hybrid ----------------------------------------------------------

def test_equal_lengths_balanced():
    r = compare_dp_vs_hybrid([512] * 8, 8)
    assert r.dp_imbalance == r.hybrid_imbalance == 1.0


def test_long_prompt_imbalance():
    r = compare_dp_vs_hybrid([8192, 128, 128, 128], 4)
    assert r.dp_imbalance == pytest.approx(8192 / ((8192 + 384) / 4))
    assert r.dp_imbalance == pytest.approx(3.83, abs=0.01)
    assert r.hybrid_imbalance <= 1.001


def test_idle_ranks_convention():
    r = compare_dp_vs_hybrid([1000, 2000, 3000], 32)
    assert r.dp_imbalance is None and r.idle_ranks == 29
    assert all(x > 0 for x in r.hybrid_rank_tokens)


@settings(max_examples=200, deadline=None)
@given(lens=st.lists(st.integers(1, 10_000), min_size=1, max_size=64), ranks=st.integers(1, 32))
def test_hybrid_dominates_dp(lens, ranks):
    r = compare_dp_vs_hybrid(lens, ranks)
    if r.dp_imbalance is not None:
        assert r.hybrid_imbalance <= r.dp_imbalance + 1e-12
    if len(set(lens)) == 1 and len(lens) == ranks:
        assert r.dp_imbalance == r.hybrid_imbalance == 1.0


# -- staged attention ------------------------------------------------------

def test_heads_split_evenly_at_tp32():
    plan = plan_mla_stages(pack_sequences([4096] * 4, 32), 32)
    assert plan.heads_per_rank == (4,) * 32


def test_uneven_heads_differ_by_one():
    plan = plan_mla_stages(pack_sequences([100], 3), 3, num_heads=128)
    assert sorted(set(plan.heads_per_rank)) == [42, 43] and sum(plan.heads_per_rank) == 128


def test_tp1_skips_collectives():
    plan = plan_mla_stages(pack_sequences([4096], 1), 1)
    assert plan.collective_a_bytes == plan.collective_b_bytes == 0
    assert plan.latency == 0.0


def test_collective_volumes_16k():
    ub = PlaneSpec()
    plan = plan_mla_stages(pack_sequences([4096] * 4, 32), 32, 7168, 128, ub)
    assert plan.collective_a_bytes == 16384 * 2112
    assert plan.collective_b_bytes == 16384 * 4 * 128
    assert plan.collective_a_latency == estimate_collective(CollectiveKind.ALL_GATHER, 32, 16384 * 2112, ub).latency
    assert plan.collective_b_latency > 0


def test_tp_beyond_heads_rejected():
    with pytest.raises(ValueError):
        plan_mla_stages(pack_sequences([10], 1), 129)
    with pytest.raises(ValueError):
        plan_mla_stages(pack_sequences([10], 1), 0)


# -- P/D mapping -----------------------------------------------------------

def test_mapping_worked_example():
    c = map_connections(16, 4, 8)
    assert c.ratio == 4 and c.group_size == 2
    assert 5 // c.group_size == 2
    assert c.mapping[(5, 3)] == 11


def test_mapping_ratio_one():
    c = map_connections(4, 4, 6)
    assert c.group_size == 6
    assert all(p == tp for (dp, tp), p in c.mapping.items())


def test_mapping_divisibility_errors():
    with pytest.raises(ValueError, match="decode_tp_size"):
        map_connections(16, 3, 8)
    with pytest.raises(ValueError, match="ratio"):
        map_connections(16, 4, 6)
    with pytest.raises(ValueError):
        map_connections(0, 4, 8)


@settings(max_examples=150, deadline=None)
@given(dtp=st.integers(1, 8), ratio=st.integers(1, 8), groups=st.integers(1, 6))
def test_mapping_balanced_and_pure(dtp, ratio, groups):
    ptp, ddp = dtp * ratio, ratio * groups
    c = map_connections(ptp, dtp, ddp)
    assert set(c.mapping) == {(d, t) for d in range(ddp) for t in range(dtp)}
    assert all(0 <= p < ptp for p in c.mapping.values())
    # Enumerated oracle of the group formula.
    for (d, t), p in c.mapping.items():
        assert p == (d // (ddp // ratio)) * dtp + t
    assert c.load() == [ddp * dtp // ptp] * ptp
    assert c == map_connections(ptp, dtp, ddp)


# -- KV handoff ------------------------------------------------------------

class _Req:
    def __init__(self, rid, n):
        self.id, self.prompt_len = rid, n


def test_kv_transfer_closed_form():
    tr = schedule_kv_transfer(_Req(1, 4096), Instance("p", 0), Instance("d", 512), RDMA)
    nbytes = 4096 * KV_PER_TOKEN
    expect = RDMA.sdma_startup + RDMA.base_latency_inter + nbytes / (RDMA.bandwidth(True) * 1e3)
    assert tr.latency == pytest.approx(expect)
    assert tr.plane_bytes == {"UB": 0, "RDMA": nbytes}


def test_kv_transfer_zero_length_is_fixed_cost():
    tr = schedule_kv_transfer(_Req(1, 0), Instance("p", 0), Instance("d", 512), RDMA)
    assert tr.latency == pytest.approx(RDMA.sdma_startup + RDMA.base_latency_inter)


def test_kv_allocation_failure():
    dst = Instance("d", 512, kv_capacity=1000)
    with pytest.raises(AllocationError):
        schedule_kv_transfer(_Req(1, 4096), Instance("p", 0), dst, RDMA)
    assert dst.kv_used == 0


def test_step_order_in_trace():
    loop = EventLoop()
    schedule_kv_transfer(_Req(7, 4096), Instance("p", 0), Instance("d", 512), RDMA, prefill_us=2000, loop=loop)
    kinds = [e.kind for e in loop.run().events]
    assert kinds == ["kv_alloc", "prefill_dispatch", "kv_transfer_start", "kv_transfer_done"]


def test_concurrent_transfers_do_not_change_tpot():
    reqs = generate_workload(WorkloadSpec(num_requests=100))
    dst = Instance("d", 512)
    transfers = [schedule_kv_transfer(r, Instance("p", 0), dst, RDMA, prefill_us=1000 * i)
                 for i, r in enumerate(reqs)]
    base = simulate_decode_with_transfers(50, 84000)
    busy = simulate_decode_with_transfers(50, 84000, transfers)
    assert busy.iteration_ends == base.iteration_ends
    assert busy.tpot_us == base.tpot_us == 84000
    assert busy.plane_bytes["UB"] == 0
    assert busy.plane_bytes["RDMA"] == sum(t.nbytes for t in transfers)
