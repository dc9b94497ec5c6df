from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdcsim.expert_parallel import (SHARED, BufferArena, BufferOverflow, MissingContribution, PipelineTiming,
                                    RoutingBatch, build_placement, combine_outputs, eplb_rebalance,
                                    expert_compute_time, plan_buffers, route_tokens, simulate_combine,
                                    simulate_dispatch)
from pdcsim.interconnect import Mechanism, default_planes, sync_rounds

MiB = 1 << 20
PLANES = default_planes()


# -- placement -------------------------------------------------------------

def test_ep320_one_expert_per_rank():
    p = build_placement(320, 32, 256, 32)
    assert p.experts_per_die == 1
    assert all(len(a) == 1 for a in p.assignment)
    flat = [e for a in p.assignment for e in a]
    assert flat.count(SHARED) == 32
    assert set(range(256)) <= set(flat)
    # Shared copies sit on every tenth rank.
    assert [r for r, a in enumerate(p.assignment) if a[0] == SHARED] == list(range(0, 320, 10))


def test_ep32_prefill_layout():
    p = build_placement(32, 32, 256, 32)
    assert p.experts_per_die == 10
    for a in p.assignment:
        assert a.count(SHARED) == 1
        routers = [e for e in a if e != SHARED]
        assert len(routers) == 9 and len(set(routers)) == 9


def test_placement_count_mismatch():
    with pytest.raises(ValueError):
        build_placement(320, 32, 256, 31)
    with pytest.raises(ValueError):
        build_placement(32, 32, 256, 32, experts_per_die=9)


@settings(max_examples=60, deadline=None)
@given(ep=st.integers(1, 64), per=st.integers(1, 6), shared_frac=st.floats(0, 0.3), red_frac=st.floats(0, 0.3),
       seed=st.integers(0, 100))
def test_placement_invariants(ep, per, shared_frac, red_frac, seed):
    total = ep * per
    shared = int(total * shared_frac)
    redundant = min(int(total * red_frac), total - shared - 1)
    router = total - shared - redundant
    load = np.random.default_rng(seed).random(router)
    try:
        p = build_placement(ep, shared, router, redundant, initial_load=load)
    except ValueError as exc:
        # Only legitimate refusal: a replica cannot find a distinct rank.
        assert "distinct rank" in str(exc)
        return
    flat = [e for a in p.assignment for e in a]
    assert len(flat) == shared + router + redundant
    assert all(len(a) == per for a in p.assignment)
    assert set(range(router)) <= set(flat)
    assert flat.count(SHARED) == shared
    assert p == build_placement(ep, shared, router, redundant, initial_load=load)


# -- buffers ---------------------------------------------------------------

def test_buffer_worked_example():
    b = plan_buffers(320, 96, 8, 1)
    assert b.max_tokens == 96
    assert b.dispatch_buffer == 320 * 96 * 7680 == 225 * MiB
    assert b.combine_buffer == 320 * 96 * 14336 == 420 * MiB
    assert b.total == 645 * MiB
    assert b.double_buffered


def test_buffer_zero_batch_and_two_experts():
    z = plan_buffers(320, 0, 8, 1)
    assert z.dispatch_buffer == z.combine_buffer == 0
    assert plan_buffers(320, 96, 8, 2).max_tokens == 192


def test_message_sizes():
    b = plan_buffers(8, 1, 8, 1)
    assert b.dispatch_msg_size == 7168 + 512
    assert b.combine_msg_size == 7168 * 2


def test_buffer_rejects_nonpositive():
    with pytest.raises(ValueError):
        plan_buffers(0, 96, 8, 1)


# -- routing ---------------------------------------------------------------

def _placement(ep=8, per=32):
    return build_placement(ep, 0, ep * per, 0, per)


def test_route_strictly_decreasing_scores():
    p = _placement()
    b = route_tokens(-np.arange(256.0)[None, :], p, 8)
    assert b.experts[0].tolist() == list(range(8))


def test_route_ties_go_to_low_ids():
    b = route_tokens(np.zeros((3, 256)), _placement(), 8)
    assert b.experts.tolist() == [list(range(8))] * 3
    assert np.allclose(b.weights, 1 / 8)


def test_route_matches_sort_oracle():
    rng = np.random.default_rng(4)
    scores = rng.integers(0, 5, size=(50, 256)).astype(float)  # many ties
    b = route_tokens(scores, _placement(), 8)
    for t in range(50):
        expect = sorted(range(256), key=lambda e: (-scores[t, e], e))[:8]
        assert b.experts[t].tolist() == expect
        w = np.exp(scores[t, expect] - scores[t, expect].max())
        assert np.allclose(b.weights[t], w / w.sum())


def test_route_topk_bounds():
    with pytest.raises(ValueError):
        route_tokens(np.zeros((1, 256)), _placement(), 257)
    with pytest.raises(ValueError):
        route_tokens(np.zeros((1, 255)), _placement(), 8)


def test_ep256_uniform_balance():
    p = build_placement(256, 0, 256, 0)
    b = route_tokens(np.random.default_rng(0).random((10_000, 256)), p, 8)
    assert b.histogram.sum() == 80_000
    assert b.histogram.max() / b.histogram.mean() <= 1.3


def test_replicas_split_round_robin():
    p = build_placement(4, 0, 2, 2, experts_per_die=1)  # both experts get one replica
    b = route_tokens(np.tile([1.0, 0.0], (6, 1)), p, 1, source_rank=np.zeros(6, dtype=int))
    ranks = p.replicas()[0]
    assert len(ranks) == 2
    assert b.dest_rank[:, 0].tolist() == [ranks[0], ranks[1]] * 3


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 200), k=st.integers(1, 16), seed=st.integers(0, 1000))
def test_routing_invariants(n, k, seed):
    p = _placement(8, 4)
    b = route_tokens(np.random.default_rng(seed).normal(size=(n, 32)), p, k)
    assert all(len(set(row)) == k for row in b.experts.tolist())
    assert (b.weights >= 0).all() and np.allclose(b.weights.sum(axis=1), 1)
    assert b.histogram.sum() == n * k


# -- EPLB ------------------------------------------------------------------

def _eplb_oracle(load, r):
    counts = [1] * len(load)
    picks = []
    for _ in range(r):
        best = max(range(len(load)), key=lambda e: (load[e] / counts[e], -e))
        picks.append(best)
        counts[best] += 1
    return picks


def test_eplb_uniform_by_tie_rule():
    res = eplb_rebalance(np.ones(16), 4)
    assert res.replicas == (0, 1, 2, 3)
    assert res.max_load_after == res.max_load_before == 1


def test_eplb_hot_expert_halves():
    load = np.ones(8)
    load[3] = 10
    res = eplb_rebalance(load, 1)
    assert res.replicas == (3,)
    assert res.max_load_after == 5


def test_eplb_zero_and_negative():
    assert eplb_rebalance(np.ones(4), 0).replicas == ()
    with pytest.raises(ValueError):
        eplb_rebalance(np.ones(4), -1)


@settings(max_examples=100, deadline=None)
@given(load=st.lists(st.integers(0, 1000), min_size=1, max_size=40), r=st.integers(0, 40))
def test_eplb_matches_greedy_oracle(load, r):
    res = eplb_rebalance(load, r)
    assert list(res.replicas) == _eplb_oracle(load, r)
    assert res.max_load_after <= res.max_load_before
    assert int(res.replica_counts.sum()) == len(load) + r


# -- dispatch / combine ----------------------------------------------------

def _bench(ep, per, seed=0, tokens=128, k=8):
    p = build_placement(ep, 0, 256, 0, per)
    b = route_tokens(np.random.default_rng(seed).random((tokens * ep, 256)), p, k)
    return b, plan_buffers(ep, tokens, k, per)


def _fixed(plane, ep):
    return (plane.startup(Mechanism.AIV_DIRECT) + plane.base_latency(ep > 16)
            + plane.sync_round_latency * sync_rounds(ep))


def test_dispatch_ep8_about_116():
    b, plan = _bench(8, 32)
    assert simulate_dispatch(b, plan, PLANES["ub_dispatch"]).latency == pytest.approx(116, rel=0.02)


def test_combine_ep256_about_149():
    b, plan = _bench(256, 1)
    d = simulate_dispatch(b, plan, PLANES["ub_dispatch"])
    assert simulate_combine(d.stats, plan, PLANES["ub_combine"]).latency == pytest.approx(149, rel=0.05)


def test_dispatch_per_rank_closed_form():
    # All ranks on one node, so every message uses the intra-node bandwidth.
    plane = PLANES["ub_dispatch"]
    b, plan = _bench(8, 32, seed=2, tokens=16)
    t = PipelineTiming()
    res = simulate_dispatch(b, plan, plane, t)
    beat = max(t.copy_us, t.quant_us, 7680 / (plane.link_bandwidth * 1e3))
    for r in range(8):
        n = int((b.source_rank.repeat(8) == r).sum())
        assert res.per_rank_latency[r] == pytest.approx(_fixed(plane, 8) + t.copy_us + t.quant_us + n * beat)


def test_zero_tokens_is_fixed_cost():
    empty = RoutingBatch(np.zeros((0, 8), int), np.zeros((0, 8)), np.zeros((0, 8), int),
                         np.zeros(0, int), np.zeros(8, int))
    res = simulate_dispatch(empty, plan_buffers(8, 0, 8, 32), PLANES["ub"])
    assert res.latency == pytest.approx(_fixed(PLANES["ub"], 8))


def test_overflow_detected():
    p = build_placement(2, 0, 2, 0, 1)
    # Three tokens from rank 0 all pick expert 1 on rank 1, but max_tokens is 2.
    b = route_tokens(np.tile([0.0, 1.0], (3, 1)), p, 1, source_rank=np.zeros(3, dtype=int))
    with pytest.raises(BufferOverflow):
        simulate_dispatch(b, plan_buffers(2, 2, 1, 1), PLANES["ub"])


def test_conservation_and_bytes():
    b, plan = _bench(16, 16, tokens=32)
    d = simulate_dispatch(b, plan, PLANES["ub"])
    assert d.stats.sent.sum() == d.stats.received.sum() == b.num_tokens * 8
    assert d.stats.bytes_sent == b.num_tokens * 8 * 7680
    c = simulate_combine(d.stats, plan, PLANES["ub"])
    assert c.tokens_out.tolist() == [32] * 16


def test_missing_contribution_detected():
    b, plan = _bench(8, 32, tokens=4)
    d = simulate_dispatch(b, plan, PLANES["ub"])
    d.stats.contributions[3] -= 1
    with pytest.raises(MissingContribution):
        simulate_combine(d.stats, plan, PLANES["ub"])


def test_top1_combine_is_identity():
    b, _ = _bench(8, 32, tokens=4, k=1)
    out = np.random.default_rng(1).normal(size=(b.num_tokens, 1, 16))
    assert np.allclose(b.weights, 1.0)
    assert np.array_equal(combine_outputs(b, out), out[:, 0, :])


def test_interleaved_dispatch_and_combine_never_alias():
    b0, plan = _bench(8, 32, seed=0, tokens=8)
    b1, _ = _bench(8, 32, seed=1, tokens=8)
    arena = BufferArena(plan)
    d0 = simulate_dispatch(b0, plan, PLANES["ub"], arena=arena)
    simulate_dispatch(b1, plan, PLANES["ub"], arena=arena)
    simulate_combine(d0.stats, plan, PLANES["ub"], arena=arena)
    assert arena.writes["dispatch"] and arena.writes["combine"]
    assert not arena.aliasing()
    lo, hi = arena.regions["combine"]
    assert all(lo <= s < e <= hi for s, e in arena.writes["combine"])


def test_perfect_eplb_ceiling():
    p = build_placement(64, 0, 256, 0, 4)
    b = route_tokens(np.random.default_rng(0).random((4096, 256)), p, 8)
    hist = b.histogram
    assert expert_compute_time(hist, 1.0, perfect=True) <= expert_compute_time(hist, 1.0)
    assert expert_compute_time(np.full(64, 7), 1.0) == expert_compute_time(np.full(64, 7), 1.0, perfect=True)


@settings(max_examples=25, deadline=None)
@given(ep=st.sampled_from([2, 4, 8, 16]), tokens=st.integers(0, 24), k=st.integers(1, 8), seed=st.integers(0, 999))
def test_eq2_bound_prevents_overflow(ep, tokens, k, seed):
    per = 32 // ep * 2
    p = build_placement(ep, 0, ep * per, 0, per)
    n = tokens * ep
    scores = np.random.default_rng(seed).random((n, ep * per))
    b = route_tokens(scores, p, k, source_rank=np.repeat(np.arange(ep), tokens))
    plan = plan_buffers(ep, tokens, k, per)
    d = simulate_dispatch(b, plan, PLANES["ub"])
    assert d.stats.sent.max(initial=0) <= plan.max_tokens
    assert d.stats.sent.sum() == n * k
    c = simulate_combine(d.stats, plan, PLANES["ub"])
    assert c.tokens_out.tolist() == [tokens] * ep
    assert math.isfinite(c.latency)
