from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdcsim.context_cache import (CONTEXT_NS, ContextIndex, DecodeStorage, ModelKind, decode_storage_mode,
                                  decode_storage_policy, lookup_prefix, make_blocks, split_into_blocks,
                                  store_blocks)
from pdcsim.hashing import mix64
from pdcsim.mempool import MemoryPool

M = (1 << 64) - 1
KV = 70272


def _sm64(x):
    # Plain-int SplitMix64 output step, written independently of the package.
    z = (x + 0x9E3779B97F4A7C15) & M
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M
    return z ^ (z >> 31)


def _oracle_chain(tokens, bs):
    prefix, out = 0x243F6A8885A308D3, []
    for s in range(0, len(tokens), bs):
        chunk = [int(t) for t in tokens[s:s + bs]]
        acc = sum(_sm64(t ^ ((i * 0x9E3779B97F4A7C15) & M)) for i, t in enumerate(chunk)) & M
        bh = _sm64(acc ^ len(chunk))
        comb = _sm64(((_sm64(prefix) * 31) + bh) & M)
        out.append((prefix, bh, comb, len(chunk)))
        prefix = comb
    return out


def _tokens(n, seed=0):
    return np.random.default_rng(seed).integers(0, 2**63, size=n, dtype=np.int64).astype(np.uint64)


def _pool(quota=1 << 50):
    pool = MemoryPool(8, 1 << 34, 1 << 36, materialize=False)
    pool.create_namespace(CONTEXT_NS, quota)
    return pool


def test_splitmix_reference_value():
    # First output of SplitMix64 seeded with 0.
    assert mix64(0) == 0xE220A8397B1DCDAF == _sm64(0)


def test_block_counts():
    assert len(split_into_blocks(_tokens(256), 128)) == 2
    keys = split_into_blocks(_tokens(300), 128)
    assert [k.num_tokens for k in keys] == [128, 128, 44]


def test_chain_matches_hand_rolled_oracle():
    toks = _tokens(700, 3)
    keys = split_into_blocks(toks, 256)
    assert [(k.prefix_hash, k.block_hash, k.combined, k.num_tokens) for k in keys] == _oracle_chain(toks, 256)


def test_divergence_at_token_129():
    a = _tokens(256, 1)
    b = a.copy()
    b[128] ^= np.uint64(1)
    ka, kb = split_into_blocks(a), split_into_blocks(b)
    assert ka[0] == kb[0]
    assert ka[1] != kb[1]
    exp_a, exp_b = _oracle_chain(a, 128), _oracle_chain(b, 128)
    assert exp_a[0] == exp_b[0] and exp_a[1][2] != exp_b[1][2]


@pytest.mark.parametrize("bs", [64, 127, 513])
def test_block_size_range(bs):
    with pytest.raises(ValueError):
        split_into_blocks(_tokens(300), bs)


def test_empty_tokens_rejected():
    with pytest.raises(ValueError):
        split_into_blocks([], 128)


def test_lookup_full_and_empty():
    pool, idx = _pool(), ContextIndex()
    keys = split_into_blocks(_tokens(1000))
    assert lookup_prefix(idx, keys, pool) == 0
    store_blocks(idx, pool, keys, make_blocks(keys, KV))
    assert lookup_prefix(idx, keys, pool) == len(keys)


@pytest.mark.parametrize("j", [1, 2, 5, 8])
def test_divergence_inside_block_j(j):
    pool, idx = _pool(), ContextIndex()
    base = _tokens(1024, 5)
    keys = split_into_blocks(base)
    store_blocks(idx, pool, keys, make_blocks(keys, KV))
    other = base.copy()
    other[(j - 1) * 128 + 17] ^= np.uint64(0xFF)
    assert lookup_prefix(idx, split_into_blocks(other), pool) == j - 1


def test_store_twice_dedups():
    pool, idx = _pool(), ContextIndex()
    keys = split_into_blocks(_tokens(640))
    first = store_blocks(idx, pool, keys, make_blocks(keys, KV))
    snap = set(idx.keys)
    second = store_blocks(idx, pool, keys, make_blocks(keys, KV))
    assert first.stored == 5 and second.stored == 0 and second.deduped == 5
    assert idx.keys == snap


def test_shared_prefix_stored_once():
    pool, idx = _pool(), ContextIndex()
    a = _tokens(128 * 5, 11)
    b = np.concatenate([a[:256], _tokens(128 * 3, 12)])
    ka, kb = split_into_blocks(a), split_into_blocks(b)
    ra = store_blocks(idx, pool, ka, make_blocks(ka, KV))
    rb = store_blocks(idx, pool, kb, make_blocks(kb, KV))
    unique = {k.combined for k in ka} | {k.combined for k in kb}
    assert ra.stored + rb.stored == len(unique) == 2 + 3 + 3
    assert rb.deduped == 2


def test_quota_one_block_gives_partial_store():
    block = 128 * KV
    alloc = -(-block // (2 << 20)) * (2 << 20)
    pool, idx = _pool(quota=alloc), ContextIndex()
    keys = split_into_blocks(_tokens(384))
    rep = store_blocks(idx, pool, keys, make_blocks(keys, KV))
    assert rep.stored == 1 and rep.partial and rep.failed == 2 and rep.error


def test_evicted_block_reads_as_miss():
    pool, idx = _pool(), ContextIndex()
    keys = split_into_blocks(_tokens(512))
    store_blocks(idx, pool, keys, make_blocks(keys, KV))
    pool.delete(CONTEXT_NS, keys[1].combined)
    assert lookup_prefix(idx, keys, pool) == 1


def test_decode_storage_policy():
    assert decode_storage_policy(ModelKind.REASONING, False) is False
    assert decode_storage_policy(ModelKind.NON_REASONING, False) is True
    assert decode_storage_policy(ModelKind.REASONING, True, final_response=True) is True
    assert decode_storage_policy(ModelKind.REASONING, True, final_response=False) is False
    assert decode_storage_mode(ModelKind.REASONING, True) is DecodeStorage.FINAL_RESPONSE
    assert decode_storage_mode(ModelKind.REASONING) is DecodeStorage.NONE
    assert decode_storage_mode(ModelKind.NON_REASONING) is DecodeStorage.ALL


def test_prefix_hit_count_by_enumeration():
    # Every subset of a 6-block chain as the stored set.
    keys = split_into_blocks(_tokens(128 * 6, 9))
    for r in range(len(keys) + 1):
        for subset in itertools.combinations(range(len(keys)), r):
            idx = ContextIndex({keys[i].combined for i in subset})
            expect = next((i for i in range(len(keys)) if i not in subset), len(keys))
            assert lookup_prefix(idx, keys) == expect
            for n in range(1, len(keys) + 1):
                prev = lookup_prefix(idx, keys[:n - 1])
                present = (n - 1) in subset
                assert lookup_prefix(idx, keys[:n]) == (prev + 1 if prev == n - 1 and present else prev)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 2000), cut=st.integers(0, 1999), bs=st.sampled_from([128, 256, 512]),
       seed=st.integers(0, 1000))
def test_shared_prefix_shares_keys(n, cut, bs, seed):
    a = _tokens(n, seed)
    cut = min(cut, n - 1)
    b = a.copy()
    b[cut] ^= np.uint64(1)
    ka, kb = split_into_blocks(a, bs), split_into_blocks(b, bs)
    j = cut // bs
    assert ka[:j] == kb[:j]
    assert all(x.combined != y.combined for x, y in zip(ka[j:], kb[j:]))
    assert len(ka) == -(-n // bs)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=6))
def test_store_idempotent(blocks_per_prompt):
    pool, idx = _pool(), ContextIndex()
    prompts = [split_into_blocks(_tokens(128 * n, i)) for i, n in enumerate(blocks_per_prompt)]
    for keys in prompts:
        store_blocks(idx, pool, keys, make_blocks(keys, KV))
    snap = set(idx.keys)
    for keys in prompts:
        assert store_blocks(idx, pool, keys, make_blocks(keys, KV)).stored == 0
    assert idx.keys == snap


def test_reuse_never_exceeds_declared_prefix():
    from pdcsim.workload import WorkloadSpec, generate_workload
    pool, idx = _pool(), ContextIndex()
    for r in generate_workload(WorkloadSpec(num_requests=40, reuse_rate=0.7)):
        keys = split_into_blocks(r.token_hashes)
        hits = lookup_prefix(idx, keys, pool)
        reused = min(hits * 128, r.prompt_len)
        if r.reuse_source is not None:
            # The source is stored, so the declared prefix is fully found.
            assert reused >= r.reused_prefix_len
        store_blocks(idx, pool, keys, make_blocks(keys, KV))
