"""Prefix-chained paged KV blocks stored in the memory pool.

A block's pool key folds the hash of every earlier block into it, so two
prompts share a key only when they share the entire prefix up to and
including that block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .hashing import combine, hash_token_block
from .mempool import CapacityExceeded, MemoryPool, QuotaExceeded

MIN_BLOCK, MAX_BLOCK = 128, 512
CONTEXT_NS = "context"
_ROOT = 0x243F6A8885A308D3


@dataclass(frozen=True)
class BlockKey:
    prefix_hash: int
    block_hash: int
    combined: int
    num_tokens: int


@dataclass(frozen=True)
class KVBlock:
    key: BlockKey
    num_tokens: int
    size: int


def split_into_blocks(token_hashes: Sequence[int] | np.ndarray, block_size: int = 128) -> list[BlockKey]:
    """Chop a token sequence into paged blocks with chained prefix hashes.

    Raises:
        ValueError: empty token list or ``block_size`` outside [128, 512].
    """
    if not MIN_BLOCK <= block_size <= MAX_BLOCK:
        raise ValueError(f"block_size must lie in [{MIN_BLOCK}, {MAX_BLOCK}]")
    tokens = np.asarray(token_hashes, dtype=np.uint64)
    if tokens.size == 0:
        raise ValueError("token list is empty")
    keys: list[BlockKey] = []
    prefix = _ROOT
    for start in range(0, tokens.size, block_size):
        chunk = tokens[start:start + block_size]
        bh = hash_token_block(chunk)
        key = BlockKey(prefix, bh, combine(prefix, bh), int(chunk.size))
        keys.append(key)
        prefix = key.combined
    return keys


def make_blocks(keys: Sequence[BlockKey], kv_bytes_per_token: int) -> list[KVBlock]:
    return [KVBlock(k, k.num_tokens, k.num_tokens * kv_bytes_per_token) for k in keys]


@dataclass
class StoreReport:
    stored: int = 0
    deduped: int = 0
    failed: int = 0
    bytes_written: int = 0
    error: str | None = None

    @property
    def partial(self) -> bool:
        return self.failed > 0


@dataclass
class ContextIndex:
    """Set of block keys known to be resident in the pool.

    The pool is the source of truth; the index is a metadata mirror kept in
    sync on store and re-validated on lookup so evicted blocks read as misses.
    """

    keys: set = field(default_factory=set)

    def __contains__(self, key: BlockKey) -> bool:
        return key.combined in self.keys


def lookup_prefix(index: ContextIndex, block_keys: Sequence[BlockKey], pool: MemoryPool | None = None,
                  namespace: str = CONTEXT_NS) -> int:
    """Length of the longest stored prefix of ``block_keys`` (stops at first miss)."""
    hits = 0
    for key in block_keys:
        if key.combined not in index.keys:
            break
        if pool is not None and not pool.contains(namespace, key.combined):
            index.keys.discard(key.combined)
            break
        hits += 1
    return hits


def store_blocks(index: ContextIndex, pool: MemoryPool, block_keys: Sequence[BlockKey],
                 blocks: Sequence[KVBlock], namespace: str = CONTEXT_NS,
                 now: int | None = None) -> StoreReport:
    """Put new blocks into the pool, skipping keys already stored.

    Storage is off the prefill critical path, so no latency is returned.
    Quota or capacity exhaustion stops the store and is reported as partial.
    """
    if len(block_keys) != len(blocks):
        raise ValueError("blocks must align with keys")
    report = StoreReport()
    for i, (key, block) in enumerate(zip(block_keys, blocks)):
        if block.key != key:
            raise ValueError("blocks must align with keys")
        if key.combined in index.keys and pool.contains(namespace, key.combined):
            report.deduped += 1
            continue
        try:
            pool.put(namespace, key.combined, block.size, now=now)
        except (QuotaExceeded, CapacityExceeded) as exc:
            report.failed = len(blocks) - i
            report.error = str(exc)
            break
        index.keys.add(key.combined)
        report.stored += 1
        report.bytes_written += block.size
    return report


class ModelKind(str, Enum):
    REASONING = "REASONING"
    NON_REASONING = "NON_REASONING"


class DecodeStorage(str, Enum):
    NONE = "NONE"
    ALL = "ALL"
    FINAL_RESPONSE = "FINAL_RESPONSE"


def decode_storage_policy(model_kind: ModelKind, approx_reuse_enabled: bool = False,
                          final_response: bool = True) -> bool:
    """Whether a decode-generated KV block should be written to the cache.

    Reasoning traces rarely recur, so reasoning models skip decode caches
    unless approximate reuse is on, and then keep only final-response blocks.
    """
    kind = ModelKind(model_kind)
    if kind is ModelKind.NON_REASONING:
        return True
    return bool(approx_reuse_enabled and final_response)


def decode_storage_mode(model_kind: ModelKind, approx_reuse_enabled: bool = False) -> DecodeStorage:
    kind = ModelKind(model_kind)
    if kind is ModelKind.NON_REASONING:
        return DecodeStorage.ALL
    return DecodeStorage.FINAL_RESPONSE if approx_reuse_enabled else DecodeStorage.NONE
