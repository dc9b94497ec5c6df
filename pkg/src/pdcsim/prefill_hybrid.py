"""Prefill-side planning: sequence packing, staged SP-TP-SP attention, P→D handoff."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .interconnect import CollectiveKind, Mechanism, PlaneSpec, estimate_collective, estimate_transfer
from .pipeline import EventLoop


@dataclass(frozen=True)
class PackedBatch:
    requests: tuple[tuple[int, int], ...]
    rank_token_counts: tuple[int, ...]
    segment_map: tuple[tuple[tuple[int, int, int], ...], ...]  # per rank: (request id, lo, hi)

    @property
    def total_tokens(self) -> int:
        return sum(self.rank_token_counts)


def _as_pairs(requests) -> list[tuple[int, int]]:
    out = []
    for i, r in enumerate(requests):
        if hasattr(r, "prompt_len"):
            out.append((int(r.id), int(r.prompt_len)))
        elif isinstance(r, tuple):
            out.append((int(r[0]), int(r[1])))
        else:
            out.append((i, int(r)))
    return out


def pack_sequences(requests, num_ranks: int) -> PackedBatch:
    """Concatenate prompts in order and cut the result into near-equal rank slices.

    The first ``total % num_ranks`` ranks get one extra token. ``requests``
    may be Request objects, ``(id, prompt_len)`` pairs or bare lengths.
    """
    pairs = _as_pairs(requests)
    if not pairs:
        raise ValueError("request list is empty")
    if num_ranks < 1:
        raise ValueError("num_ranks must be >= 1")
    if any(n < 0 for _, n in pairs):
        raise ValueError("prompt lengths must be nonnegative")
    total = sum(n for _, n in pairs)
    base, rem = divmod(total, num_ranks)
    counts = [base + (1 if r < rem else 0) for r in range(num_ranks)]

    segments: list[list[tuple[int, int, int]]] = [[] for _ in range(num_ranks)]
    rank, room = 0, counts[0]
    for rid, n in pairs:
        off = 0
        while off < n:
            while room == 0:
                rank += 1
                room = counts[rank]
            take = min(room, n - off)
            segments[rank].append((rid, off, off + take))
            off += take
            room -= take
    return PackedBatch(tuple(pairs), tuple(counts), tuple(tuple(s) for s in segments))


@dataclass(frozen=True)
class ImbalanceReport:
    dp_imbalance: float | None  # None when pure DP leaves ranks idle
    hybrid_imbalance: float
    idle_ranks: int
    dp_rank_tokens: tuple[int, ...]
    hybrid_rank_tokens: tuple[int, ...]


def _max_over_mean(xs: Sequence[int]) -> float:
    mean = sum(xs) / len(xs)
    return max(xs) / mean if mean > 0 else 1.0


def compare_dp_vs_hybrid(requests, num_ranks: int) -> ImbalanceReport:
    """Load imbalance (max/mean tokens per rank) under pure DP and under packing.

    Pure DP deals whole requests round-robin. When requests are fewer than
    ranks the DP ratio is undefined: ``dp_imbalance`` is None and
    ``idle_ranks`` counts the ranks with no work.
    """
    pairs = _as_pairs(requests)
    dp = [0] * num_ranks
    for i, (_, n) in enumerate(pairs):
        dp[i % num_ranks] += n
    idle = sum(1 for x in dp if x == 0)
    hybrid = pack_sequences(pairs, num_ranks).rank_token_counts if pairs else tuple([0] * num_ranks)
    dp_ratio = None if idle else _max_over_mean(dp)
    return ImbalanceReport(dp_ratio, _max_over_mean(hybrid), idle, tuple(dp), tuple(hybrid))


@dataclass(frozen=True)
class StagePlan:
    tp_degree: int
    stage1_tokens_per_rank: tuple[int, ...]
    collective_a_bytes: int
    heads_per_rank: tuple[int, ...]
    collective_b_bytes: int
    stage3_tokens_per_rank: tuple[int, ...]
    collective_a_latency: float
    collective_b_latency: float

    @property
    def latency(self) -> float:
        return self.collective_a_latency + self.collective_b_latency


def plan_mla_stages(packed: PackedBatch, tp_degree: int, hidden_dim: int = 7168, num_heads: int = 128,
                    plane: PlaneSpec | None = None, *, down_proj_width: int = 2112,
                    head_dim: int = 128, act_bytes: int = 1) -> StagePlan:
    """Volumes and costs of the two collectives in staged SP-TP-SP attention.

    Stage 1 runs the down projection sequence-parallel; an all-gather then
    gives every TP rank the reduced activations of all tokens::

        collective_a = tokens * down_proj_width * act_bytes

    Stage 2 shards heads across ``tp_degree`` ranks; an all-to-all returns
    each rank's head outputs to the sequence layout::

        collective_b = tokens * max(heads_per_rank) * head_dim * act_bytes

    and is skipped when ``tp_degree == 1``. ``hidden_dim`` is unused by the
    volumes and kept for the output-projection width.
    """
    if tp_degree < 1:
        raise ValueError("tp_degree must be >= 1")
    if tp_degree > num_heads:
        raise ValueError("tp_degree exceeds num_heads")
    plane = plane or PlaneSpec()
    tokens = packed.total_tokens
    base, rem = divmod(num_heads, tp_degree)
    heads = tuple(base + (1 if r < rem else 0) for r in range(tp_degree))
    vol_a = tokens * down_proj_width * act_bytes if tp_degree > 1 else 0
    vol_b = tokens * heads[0] * head_dim * act_bytes if tp_degree > 1 else 0
    lat_a = estimate_collective(CollectiveKind.ALL_GATHER, tp_degree, vol_a, plane).latency
    lat_b = estimate_collective(CollectiveKind.ALL_TO_ALL, tp_degree, vol_b, plane).latency
    counts = packed.rank_token_counts
    return StagePlan(tp_degree, counts, vol_a, heads, vol_b, counts, lat_a, lat_b)


@dataclass(frozen=True)
class PDConnection:
    prefill_tp_size: int
    decode_tp_size: int
    decode_dp_size: int
    ratio: int
    group_size: int
    mapping: dict

    def load(self) -> list[int]:
        """Decode ranks served by each prefill TP rank."""
        counts = [0] * self.prefill_tp_size
        for p in self.mapping.values():
            counts[p] += 1
        return counts


def map_connections(prefill_tp_size: int, decode_tp_size: int, decode_dp_size: int) -> PDConnection:
    """Deterministic prefill→decode KV connection table.

    ``ratio = prefill_tp / decode_tp``, ``group_size = decode_dp / ratio``;
    decode rank ``(dp, tp)`` pulls from prefill rank
    ``(dp // group_size) * decode_tp + tp``.

    Raises:
        ValueError: a size is nonpositive or a divisibility precondition fails.
    """
    if min(prefill_tp_size, decode_tp_size, decode_dp_size) < 1:
        raise ValueError("sizes must be positive")
    if prefill_tp_size % decode_tp_size:
        raise ValueError(
            f"prefill_tp_size {prefill_tp_size} is not divisible by decode_tp_size {decode_tp_size}")
    ratio = prefill_tp_size // decode_tp_size
    if decode_dp_size % ratio:
        raise ValueError(f"decode_dp_size {decode_dp_size} is not divisible by ratio {ratio}")
    group_size = decode_dp_size // ratio
    mapping = {
        (dp, tp): (dp // group_size) * decode_tp_size + tp
        for dp in range(decode_dp_size) for tp in range(decode_tp_size)
    }
    return PDConnection(prefill_tp_size, decode_tp_size, decode_dp_size, ratio, group_size, mapping)


class AllocationError(RuntimeError):
    pass


@dataclass
class Instance:
    """A prefill or decode instance as seen by the KV handoff."""

    name: str
    first_die: int
    kv_capacity: int = 1 << 40
    kv_used: int = 0


@dataclass
class KVTransfer:
    request_id: int
    nbytes: int
    latency: float
    events: list = field(default_factory=list)
    plane_bytes: dict = field(default_factory=dict)


def schedule_kv_transfer(request, src: Instance, dst: Instance, rdma_plane: PlaneSpec,
                         kv_bytes_per_token: int = 70272, *, prefill_us: int = 0,
                         start_us: int = 0, loop: EventLoop | None = None,
                         dies_per_node: int = 16) -> KVTransfer:
    """Plan the KV handoff of one request over the RDMA plane.

    Step order: (i) reserve the KV buffer on the decode instance, (ii) hand
    the request to prefill, (iii) after prefill, push the KV cache over RDMA.
    The transfer never touches the UB plane.

    Raises:
        AllocationError: the decode instance cannot hold the KV cache.
    """
    nbytes = int(request.prompt_len) * kv_bytes_per_token
    if dst.kv_used + nbytes > dst.kv_capacity:
        raise AllocationError(f"decode instance {dst.name} cannot hold {nbytes} B of KV")
    dst.kv_used += nbytes
    src_die, dst_die = src.first_die, dst.first_die
    if src_die == dst_die:
        raise ValueError("prefill and decode instances must sit on different dies")
    est = estimate_transfer(src_die, dst_die, nbytes, rdma_plane, Mechanism.SDMA, dies_per_node)
    t_done = start_us + prefill_us
    events = [
        (start_us, "kv_alloc"),
        (start_us, "prefill_dispatch"),
        (t_done, "kv_transfer_start"),
        (t_done + int(math.ceil(est.latency)), "kv_transfer_done"),
    ]
    if loop is not None:
        for t, kind in events:
            loop.schedule(t, kind, {"request": request.id, "bytes": nbytes, "plane": "RDMA"})
    return KVTransfer(request.id, nbytes, est.latency, events, {"UB": 0, "RDMA": nbytes})


@dataclass(frozen=True)
class DecodeRun:
    iteration_ends: tuple[int, ...]
    plane_bytes: dict
    trace_hash: int

    @property
    def tpot_us(self) -> float:
        ends = self.iteration_ends
        return ends[-1] / len(ends) if ends else 0.0


def simulate_decode_with_transfers(iterations: int, iteration_us: int,
                                   transfers: Sequence[KVTransfer] = ()) -> DecodeRun:
    """Run decode iterations alongside incoming KV transfers.

    Transfers only advance RDMA-plane accounting; decode iterations are
    chained on their own completion and are never delayed by them.
    """
    loop = EventLoop()
    ends: list[int] = []
    planes = {"UB": 0, "RDMA": 0}
    for tr in transfers:
        for t, kind in tr.events:
            loop.schedule(t, kind, tr)

    def on_iter(ev, lp):
        ends.append(ev.time)
        if len(ends) < iterations:
            lp.schedule(ev.time + iteration_us, "decode_iter")

    def on_done(ev, lp):
        for k, v in ev.payload.plane_bytes.items():
            planes[k] += v

    if iterations > 0:
        loop.schedule(iteration_us, "decode_iter")
    trace = loop.run({"decode_iter": on_iter, "kv_transfer_done": on_done})
    return DecodeRun(tuple(ends), planes, trace.trace_hash)
