"""Expert placement, top-K routing, EPLB and the fused dispatch/combine model.

Buffer sizing per die::

    buffer_size = rank_num * max_tokens * msg_size
    max_tokens  = local_batch * min(topK, experts_per_die)

Dispatch sends one message per (token, selected expert). Each message goes
through a three-stage software pipeline (local copy, INT8 quantize, direct
write to the peer), so a rank's send time is the pipeline fill plus, for every
message, the slowest of the three stages. Combine mirrors this with larger
BF16 messages and no quantize stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .interconnect import Mechanism, PlaneSpec, sync_rounds

SHARED = -1
KB = 1 << 10
MB = 1 << 20


class BufferOverflow(RuntimeError):
    """More tokens were sent to one peer than its buffer slot can hold."""


class MissingContribution(RuntimeError):
    pass


@dataclass(frozen=True)
class ExpertPlacement:
    ep_degree: int
    experts_per_die: int
    assignment: tuple[tuple[int, ...], ...]
    shared_copies: int
    router_count: int
    redundant_count: int

    def replicas(self) -> dict[int, list[int]]:
        """Router expert id -> ranks hosting it, ascending."""
        out: dict[int, list[int]] = {}
        for rank, experts in enumerate(self.assignment):
            for e in experts:
                if e != SHARED:
                    out.setdefault(e, []).append(rank)
        return out


@dataclass(frozen=True)
class EPLBResult:
    replicas: tuple[int, ...]
    replica_counts: np.ndarray
    max_load_before: float
    max_load_after: float


def eplb_rebalance(load_histogram, redundant_count: int) -> EPLBResult:
    """Greedy replica assignment.

    Each redundant slot duplicates the expert with the highest effective load
    ``load / replicas`` (lowest id on ties), then that expert's replica count
    increases.
    """
    if redundant_count < 0:
        raise ValueError("redundant_count must be >= 0")
    load = np.asarray(load_histogram, dtype=float)
    counts = np.ones(load.size, dtype=np.int64)
    chosen = []
    for _ in range(redundant_count):
        e = int(np.argmax(load / counts))
        chosen.append(e)
        counts[e] += 1
    before = float(load.max()) if load.size else 0.0
    after = float((load / counts).max()) if load.size else 0.0
    return EPLBResult(tuple(chosen), counts, before, after)


def build_placement(ep_degree: int, shared_copies: int, router_count: int, redundant_count: int,
                    experts_per_die: int | None = None, initial_load=None) -> ExpertPlacement:
    """Deterministic expert layout.

    Shared copies go to ranks ``0, stride, 2*stride, ...`` with
    ``stride = ep_degree // shared_copies`` (wrapping to the next slot layer
    when a rank is full). Router experts fill the remaining slots round-robin
    over ranks. Redundant replicas follow :func:`eplb_rebalance` on
    ``initial_load`` (uniform by default) and land on the first rank with a
    free slot that does not already host that expert.

    Raises:
        ValueError: counts do not fill ``ep_degree * experts_per_die`` slots.
    """
    total = shared_copies + router_count + redundant_count
    if ep_degree < 1 or router_count < 1 or min(shared_copies, redundant_count) < 0:
        raise ValueError("invalid expert counts")
    if experts_per_die is None:
        if total % ep_degree:
            raise ValueError(f"{total} experts do not divide evenly over {ep_degree} ranks")
        experts_per_die = total // ep_degree
    if total != ep_degree * experts_per_die:
        raise ValueError(
            f"shared+router+redundant = {total} != ep_degree*experts_per_die = {ep_degree * experts_per_die}")
    slots: list[list[int]] = [[] for _ in range(ep_degree)]

    if shared_copies:
        stride = max(1, ep_degree // shared_copies)
        placed = 0
        for layer in range(experts_per_die):
            for start in range(stride):
                for r in range(start, ep_degree, stride):
                    if placed < shared_copies and len(slots[r]) == layer:
                        slots[r].append(SHARED)
                        placed += 1
            if placed == shared_copies:
                break

    e = 0
    while e < router_count:
        progressed = False
        for r in range(ep_degree):
            if e < router_count and len(slots[r]) < experts_per_die:
                slots[r].append(e)
                e += 1
                progressed = True
        if not progressed:
            raise ValueError("no free slot for router experts")

    load = np.ones(router_count) if initial_load is None else np.asarray(initial_load, dtype=float)
    if load.shape != (router_count,):
        raise ValueError("initial_load must have one entry per router expert")
    for rep in eplb_rebalance(load, redundant_count).replicas:
        free = [r for r in range(ep_degree) if len(slots[r]) < experts_per_die]
        target = next((r for r in free if rep not in slots[r]), None)
        if target is None:
            raise ValueError(f"cannot place replica of expert {rep} on a distinct rank")
        slots[target].append(rep)

    return ExpertPlacement(ep_degree, experts_per_die, tuple(tuple(s) for s in slots),
                           shared_copies, router_count, redundant_count)


@dataclass(frozen=True)
class BufferPlan:
    rank_num: int
    local_batch: int
    top_k: int
    experts_per_die: int
    max_tokens: int
    dispatch_msg_size: int
    combine_msg_size: int
    dispatch_buffer: int
    combine_buffer: int
    double_buffered: bool = True

    @property
    def total(self) -> int:
        return self.dispatch_buffer + self.combine_buffer


def plan_buffers(rank_num: int, local_batch: int, top_k: int, experts_per_die: int,
                 dispatch_msg_size: int = 7680, combine_msg_size: int = 14336) -> BufferPlan:
    """Per-die dispatch and combine buffer sizes.

    The dispatch message is a 7,168-byte INT8 token plus a 512-byte slot for
    its scale; the combine message is the BF16 token (14,336 bytes).
    """
    if min(rank_num, top_k, experts_per_die, dispatch_msg_size, combine_msg_size) <= 0 or local_batch < 0:
        raise ValueError("counts must be positive")
    max_tokens = local_batch * min(top_k, experts_per_die)
    return BufferPlan(rank_num, local_batch, top_k, experts_per_die, max_tokens,
                      dispatch_msg_size, combine_msg_size,
                      rank_num * max_tokens * dispatch_msg_size,
                      rank_num * max_tokens * combine_msg_size)


@dataclass
class RoutingBatch:
    experts: np.ndarray      # (tokens, top_k) router expert ids
    weights: np.ndarray      # (tokens, top_k) softmax gate weights
    dest_rank: np.ndarray    # (tokens, top_k) serving rank of each choice
    source_rank: np.ndarray  # (tokens,)
    histogram: np.ndarray    # (ep_degree,) arrivals per rank

    @property
    def num_tokens(self) -> int:
        return int(self.experts.shape[0])

    @property
    def top_k(self) -> int:
        return int(self.experts.shape[1])


def route_tokens(gate_scores, placement: ExpertPlacement, top_k: int,
                 source_rank=None) -> RoutingBatch:
    """Pick the ``top_k`` best router experts per token and map them to ranks.

    Ties go to the lower expert id. When an expert has several replicas, each
    source rank cycles through them in rank order.

    Raises:
        ValueError: ``top_k`` exceeds the router-expert count or shapes mismatch.
    """
    scores = np.asarray(gate_scores, dtype=float)
    if scores.ndim != 2 or scores.shape[1] != placement.router_count:
        raise ValueError("gate_scores must be (tokens, router_count)")
    if not 1 <= top_k <= placement.router_count:
        raise ValueError("top_k must lie in [1, router_count]")
    n = scores.shape[0]
    ep = placement.ep_degree
    if source_rank is None:
        per = max(1, -(-n // ep))
        source_rank = np.arange(n) // per
    source_rank = np.asarray(source_rank, dtype=np.int64)
    if source_rank.shape != (n,) or (n and (source_rank.min() < 0 or source_rank.max() >= ep)):
        raise ValueError("source_rank must give a valid rank per token")

    experts = np.argsort(-scores, axis=1, kind="stable")[:, :top_k]
    chosen = np.take_along_axis(scores, experts, axis=1)
    w = np.exp(chosen - chosen.max(axis=1, keepdims=True)) if n else chosen
    weights = w / w.sum(axis=1, keepdims=True) if n else w

    replicas = placement.replicas()
    dest = np.empty_like(experts)
    cursor: dict[tuple[int, int], int] = {}
    for t in range(n):
        src = int(source_rank[t])
        for j in range(top_k):
            e = int(experts[t, j])
            ranks = replicas[e]
            c = cursor.get((src, e), 0)
            dest[t, j] = ranks[c % len(ranks)]
            cursor[(src, e)] = c + 1
    hist = np.bincount(dest.ravel(), minlength=ep)
    return RoutingBatch(experts, weights, dest, source_rank, hist)


@dataclass(frozen=True)
class PipelineTiming:
    """Per-message stage times (µs) for the send pipeline."""

    copy_us: float = 0.01
    quant_us: float = 0.02


@dataclass
class DispatchStats:
    sent: np.ndarray           # (ep, ep) messages from source to destination
    contributions: np.ndarray  # (tokens,) messages dispatched per token
    source_rank: np.ndarray
    top_k: int
    bytes_sent: int
    write_log: list = field(default_factory=list)

    @property
    def received(self) -> np.ndarray:
        return self.sent.sum(axis=0)


@dataclass
class ExchangeResult:
    per_rank_latency: np.ndarray
    stats: DispatchStats | None = None
    tokens_out: np.ndarray | None = None

    @property
    def latency(self) -> float:
        return float(self.per_rank_latency.max()) if self.per_rank_latency.size else 0.0


class BufferArena:
    """Address map of one die's dispatch and combine buffers.

    Dispatch occupies ``[0, dispatch_buffer)`` and combine the range after it.
    Every simulated write is checked against its own region, so a dispatch
    write can never land in the combine buffer or the other way round.
    """

    def __init__(self, plan: BufferPlan):
        self.plan = plan
        self.regions = {"dispatch": (0, plan.dispatch_buffer),
                        "combine": (plan.dispatch_buffer, plan.dispatch_buffer + plan.combine_buffer)}
        self.writes: dict[str, list[tuple[int, int]]] = {"dispatch": [], "combine": []}

    def write(self, kind: str, src_rank: int, slot: int) -> tuple[int, int]:
        msg = self.plan.dispatch_msg_size if kind == "dispatch" else self.plan.combine_msg_size
        if slot >= self.plan.max_tokens:
            raise BufferOverflow(f"slot {slot} >= max_tokens {self.plan.max_tokens}")
        lo, hi = self.regions[kind]
        start = lo + (src_rank * self.plan.max_tokens + slot) * msg
        end = start + msg
        if not lo <= start < end <= hi:
            raise AssertionError(f"{kind} write outside its buffer")
        self.writes[kind].append((start, end))
        return start, end

    def aliasing(self) -> bool:
        """True if any dispatch write overlaps any combine write."""
        d = sorted(self.writes["dispatch"])
        c = sorted(self.writes["combine"])
        if not d or not c:
            return False
        return max(e for _, e in d) > min(s for s, _ in c) and max(e for _, e in c) > min(s for s, _ in d)


def _pipeline_us(n_msgs: np.ndarray, write_us: np.ndarray, stages: tuple[float, ...]) -> float:
    """Fill of the leading stages plus one slowest-stage beat per message."""
    if n_msgs.sum() == 0:
        return 0.0
    beat = np.maximum(max(stages), write_us)
    return float(sum(stages) + (n_msgs * beat).sum())


def _exchange_latency(counts: np.ndarray, plan_msg: int, plane: PlaneSpec, rank: int, ep: int,
                      stages: tuple[float, ...], dies_per_node: int) -> float:
    peers = np.arange(ep)
    inter = (peers // dies_per_node) != (rank // dies_per_node)
    bw = np.where(inter, plane.bandwidth(True), plane.bandwidth(False)) * 1e3
    spans_nodes = ep > dies_per_node
    fixed = (plane.startup(Mechanism.AIV_DIRECT) + plane.base_latency(spans_nodes)
             + plane.sync_round_latency * sync_rounds(ep))
    return fixed + _pipeline_us(counts, plan_msg / bw, stages)


def simulate_dispatch(batch: RoutingBatch, plan: BufferPlan, plane: PlaneSpec,
                      timing: PipelineTiming | None = None, dies_per_node: int = 16,
                      arena: BufferArena | None = None) -> ExchangeResult:
    """Per-rank FusedDispatch latency.

    A rank's latency is startup, base latency and the barrier/flag rounds plus
    its send pipeline. With no tokens only the fixed part remains.

    Raises:
        BufferOverflow: a source sends more than ``plan.max_tokens`` to one peer.
    """
    timing = timing or PipelineTiming()
    ep = plan.rank_num
    sent = np.zeros((ep, ep), dtype=np.int64)
    np.add.at(sent, (np.repeat(batch.source_rank, batch.top_k), batch.dest_rank.ravel()), 1)
    if sent.size and sent.max() > plan.max_tokens:
        s, d = np.unravel_index(int(sent.argmax()), sent.shape)
        raise BufferOverflow(f"rank {s} sends {sent[s, d]} tokens to rank {d} > max_tokens {plan.max_tokens}")
    if arena is not None:
        # Slots are filled in token order per (source, destination) pair.
        fill = np.zeros((ep, ep), dtype=np.int64)
        for s, d in zip(np.repeat(batch.source_rank, batch.top_k), batch.dest_rank.ravel()):
            arena.write("dispatch", int(s), int(fill[s, d]))
            fill[s, d] += 1
    stages = (timing.copy_us, timing.quant_us)
    lat = np.array([_exchange_latency(sent[r], plan.dispatch_msg_size, plane, r, ep, stages, dies_per_node)
                    for r in range(ep)])
    stats = DispatchStats(sent, np.full(batch.num_tokens, batch.top_k, dtype=np.int64),
                          batch.source_rank.copy(), batch.top_k,
                          int(sent.sum()) * plan.dispatch_msg_size)
    return ExchangeResult(lat, stats)


def simulate_combine(stats: DispatchStats, plan: BufferPlan, plane: PlaneSpec,
                     timing: PipelineTiming | None = None, dies_per_node: int = 16,
                     arena: BufferArena | None = None) -> ExchangeResult:
    """Per-rank FusedCombine latency, accounted at each token's home rank.

    Every expert output is atomically added into the home rank's combine
    buffer, so rank ``r`` absorbs exactly ``sent[r, :]`` contributions.

    Raises:
        MissingContribution: some token's flag would never reach ``top_k``.
    """
    timing = timing or PipelineTiming()
    if np.any(stats.contributions != stats.top_k):
        bad = int(np.flatnonzero(stats.contributions != stats.top_k)[0])
        raise MissingContribution(
            f"token {bad} has {stats.contributions[bad]} of {stats.top_k} contributions")
    ep = plan.rank_num
    if arena is not None:
        for s in range(ep):
            for d in range(ep):
                for slot in range(int(stats.sent[s, d])):
                    arena.write("combine", d, slot)
    stages = (timing.copy_us,)
    lat = np.array([_exchange_latency(stats.sent[r], plan.combine_msg_size, plane, r, ep, stages, dies_per_node)
                    for r in range(ep)])
    tokens_out = np.bincount(stats.source_rank, minlength=ep)
    return ExchangeResult(lat, stats, tokens_out)


def combine_outputs(batch: RoutingBatch, expert_outputs: np.ndarray) -> np.ndarray:
    """Weighted sum of each token's expert outputs, shape (tokens, hidden)."""
    return np.einsum("tk,tkh->th", batch.weights, expert_outputs)


def expert_compute_time(histogram, us_per_token: float, perfect: bool = False) -> float:
    """MoE compute time of a step: the busiest rank, or the mean under perfect balance."""
    h = np.asarray(histogram, dtype=float)
    return float((h.mean() if perfect else h.max()) * us_per_token)
