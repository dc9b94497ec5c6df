"""Discrete-event engine and per-layer pipeline latency models.

Decode runs two streams on one die. Stream 0 carries the attention path and
stream 1 the MoE path, each on a fixed share of the die's cube (AIC) and
vector (AIV) cores. With two microbatches in flight the streams overlap, so a
layer costs ``max(sum(stream0), sum(stream1))``.

Without microbatching one stream owns the whole die and runs both paths back
to back on the full batch. Compute stages speed up under
:func:`resource_scaling`. Each stage's ``fixed_share`` is the part of one
microbatch pass that does not grow with batch size (weight reads, launches),
which microbatching pays twice and a single full-batch pass pays once.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .hashing import hash_ints

DIE_AIC = 24
DIE_AIV = 48


class PastEventError(ValueError):
    pass


@dataclass(order=True, frozen=True)
class Event:
    time: int
    sequence: int
    kind: str = field(compare=False)
    payload: object = field(compare=False, default=None)


@dataclass
class EventTrace:
    events: list[Event]
    trace_hash: int
    metrics: dict


def _kind_code(kind: str) -> int:
    return hash_ints(kind.encode())


class EventLoop:
    """Single-threaded event queue ordered by ``(time, sequence)``."""

    def __init__(self) -> None:
        self._heap: list[Event] = []
        self._seq = 0
        self.now = 0

    def schedule(self, time: int, kind: str, payload: object = None) -> Event:
        time = int(time)
        if time < self.now:
            raise PastEventError(f"event at t={time} scheduled before now={self.now}")
        ev = Event(time, self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def run(self, handlers: dict[str, Callable[[Event, "EventLoop"], None]] | None = None,
            horizon: int | None = None) -> EventTrace:
        handlers = handlers or {}
        trace: list[Event] = []
        h = hash_ints(())
        while self._heap:
            if horizon is not None and self._heap[0].time > horizon:
                break
            ev = heapq.heappop(self._heap)
            self.now = ev.time
            trace.append(ev)
            h = hash_ints((h, ev.time, ev.sequence, _kind_code(ev.kind)))
            fn = handlers.get(ev.kind)
            if fn is not None:
                fn(ev, self)
        makespan = trace[-1].time if trace else 0
        return EventTrace(trace, h, {"events": len(trace), "makespan_us": makespan})


def run_event_loop(initial_events: Iterable[tuple[int, str, object]] = (),
                   handlers: dict | None = None, horizon: int | None = None) -> EventTrace:
    """Run a batch of ``(time, kind, payload)`` events to completion.

    Raises:
        PastEventError: a handler schedules an event before the current time.
    """
    loop = EventLoop()
    for t, kind, payload in initial_events:
        loop.schedule(t, kind, payload)
    return loop.run(handlers, horizon)


def resource_scaling(base_latency: float, base_resources: float, new_resources: float,
                     serial_fraction: float = 0.1) -> float:
    """Amdahl-style rescaling: ``base * (s + (1 - s) * base_resources / new_resources)``."""
    if base_resources <= 0 or new_resources <= 0:
        raise ValueError("resources must be positive")
    if not 0.0 <= serial_fraction <= 1.0:
        raise ValueError("serial_fraction must lie in [0, 1]")
    return base_latency * (serial_fraction + (1.0 - serial_fraction) * base_resources / new_resources)


class StageKind(str, Enum):
    COMPUTE = "compute"
    MEMORY = "memory"
    COMM = "comm"


@dataclass(frozen=True)
class Stage:
    name: str
    latency_us: float
    kind: StageKind = StageKind.COMPUTE
    fixed_share: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", StageKind(self.kind))
        if self.latency_us < 0 or not 0.0 <= self.fixed_share <= 1.0:
            raise ValueError(f"invalid stage {self.name!r}")


@dataclass(frozen=True)
class StreamSpec:
    """A stream's core allocation and its stage table.

    Compute-stage latencies are measured with ``ref_aic`` cube cores, which
    defaults to the stream's own allocation.
    """

    aic: int
    aiv: int
    stages: tuple[Stage, ...] = ()
    ref_aic: int | None = None

    def scaled(self, stage: Stage, aic: int, serial_fraction: float = 0.1) -> float:
        if stage.kind is not StageKind.COMPUTE:
            return stage.latency_us
        return resource_scaling(stage.latency_us, self.ref_aic or self.aic, aic, serial_fraction)

    def busy(self, serial_fraction: float = 0.1) -> float:
        return sum(self.scaled(s, self.aic, serial_fraction) for s in self.stages)


def decode_layer_latency(stream0: StreamSpec, stream1: StreamSpec, microbatched: bool = True,
                         die_aic: int = DIE_AIC, die_aiv: int = DIE_AIV,
                         serial_fraction: float = 0.1) -> float:
    """Per-layer decode latency in µs.

    Raises:
        ValueError: the two streams need more cores than the die has.
    """
    if microbatched:
        if stream0.aic + stream1.aic > die_aic or stream0.aiv + stream1.aiv > die_aiv:
            raise ValueError("stream resources exceed the die")
        return max(stream0.busy(serial_fraction), stream1.busy(serial_fraction))
    total = 0.0
    for stream in (stream0, stream1):
        for st in stream.stages:
            total += stream.scaled(st, die_aic, serial_fraction) * (1.0 - st.fixed_share / 2.0)
    return total


def serial_layer_latency(stream0: StreamSpec, stream1: StreamSpec, serial_fraction: float = 0.1) -> float:
    """Both stream tables back to back at their own allocations (no overlap)."""
    return stream0.busy(serial_fraction) + stream1.busy(serial_fraction)


# Decode stage tables at batch 96 per die with MTP (two tokens per request),
# per layer. Stream 0 is the attention path, stream 1 the MoE path.
DEFAULT_STREAM0 = StreamSpec(16, 32, (
    Stage("mla_prolog", 200.0, StageKind.COMPUTE, 0.95),
    Stage("fused_attention", 560.0, StageKind.MEMORY, 0.4),
    Stage("o_proj", 180.0, StageKind.COMPUTE, 0.95),
    Stage("shared_expert", 160.0, StageKind.COMPUTE, 0.95),
    Stage("gate", 40.0, StageKind.COMPUTE, 0.95),
    Stage("sync", 120.0, StageKind.COMM, 1.0),
))
DEFAULT_STREAM1 = StreamSpec(8, 16, (
    Stage("dispatch", 320.0, StageKind.COMM, 0.9),
    Stage("routed_experts", 560.0, StageKind.MEMORY, 0.95),
    Stage("combine", 380.0, StageKind.COMM, 0.9),
))


def mtp_inflation(stages: Sequence[Stage], factor: float = 2.0) -> list[Stage]:
    """Scale the batch-dependent part of each stage by ``factor``.

    Feeding two tokens per request through a step is ``factor = 2``.
    """
    out = []
    for st in stages:
        lat = st.latency_us * (st.fixed_share + factor * (1.0 - st.fixed_share))
        fixed = st.latency_us * st.fixed_share / lat if lat > 0 else st.fixed_share
        out.append(Stage(st.name, lat, st.kind, fixed))
    return out


# -- prefill -------------------------------------------------------------

@dataclass(frozen=True)
class PrefillStages:
    """Per-layer busy time (µs) of each engine class at ``ref_tokens`` tokens."""

    aic: tuple[Stage, ...]
    aiv: tuple[Stage, ...] = ()
    sdma: tuple[Stage, ...] = ()
    ref_tokens: int = 16384

    def scaled(self, tokens: int) -> "PrefillStages":
        f = tokens / self.ref_tokens

        def s(stages):
            return tuple(Stage(x.name, x.latency_us * (x.fixed_share + f * (1 - x.fixed_share)),
                               x.kind, x.fixed_share) for x in stages)
        return PrefillStages(s(self.aic), s(self.aiv), s(self.sdma), tokens)


def prefill_layer_latency(aic_stages: Sequence[Stage], aiv_stages: Sequence[Stage] = (),
                          sdma_transfers: Sequence[Stage] = (), microbatched: bool = True) -> float:
    """Per-layer prefill latency in µs.

    Microbatched: two microbatches interleave so every engine class runs
    concurrently and the layer costs the busiest engine. Otherwise all
    stages run back to back.
    """
    if not aic_stages and not aiv_stages and not sdma_transfers:
        raise ValueError("stage tables are empty")
    busy = [sum(s.latency_us for s in group) for group in (aic_stages, aiv_stages, sdma_transfers)]
    return max(busy) if microbatched else sum(busy)


# Prefill per-layer tables for 16K packed tokens of 4K prompts on one die.
DEFAULT_PREFILL = PrefillStages(
    aic=(
        Stage("mla_prolog", 5500.0, StageKind.COMPUTE, 0.02),
        Stage("attention", 7600.0, StageKind.COMPUTE, 0.02),
        Stage("o_proj", 3000.0, StageKind.COMPUTE, 0.02),
        Stage("experts", 12500.0, StageKind.COMPUTE, 0.05),
    ),
    aiv=(
        Stage("gate_topk", 1700.0, StageKind.COMPUTE, 0.05),
        Stage("quantize", 1600.0, StageKind.COMPUTE, 0.05),
        Stage("norm_rope", 1200.0, StageKind.COMPUTE, 0.05),
    ),
    sdma=(
        Stage("all_gather", 1200.0, StageKind.COMM, 0.1),
        Stage("dispatch", 1550.0, StageKind.COMM, 0.1),
        Stage("combine", 1782.0, StageKind.COMM, 0.1),
    ),
)


# -- MTP -----------------------------------------------------------------

@dataclass(frozen=True)
class MTPConfig:
    k: int = 1
    accept_prob: float = 0.7
    graph_launch_overhead: float = 700.0
    pipelined: bool = True

    def __post_init__(self) -> None:
        if self.k < 0 or not 0.0 <= self.accept_prob <= 1.0:
            raise ValueError("need k >= 0 and accept_prob in [0, 1]")

    @property
    def expected_tokens(self) -> float:
        return 1.0 + self.k * self.accept_prob


@dataclass(frozen=True)
class MTPResult:
    tokens_per_iter: float
    expected_tokens: float
    throughput_ratio: float
    empirical_ratio: float
    mtp_iter_latency: float


def simulate_mtp(cfg: MTPConfig, base_iter_latency: float, mtp_iter_latency: float,
                 iterations: int = 10_000, seed: int = 0) -> MTPResult:
    """Monte-Carlo speculative decoding.

    Each of the ``k`` draft tokens is accepted independently with
    ``accept_prob``. The throughput ratio compares expected tokens per µs
    against one token per ``base_iter_latency``; ``empirical_ratio`` uses the
    sampled mean instead. Non-pipelined mode pays ``k + 1`` graph launches
    per iteration.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    accepted = rng.random((iterations, cfg.k)) < cfg.accept_prob if cfg.k else np.zeros((iterations, 0), bool)
    tokens = 1.0 + accepted.sum(axis=1)
    mean = float(tokens.mean())
    lat = mtp_iter_latency + (0.0 if cfg.pipelined else (cfg.k + 1) * cfg.graph_launch_overhead)
    return MTPResult(mean, cfg.expected_tokens,
                     (cfg.expected_tokens / lat) * base_iter_latency,
                     (mean / lat) * base_iter_latency, lat)


# -- iteration model ---------------------------------------------------------

@dataclass(frozen=True)
class DecodeIterationResult:
    per_layer_latency: float
    iteration_latency: float
    tokens_emitted: float
    tpot: float
    throughput: float


@dataclass(frozen=True)
class DecodeLatencyModel:
    """Affine iteration model ``t(batch) = intercept + slope * batch`` in ms.

    ``layer_fixed_us`` is the per-iteration overhead outside the layer stack
    at the reference batch.
    """

    intercept_ms: float
    slope_ms: float
    tokens_per_iter: float = 1.7

    def iteration_ms(self, batch: int) -> float:
        return self.intercept_ms + self.slope_ms * batch

    def predict(self, batch: int) -> tuple[float, float]:
        """(TPOT ms, tokens/s per NPU) at ``batch`` requests per NPU."""
        it = self.iteration_ms(batch)
        return it / self.tokens_per_iter, batch * self.tokens_per_iter / it * 1e3


def calibrate_decode_model(points: Sequence[tuple[int, float]], tokens_per_iter: float = 1.7) -> DecodeLatencyModel:
    """Fit the affine iteration model to ``(batch, tpot_ms)`` rows."""
    if len(points) < 2:
        raise ValueError("need at least two calibration rows")
    b = np.array([p[0] for p in points], dtype=float)
    it = np.array([p[1] for p in points], dtype=float) * tokens_per_iter
    if np.ptp(b) == 0:
        raise ValueError("calibration rows need distinct batch sizes")
    slope, intercept = np.polyfit(b, it, 1)
    return DecodeLatencyModel(float(intercept), float(slope), tokens_per_iter)


def tpot_and_throughput(batch: int, num_layers: int, per_layer_latency: float,
                        mtp: MTPConfig | None = None, fixed_overhead_us: float = 0.0) -> DecodeIterationResult:
    """Iteration latency = layers * per-layer + fixed overhead (µs)."""
    mtp = mtp or MTPConfig(k=0)
    it = num_layers * per_layer_latency + fixed_overhead_us
    tokens = mtp.expected_tokens
    tpot_ms = it / tokens / 1e3
    thr = batch * tokens / it * 1e6 if it > 0 else 0.0
    return DecodeIterationResult(per_layer_latency, it, tokens, tpot_ms, thr)
