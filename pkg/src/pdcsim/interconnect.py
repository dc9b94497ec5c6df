"""Latency/bandwidth cost models for the UB, RDMA and VPC network planes.

Units: latencies in microseconds, bandwidths in GB/s (1e9 bytes/s), so one
GB/s moves 1e3 bytes per microsecond.

The point-to-point law is::

    latency = startup(mechanism) + base_latency(route) + bytes / (bw * (1 - penalty))

where ``penalty`` applies only to inter-node routes. An expert-parallel
exchange over ``ep`` ranks additionally pays ``sync_round_latency`` for each
of the ``ceil(log2 ep)`` barrier/flag rounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

BYTES_PER_US_PER_GBPS = 1e3


class PlaneKind(str, Enum):
    UB = "UB"
    RDMA = "RDMA"
    VPC = "VPC"


class Mechanism(str, Enum):
    SDMA = "SDMA"
    AIV_DIRECT = "AIV_DIRECT"


class CollectiveKind(str, Enum):
    ALL_GATHER = "ALL_GATHER"
    ALL_TO_ALL = "ALL_TO_ALL"
    BROADCAST = "BROADCAST"


@dataclass(frozen=True)
class PlaneSpec:
    kind: PlaneKind = PlaneKind.UB
    link_bandwidth: float = 150.0
    base_latency_intra: float = 1.0
    base_latency_inter: float = 1.8
    inter_node_bw_penalty: float = 0.03
    sdma_startup: float = 15.0
    aiv_direct_startup: float = 2.0
    sync_round_latency: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PlaneKind(self.kind))
        if self.link_bandwidth <= 0:
            raise ValueError("link_bandwidth must be positive")
        if self.base_latency_inter < self.base_latency_intra or self.base_latency_intra < 0:
            raise ValueError("need 0 <= base_latency_intra <= base_latency_inter")
        if not 0.0 <= self.inter_node_bw_penalty < 1.0:
            raise ValueError("inter_node_bw_penalty must lie in [0, 1)")
        if min(self.sdma_startup, self.aiv_direct_startup, self.sync_round_latency) < 0:
            raise ValueError("startup and sync latencies must be nonnegative")

    def startup(self, mechanism: Mechanism) -> float:
        return self.aiv_direct_startup if Mechanism(mechanism) is Mechanism.AIV_DIRECT else self.sdma_startup

    def bandwidth(self, inter_node: bool) -> float:
        """Effective GB/s on a route."""
        return self.link_bandwidth * (1.0 - self.inter_node_bw_penalty if inter_node else 1.0)

    def base_latency(self, inter_node: bool) -> float:
        return self.base_latency_inter if inter_node else self.base_latency_intra


@dataclass(frozen=True)
class TransferEstimate:
    latency: float
    effective_bandwidth: float


def _payload_us(nbytes: float, bw_gbps: float) -> float:
    return nbytes / (bw_gbps * BYTES_PER_US_PER_GBPS)


def _estimate(nbytes: float, plane: PlaneSpec, mechanism: Mechanism, inter: bool) -> TransferEstimate:
    latency = plane.startup(mechanism) + plane.base_latency(inter) + _payload_us(nbytes, plane.bandwidth(inter))
    eff = nbytes / latency / BYTES_PER_US_PER_GBPS if latency > 0 else 0.0
    return TransferEstimate(latency, eff)


def estimate_transfer(
    src_die: int,
    dst_die: int,
    nbytes: float,
    plane: PlaneSpec,
    mechanism: Mechanism = Mechanism.AIV_DIRECT,
    dies_per_node: int = 16,
    num_dies: int | None = None,
) -> TransferEstimate:
    """Point-to-point transfer cost between two dies.

    Dies ``d`` and ``e`` share a node iff ``d // dies_per_node == e // dies_per_node``.

    Raises:
        ValueError: unknown die ids, negative size, or a nonzero self-transfer.
    """
    for die in (src_die, dst_die):
        if die < 0 or (num_dies is not None and die >= num_dies):
            raise ValueError(f"unknown die id {die}")
    if nbytes < 0:
        raise ValueError("bytes must be nonnegative")
    if src_die == dst_die and nbytes > 0:
        raise ValueError("src and dst must differ for a nonzero transfer")
    inter = src_die // dies_per_node != dst_die // dies_per_node
    return _estimate(nbytes, plane, Mechanism(mechanism), inter)


def sync_rounds(ep_degree: int) -> int:
    return math.ceil(math.log2(ep_degree)) if ep_degree > 1 else 0


def estimate_ep_exchange(
    ep_degree: int,
    bytes_per_rank: float,
    plane: PlaneSpec,
    mechanism: Mechanism = Mechanism.AIV_DIRECT,
    dies_per_node: int = 16,
) -> TransferEstimate:
    """Per-rank latency of one dispatch or combine exchange among ``ep_degree`` ranks.

    The route is inter-node as soon as the group spans more than one node.
    """
    if ep_degree < 1:
        raise ValueError("ep_degree must be >= 1")
    inter = ep_degree > dies_per_node
    base = _estimate(bytes_per_rank, plane, Mechanism(mechanism), inter)
    latency = base.latency + plane.sync_round_latency * sync_rounds(ep_degree)
    return TransferEstimate(latency, bytes_per_rank / latency / BYTES_PER_US_PER_GBPS)


def estimate_collective(
    kind: CollectiveKind,
    participants: int,
    bytes_per_rank: float,
    plane: PlaneSpec,
    mechanism: Mechanism = Mechanism.AIV_DIRECT,
    dies_per_node: int = 16,
) -> TransferEstimate:
    """Closed-form collective cost.

    ALL_GATHER and ALL_TO_ALL use pairwise exchange::

        startup + base + (P - 1) * (bytes_per_rank / P) / bw

    BROADCAST uses a binomial tree: ``ceil(log2 P)`` hops of the full payload.
    A single participant costs nothing.
    """
    if participants < 1:
        raise ValueError("participants must be >= 1")
    if bytes_per_rank < 0:
        raise ValueError("bytes_per_rank must be nonnegative")
    if participants == 1:
        return TransferEstimate(0.0, 0.0)
    kind = CollectiveKind(kind)
    inter = participants > dies_per_node
    bw = plane.bandwidth(inter)
    p = participants
    if kind is CollectiveKind.BROADCAST:
        hops = math.ceil(math.log2(p))
        latency = hops * (plane.startup(mechanism) + plane.base_latency(inter)) + hops * _payload_us(bytes_per_rank, bw)
    else:
        latency = plane.startup(mechanism) + plane.base_latency(inter) + (p - 1) * _payload_us(bytes_per_rank / p, bw)
    return TransferEstimate(latency, bytes_per_rank / latency / BYTES_PER_US_PER_GBPS)


@dataclass(frozen=True)
class Measurement:
    """One exchange measurement. ``payload_bytes`` defaults to ``bandwidth * latency``."""

    ep_degree: int
    latency: float
    bandwidth: float
    payload_bytes: float | None = None

    @property
    def nbytes(self) -> float:
        if self.payload_bytes is not None:
            return self.payload_bytes
        return self.bandwidth * BYTES_PER_US_PER_GBPS * self.latency


def calibrate_plane(
    measurements: Sequence[Measurement | tuple],
    template: PlaneSpec | None = None,
    mechanism: Mechanism = Mechanism.AIV_DIRECT,
    dies_per_node: int = 16,
) -> PlaneSpec:
    """Fit ``sync_round_latency`` and ``link_bandwidth`` to exchange measurements.

    Startup, base latencies and the inter-node penalty come from ``template``
    and stay fixed. The model is linear in the unknowns
    ``(sync_round_latency, 1 / link_bandwidth)``, so an ordinary least-squares
    solve reproduces two measurements exactly.

    Raises:
        ValueError: fewer than two measurements, degenerate (collinear)
            measurements, or a fit with nonpositive bandwidth.
    """
    template = template or PlaneSpec()
    ms = [m if isinstance(m, Measurement) else Measurement(*m) for m in measurements]
    if len(ms) < 2:
        raise ValueError("calibration needs at least two measurements")
    rows, rhs = [], []
    for m in ms:
        inter = m.ep_degree > dies_per_node
        penalty = 1.0 - template.inter_node_bw_penalty if inter else 1.0
        fixed = template.startup(mechanism) + template.base_latency(inter)
        rows.append([sync_rounds(m.ep_degree), m.nbytes / (penalty * BYTES_PER_US_PER_GBPS)])
        rhs.append(m.latency - fixed)
    a = np.asarray(rows, dtype=float)
    # Column scaling keeps the rank test meaningful despite byte-sized entries.
    norms = np.linalg.norm(a, axis=0)
    if np.any(norms == 0) or np.linalg.matrix_rank(a / norms) < 2:
        raise ValueError("degenerate measurements: cannot separate sync and bandwidth terms")
    sol, *_ = np.linalg.lstsq(a / norms, np.asarray(rhs), rcond=None)
    sync, inv_bw = sol / norms
    if inv_bw <= 0:
        raise ValueError("fit produced a nonpositive bandwidth")
    return replace(template, link_bandwidth=float(1.0 / inv_bw), sync_round_latency=float(max(sync, 0.0)))


# Measured per-rank dispatch/combine endpoints (EP8, EP256) with 128 tokens
# per rank and top-8 routing on the UB plane.
EP_BENCH_TOKENS = 128
EP_BENCH_TOPK = 8
DISPATCH_MSG_BYTES = 7680
COMBINE_MSG_BYTES = 14336
DISPATCH_ENDPOINTS = ((8, 116.0, 71.0), (256, 152.0, 54.0))
COMBINE_ENDPOINTS = ((8, 118.0, 131.0), (256, 149.0, 103.0))


def _bench_plane(endpoints, msg_bytes: int) -> PlaneSpec:
    payload = EP_BENCH_TOKENS * EP_BENCH_TOPK * msg_bytes
    return calibrate_plane([Measurement(ep, lat, bw, payload) for ep, lat, bw in endpoints])


def default_planes() -> dict[str, PlaneSpec]:
    """Shipped plane parameters.

    ``ub_dispatch`` and ``ub_combine`` are fitted to the EP benchmark endpoints;
    ``ub`` is the generic per-die UB figure used for cache and weight traffic.
    RDMA is 200 Gbps per NPU split over two dies; VPC is a 400 Gbps node NIC
    shared by 16 dies.
    """
    return {
        "ub": PlaneSpec(PlaneKind.UB, 150.0, 1.0, 1.8, 0.03, 15.0, 2.0),
        "ub_dispatch": _bench_plane(DISPATCH_ENDPOINTS, DISPATCH_MSG_BYTES),
        "ub_combine": _bench_plane(COMBINE_ENDPOINTS, COMBINE_MSG_BYTES),
        "rdma": PlaneSpec(PlaneKind.RDMA, 12.5, 5.0, 8.0, 0.0, 15.0, 5.0),
        "vpc": PlaneSpec(PlaneKind.VPC, 3.125, 25.0, 30.0, 0.0, 20.0, 20.0),
    }
