"""Model, cluster and workload descriptions plus a deterministic request generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .interconnect import PlaneSpec, default_planes

# Seed-sequence spawn keys. Arrivals and per-request streams never share state.
_ARRIVAL_STREAM = 0
_REQUEST_STREAM = 1


@dataclass(frozen=True)
class MoEModelSpec:
    num_layers: int = 61
    hidden_dim: int = 7168
    num_router_experts: int = 256
    top_k: int = 8
    num_shared_experts: int = 1
    total_params: float = 671e9
    active_params: float = 37e9
    bytes_per_param: int = 1
    # 576-wide MLA latent (512 + 64 rope) per layer, 61 layers, BF16.
    kv_bytes_per_token: int = 576 * 61 * 2
    num_heads: int = 128


@dataclass(frozen=True)
class ClusterSpec:
    num_nodes: int = 48
    npus_per_node: int = 8
    dies_per_npu: int = 2
    aic_per_die: int = 24
    aiv_per_die: int = 48
    cpu_dram_per_node: int = 1 << 40
    ssd_per_node: int = 8 << 40
    plane_specs: Mapping[str, PlaneSpec] = field(default_factory=default_planes)

    @property
    def dies_per_node(self) -> int:
        return self.npus_per_node * self.dies_per_npu

    @property
    def total_dies(self) -> int:
        return self.num_nodes * self.dies_per_node


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_specs(model: MoEModelSpec, cluster: ClusterSpec, ep_degree: int = 320) -> ValidationReport:
    """Check model/cluster invariants and decode-placement feasibility.

    Never raises; every failed invariant is listed in the report.
    """
    problems: list[str] = []
    for name in ("num_layers", "hidden_dim", "num_router_experts", "top_k",
                 "num_shared_experts", "bytes_per_param", "kv_bytes_per_token", "num_heads"):
        if getattr(model, name) <= 0:
            problems.append(f"{name} must be positive")
    if model.total_params <= 0 or model.active_params <= 0:
        problems.append("parameter counts must be positive")
    if model.top_k > model.num_router_experts:
        problems.append("top_k must not exceed num_router_experts")
    if model.active_params > model.total_params:
        problems.append("active_params must not exceed total_params")
    for name in ("num_nodes", "npus_per_node", "dies_per_npu", "aic_per_die", "aiv_per_die",
                 "cpu_dram_per_node", "ssd_per_node"):
        if getattr(cluster, name) <= 0:
            problems.append(f"{name} must be positive")
    if ep_degree <= 0:
        problems.append("ep_degree must be positive")
    elif not problems and ep_degree > cluster.total_dies:
        problems.append(
            f"placement infeasible: ep_degree {ep_degree} exceeds {cluster.total_dies} dies")
    return ValidationReport(tuple(problems))


@dataclass(frozen=True)
class LengthDist:
    """Token-length distribution: ``constant``, ``uniform`` or truncated ``lognormal``.

    ``uniform`` draws integers in ``[low, high]``. ``lognormal`` draws
    ``round(exp(N(mu, sigma)))`` conditioned on ``low <= x <= high``.
    """

    kind: str = "constant"
    value: int = 4096
    low: int = 1
    high: int = 1 << 20
    mu: float = 0.0
    sigma: float = 1.0

    def validate(self) -> None:
        if self.kind == "constant":
            if self.value < 1:
                raise ValueError("constant length must be >= 1")
        elif self.kind == "uniform":
            if not 1 <= self.low <= self.high:
                raise ValueError("uniform requires 1 <= low <= high")
        elif self.kind == "lognormal":
            if self.sigma <= 0 or not 1 <= self.low <= self.high:
                raise ValueError("lognormal requires sigma > 0 and 1 <= low <= high")
        else:
            raise ValueError(f"unknown distribution kind {self.kind!r}")

    def mean(self) -> float:
        if self.kind == "constant":
            return float(self.value)
        if self.kind == "uniform":
            return (self.low + self.high) / 2.0
        # Truncated log-normal first moment (continuous approximation).
        phi = lambda z: 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))  # noqa: E731
        a, b = math.log(self.low), math.log(self.high)
        s, m = self.sigma, self.mu
        mass = phi((b - m) / s) - phi((a - m) / s)
        shifted = phi((b - m - s * s) / s) - phi((a - m - s * s) / s)
        return math.exp(m + s * s / 2.0) * shifted / mass

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, self.value, dtype=np.int64)
        if self.kind == "uniform":
            return rng.integers(self.low, self.high + 1, size=n, dtype=np.int64)
        out = np.empty(0, dtype=np.int64)
        while out.size < n:
            draw = np.rint(np.exp(rng.normal(self.mu, self.sigma, size=2 * (n - out.size) + 8)))
            draw = draw[(draw >= self.low) & (draw <= self.high)].astype(np.int64)
            out = np.concatenate([out, draw])
        return out[:n]


@dataclass(frozen=True)
class ArrivalProcess:
    """``closed`` puts every request at t=0; ``poisson`` uses ``rate_per_s``."""

    kind: str = "closed"
    rate_per_s: float = 1.0


@dataclass(frozen=True)
class WorkloadSpec:
    num_requests: int = 64
    arrival: ArrivalProcess = field(default_factory=ArrivalProcess)
    prompt_len_dist: LengthDist = field(default_factory=lambda: LengthDist("constant", 4096))
    output_len_dist: LengthDist = field(default_factory=lambda: LengthDist("constant", 256))
    reuse_rate: float = 0.0
    reuse_prefix_fraction: float = 1.0
    block_size: int = 128
    seed: int = 0


@dataclass
class Request:
    id: int
    arrival_time: int
    prompt_len: int
    output_len: int
    reused_prefix_len: int
    token_hashes: np.ndarray
    reuse_source: int | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Request):
            return NotImplemented
        return (
            (self.id, self.arrival_time, self.prompt_len, self.output_len,
             self.reused_prefix_len, self.reuse_source)
            == (other.id, other.arrival_time, other.prompt_len, other.output_len,
                other.reused_prefix_len, other.reuse_source)
            and np.array_equal(self.token_hashes, other.token_hashes)
        )


def request_rng(seed: int, index: int) -> np.random.Generator:
    """Independent PCG64 stream for request ``index`` under ``seed``."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(seed, spawn_key=(_REQUEST_STREAM, index))))


def _arrival_times(spec: WorkloadSpec) -> np.ndarray:
    n = spec.num_requests
    if spec.arrival.kind == "closed":
        return np.zeros(n, dtype=np.int64)
    if spec.arrival.kind != "poisson" or spec.arrival.rate_per_s <= 0:
        raise ValueError(f"invalid arrival process {spec.arrival!r}")
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(spec.seed, spawn_key=(_ARRIVAL_STREAM,))))
    gaps_us = rng.exponential(1e6 / spec.arrival.rate_per_s, size=n)
    return np.rint(np.cumsum(gaps_us)).astype(np.int64)


def generate_workload(spec: WorkloadSpec) -> list[Request]:
    """Build a deterministic request stream.

    Reusing requests copy the leading blocks of an earlier prompt's token
    chain, so their ``reused_prefix_len`` is always a whole number of blocks
    and the prefix is actually present in the earlier request.
    """
    if spec.num_requests <= 0:
        raise ValueError("num_requests must be positive")
    if not 0.0 <= spec.reuse_rate <= 1.0:
        raise ValueError("reuse_rate must lie in [0, 1]")
    if not 0.0 < spec.reuse_prefix_fraction <= 1.0:
        raise ValueError("reuse_prefix_fraction must lie in (0, 1]")
    if spec.block_size <= 0:
        raise ValueError("block_size must be positive")
    spec.prompt_len_dist.validate()
    spec.output_len_dist.validate()

    arrivals = _arrival_times(spec)
    bs = spec.block_size
    requests: list[Request] = []
    for i in range(spec.num_requests):
        rng = request_rng(spec.seed, i)
        prompt_len = int(spec.prompt_len_dist.sample(rng, 1)[0])
        output_len = int(spec.output_len_dist.sample(rng, 1)[0])
        tokens = rng.integers(0, np.iinfo(np.int64).max, size=prompt_len, dtype=np.int64).astype(np.uint64)
        wants_reuse = rng.random() < spec.reuse_rate
        source_idx = int(rng.integers(0, i)) if i > 0 else None
        reused, source = 0, None
        if wants_reuse and source_idx is not None:
            src = requests[source_idx]
            # Keep at least one token to compute; whole blocks only.
            limit = min(int(prompt_len * spec.reuse_prefix_fraction), src.prompt_len, prompt_len - 1)
            reused = (limit // bs) * bs
            if reused > 0:
                tokens[:reused] = src.token_hashes[:reused]
                source = source_idx
        requests.append(Request(i, int(arrivals[i]), prompt_len, output_len, reused, tokens, source))
    requests.sort(key=lambda r: (r.arrival_time, r.id))
    return requests
