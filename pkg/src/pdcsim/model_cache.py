"""Model-weight caching: cold/warm start arithmetic and pool-backed prefetch.

Three strategies are compared. ``NO_CACHE`` pulls weights from object storage
on every switch, ``LOCAL_DRAM`` keeps one model per instance in host DRAM,
and ``EMS_POOL`` keeps every model block once in the shared memory pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .hashing import hash_ints
from .mempool import MemoryPool, Tier

GB = 1e9
MODEL_NS = "model"


class Strategy(str, Enum):
    NO_CACHE = "NO_CACHE"
    LOCAL_DRAM = "LOCAL_DRAM"
    EMS_POOL = "EMS_POOL"


@dataclass(frozen=True)
class ModelBlockSet:
    model_id: str = "deepseek-r1"
    version: int = 1
    total_bytes: int = 671 * 10**9
    block_size_bytes: int = 1 << 30

    def __post_init__(self) -> None:
        if self.total_bytes <= 0 or self.block_size_bytes <= 0:
            raise ValueError("sizes must be positive")

    @property
    def block_sizes(self) -> list[int]:
        full, rest = divmod(self.total_bytes, self.block_size_bytes)
        return [self.block_size_bytes] * full + ([rest] if rest else [])

    @property
    def block_keys(self) -> list[int]:
        # Keys carry model id and version, so versions never share blocks.
        mid = hash_ints(self.model_id.encode())
        return [hash_ints((mid, self.version, i)) for i in range(len(self.block_sizes))]


@dataclass(frozen=True)
class LoadScenario:
    strategy: Strategy = Strategy.EMS_POOL
    num_instances: int = 8
    obs_bandwidth: float = 2.5
    obs_efficiency: float = 0.839
    warm_load_latency: float = 5.0
    num_active_models: int = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not 0.0 < self.obs_efficiency <= 1.0:
            raise ValueError("obs_efficiency must lie in (0, 1]")
        if self.num_instances < 1 or self.num_active_models < 1:
            raise ValueError("counts must be positive")


def cold_start_latency(s: LoadScenario, m: ModelBlockSet) -> float:
    """Seconds to fetch the model from object storage.

    Private-copy strategies make every instance fetch concurrently and split
    the bucket bandwidth; the pool performs a single shared fetch.
    """
    effective = s.obs_bandwidth * s.obs_efficiency
    if effective <= 0:
        raise ValueError("object-storage bandwidth must be positive")
    if s.strategy is not Strategy.EMS_POOL:
        effective /= s.num_instances
    return m.total_bytes / (effective * GB)


def avg_switch_latency(hit_rate: float, warm: float, miss: float) -> float:
    if not 0.0 <= hit_rate <= 1.0:
        raise ValueError("hit_rate must lie in [0, 1]")
    return hit_rate * warm + (1.0 - hit_rate) * miss


def dram_overhead(strategy: Strategy, num_instances: int) -> int:
    """Host DRAM used, as a multiple of one model's size."""
    strategy = Strategy(strategy)
    if strategy is Strategy.NO_CACHE:
        return 0
    if strategy is Strategy.LOCAL_DRAM:
        return num_instances
    return 1


def switch_hit_rate(strategy: Strategy, num_active_models: int, ems_capacity_models: int = 0) -> float:
    """Hit rate for uniform random switching among ``num_active_models``."""
    if num_active_models < 1:
        raise ValueError("num_active_models must be >= 1")
    strategy = Strategy(strategy)
    if strategy is Strategy.NO_CACHE:
        return 0.0
    if strategy is Strategy.LOCAL_DRAM:
        return 1.0 / num_active_models
    return min(1.0, ems_capacity_models / num_active_models)


@dataclass
class LoadTimeline:
    duration: float
    bytes_by_tier: dict = field(default_factory=dict)
    servers_used: int = 0
    service_bandwidth: float = 0.0
    ingest_bandwidth: float = 0.0
    bytes_from_obs: int = 0

    @property
    def aggregate_bandwidth(self) -> float:
        return min(self.service_bandwidth, self.ingest_bandwidth)


@dataclass(frozen=True)
class LoadCalibration:
    """Bandwidths in GB/s. Defaults make a 671 GB DRAM-resident load take ~5 s."""

    dram_service_per_server: float = 100.0
    evs_per_node: float = 50.0  # 400 Gbps
    ingest_per_die: float = 4.2
    obs_bandwidth: float = 2.5 * 0.839


def register_model(pool: MemoryPool, m: ModelBlockSet, namespace: str = MODEL_NS) -> None:
    """Write every block of ``m`` into the pool (synthetic sizes)."""
    if namespace not in pool.namespaces:
        pool.create_namespace(namespace, 1 << 62)
    for key, size in zip(m.block_keys, m.block_sizes):
        pool.put(namespace, key, size)


def prefetch_and_load(pool: MemoryPool, m: ModelBlockSet, target_dies: int,
                      cal: LoadCalibration | None = None, namespace: str = MODEL_NS) -> LoadTimeline:
    """Stream every block of ``m`` from the pool into ``target_dies``.

    Blocks are striped over their owning servers, which serve in parallel, so
    the load runs at ``min(sum of server service bandwidth, die ingest)``.
    Blocks missing from the pool fall back to object storage.

    Raises:
        KeyError: the model version was never registered.
    """
    cal = cal or LoadCalibration()
    if target_dies < 1:
        raise ValueError("target_dies must be >= 1")
    if namespace not in pool.namespaces:
        raise KeyError(f"model {m.model_id} v{m.version} is not registered")
    per_server: dict[int, list[float]] = {}
    by_tier = {Tier.DRAM: 0, Tier.SSD: 0}
    obs_bytes = 0
    found = 0
    for key, size in zip(m.block_keys, m.block_sizes):
        res = pool.get(namespace, key)
        if not res.hit:
            obs_bytes += size
            continue
        found += 1
        rate = cal.dram_service_per_server if res.tier is Tier.DRAM else cal.evs_per_node
        acc = per_server.setdefault(res.server, [0.0, 0.0])
        acc[0] += size
        acc[1] += size / rate
        by_tier[res.tier] += size
    if found == 0:
        raise KeyError(f"model {m.model_id} v{m.version} is not registered")
    total = sum(by_tier.values())
    # A server's rate is its byte-weighted tier rate; striping sums them.
    service_bw = sum(b / t for b, t in per_server.values())
    ingest = target_dies * cal.ingest_per_die
    duration = total / (min(service_bw, ingest) * GB) + obs_bytes / (cal.obs_bandwidth * GB)
    return LoadTimeline(duration, {t.value: b for t, b in by_tier.items()}, len(per_server),
                        service_bw, ingest, obs_bytes)
