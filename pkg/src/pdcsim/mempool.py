"""Disaggregated memory pool: consistent-hash placement over DRAM/SSD tiered servers.

Tier rules (all per server):

* ``put`` writes the persistent SSD copy and a hot DRAM copy, both most-recent.
* DRAM overflow demotes the least-recently-used DRAM objects of the same
  namespace (their SSD copy stays). SSD overflow deletes least-recently-used
  objects of the same namespace from both tiers, so DRAM is always a subset
  of SSD.
* ``get`` refreshes recency in every tier holding the object; an SSD-only hit
  is promoted back into DRAM.

Eviction never crosses namespaces, which is what keeps tenants isolated.
Capacity and quota are accounted in allocation units (2 MB by default).
"""

from __future__ import annotations

import bisect
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Iterable

from .hashing import hash_ints, mix64
from .interconnect import Mechanism, PlaneSpec, estimate_transfer

MB = 1 << 20


class PoolError(Exception):
    pass


class QuotaExceeded(PoolError):
    pass


class CapacityExceeded(PoolError):
    pass


class ServerUnavailable(PoolError):
    pass


def key_point(key: Hashable) -> int:
    """64-bit ring position of a key; tuples are folded element by element."""
    if isinstance(key, int):
        return mix64(key & 0xFFFFFFFFFFFFFFFF)
    if isinstance(key, tuple):
        return hash_ints(key_point(k) for k in key)
    if isinstance(key, (bytes, str)):
        data = key.encode() if isinstance(key, str) else key
        return hash_ints(data)
    raise TypeError(f"unsupported key type {type(key).__name__}")


class HashRing:
    """Consistent-hash ring with ``vnodes_per_server`` points per server."""

    def __init__(self, servers: Iterable[int] = (), vnodes_per_server: int = 128):
        if vnodes_per_server < 1:
            raise ValueError("vnodes_per_server must be >= 1")
        self.vnodes_per_server = vnodes_per_server
        self._points: list[int] = []
        self._owners: list[int] = []
        self.servers: list[int] = []
        for s in servers:
            self.add_server(s)

    def _server_points(self, server: int) -> list[int]:
        return [hash_ints((0x5EED, server, v)) for v in range(self.vnodes_per_server)]

    def add_server(self, server: int) -> None:
        if server in self.servers:
            raise ValueError(f"server {server} already on ring")
        pts = self._server_points(server)
        if len(set(pts)) != len(pts) or any(self._find(p) is not None for p in pts):
            raise ValueError("ring point collision")
        for p in pts:
            i = bisect.bisect_left(self._points, p)
            self._points.insert(i, p)
            self._owners.insert(i, server)
        self.servers.append(server)

    def remove_server(self, server: int) -> None:
        if server not in self.servers:
            raise KeyError(f"unknown server {server}")
        keep = [(p, o) for p, o in zip(self._points, self._owners) if o != server]
        self._points = [p for p, _ in keep]
        self._owners = [o for _, o in keep]
        self.servers.remove(server)

    def _find(self, point: int) -> int | None:
        i = bisect.bisect_left(self._points, point)
        return i if i < len(self._points) and self._points[i] == point else None

    @property
    def points(self) -> list[tuple[int, int]]:
        return list(zip(self._points, self._owners))

    def lookup(self, key: Hashable) -> int:
        if not self._points:
            raise PoolError("empty ring")
        i = bisect.bisect_left(self._points, key_point(key))
        return self._owners[i % len(self._points)]


def ring_lookup(ring: HashRing, key: Hashable) -> int:
    """Owner of the first ring point clockwise from ``hash(key)``."""
    return ring.lookup(key)


@dataclass(frozen=True)
class NamespaceSpec:
    id: str
    quota: int

    def __post_init__(self) -> None:
        if self.quota <= 0:
            raise ValueError("namespace quota must be positive")


@dataclass
class PoolObject:
    namespace: str
    key: Hashable
    size: int
    payload: bytes | None = None
    last_access: int = 0

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise ValueError("object size must be positive")
        if self.payload is not None and len(self.payload) != self.size:
            raise ValueError("payload length must equal size")


ObjId = tuple  # (namespace, key)


@dataclass
class PoolServer:
    id: int
    dram_capacity: int
    ssd_capacity: int
    dram_objects: OrderedDict = field(default_factory=OrderedDict)
    ssd_objects: OrderedDict = field(default_factory=OrderedDict)
    failed: bool = False
    dram_used: int = 0
    ssd_used: int = 0


def _alloc(size: int, unit: int) -> int:
    return -(-size // unit) * unit


class Tier(str, Enum):
    DRAM = "DRAM"
    SSD = "SSD"


@dataclass(frozen=True)
class GetResult:
    hit: bool
    tier: Tier | None
    latency: float
    payload: bytes | None = None
    size: int = 0
    server: int | None = None


@dataclass
class PoolStats:
    dram_hits: int = 0
    ssd_hits: int = 0
    misses: int = 0
    demotions: int = 0
    evictions: int = 0
    bytes_served: dict = field(default_factory=lambda: {Tier.DRAM: 0, Tier.SSD: 0})


class MemoryPool:
    """Tiered key-value pool.

    Args:
        num_servers: pool servers, one per node by default.
        dram_capacity: DRAM bytes per server.
        ssd_capacity: SSD bytes per server.
        plane: network plane used for remote access cost.
        alloc_unit: allocation rounding unit in bytes.
        dram_latency: DRAM tier service latency (µs).
        ssd_latency: SSD tier service latency (µs).
        failure_mode: ``"miss"`` or ``"error"`` for gets on a failed server.
        materialize: store real payload bytes instead of sizes only.
    """

    def __init__(
        self,
        num_servers: int,
        dram_capacity: int,
        ssd_capacity: int,
        plane: PlaneSpec | None = None,
        *,
        vnodes_per_server: int = 128,
        alloc_unit: int = 2 * MB,
        dram_latency: float = 5.0,
        ssd_latency: float = 100.0,
        failure_mode: str = "miss",
        materialize: bool = True,
        dies_per_node: int = 16,
    ):
        if num_servers < 1 or dram_capacity < 0 or ssd_capacity <= 0 or alloc_unit < 1:
            raise ValueError("invalid pool geometry")
        if failure_mode not in ("miss", "error"):
            raise ValueError("failure_mode must be 'miss' or 'error'")
        self.ring = HashRing(range(num_servers), vnodes_per_server)
        self.servers = {i: PoolServer(i, dram_capacity, ssd_capacity) for i in range(num_servers)}
        self.plane = plane or PlaneSpec()
        self.alloc_unit = alloc_unit
        self.dram_latency = dram_latency
        self.ssd_latency = ssd_latency
        self.failure_mode = failure_mode
        self.materialize = materialize
        self.dies_per_node = dies_per_node
        self.namespaces: dict[str, NamespaceSpec] = {}
        self.usage: dict[str, int] = {}
        self.stats = PoolStats()
        self.clock = 0

    # -- namespaces -----------------------------------------------------
    def create_namespace(self, ns: str, quota: int) -> NamespaceSpec:
        if ns in self.namespaces:
            raise PoolError(f"namespace {ns!r} exists")
        spec = NamespaceSpec(ns, quota)
        self.namespaces[ns] = spec
        self.usage[ns] = 0
        return spec

    def _check_ns(self, ns: str) -> None:
        if ns not in self.namespaces:
            raise PoolError(f"unknown namespace {ns!r}")

    def remaining_quota(self, ns: str) -> int:
        self._check_ns(ns)
        return self.namespaces[ns].quota - self.usage[ns]

    def owner(self, ns: str, key: Hashable) -> int:
        return self.ring.lookup((ns, key))

    # -- helpers --------------------------------------------------------
    def _tick(self, now: int | None) -> int:
        self.clock = max(self.clock + 1, now) if now is not None else self.clock + 1
        return self.clock

    def _lru_victims(self, objs: OrderedDict, ns: str, need: int, free: int,
                     skip: ObjId | None = None) -> list | None:
        """LRU-first objects of ``ns`` to drop so ``need`` fits, or None."""
        victims = []
        for oid, obj in objs.items():
            if free >= need:
                break
            if oid[0] == ns and oid != skip:
                victims.append(oid)
                free += _alloc(obj.size, self.alloc_unit)
        return victims if free >= need else None

    def _access_latency(self, server: int, client_die: int, size: int, tier: Tier, plane: PlaneSpec) -> float:
        tier_us = self.dram_latency if tier is Tier.DRAM else self.ssd_latency
        # Server s lives on node s; the client die sits on its own node.
        server_die = server * self.dies_per_node
        if server_die == client_die:
            server_die += 1
        return tier_us + estimate_transfer(server_die, client_die, size, plane, Mechanism.SDMA,
                                           self.dies_per_node).latency

    def _admit_dram(self, srv: PoolServer, oid: ObjId, obj: PoolObject) -> None:
        need = _alloc(obj.size, self.alloc_unit)
        victims = self._lru_victims(srv.dram_objects, oid[0], need, srv.dram_capacity - srv.dram_used)
        if victims is None:
            return  # too large for DRAM even after demotion; SSD copy serves it
        for v in victims:
            srv.dram_used -= _alloc(srv.dram_objects.pop(v).size, self.alloc_unit)
            self.stats.demotions += 1
        srv.dram_objects[oid] = obj
        srv.dram_used += need

    def _drop(self, srv: PoolServer, oid: ObjId) -> PoolObject | None:
        """Remove an object from both tiers and release its accounting."""
        obj = srv.ssd_objects.pop(oid, None)
        if obj is None:
            return None
        unit = _alloc(obj.size, self.alloc_unit)
        srv.ssd_used -= unit
        if srv.dram_objects.pop(oid, None) is not None:
            srv.dram_used -= unit
        self.usage[oid[0]] -= unit
        return obj

    # -- API ------------------------------------------------------------
    def put(self, ns: str, key: Hashable, payload: bytes | int, now: int | None = None) -> int:
        """Store an object; returns the owning server id.

        ``payload`` is either bytes or, in synthetic mode, an integer size.

        Raises:
            QuotaExceeded: namespace quota would be exceeded (pool unchanged).
            CapacityExceeded: the object cannot fit the owner's SSD (pool unchanged).
        """
        self._check_ns(ns)
        if isinstance(payload, int):
            size, data = payload, None
            if self.materialize:
                data = bytes(size)
        else:
            size, data = len(payload), (bytes(payload) if self.materialize else None)
        oid = (ns, key)
        sid = self.owner(ns, key)
        srv = self.servers[sid]
        if srv.failed:
            raise ServerUnavailable(f"server {sid} is down")
        old = srv.ssd_objects.get(oid)
        old_alloc = _alloc(old.size, self.alloc_unit) if old else 0
        new_alloc = _alloc(size, self.alloc_unit)

        # SSD plan first; everything is validated before any mutation.
        free = srv.ssd_capacity - srv.ssd_used + old_alloc
        victims = self._lru_victims(srv.ssd_objects, ns, new_alloc, free, skip=oid)
        if victims is None:
            raise CapacityExceeded(f"object of {size} B does not fit server {sid}")
        freed = sum(_alloc(srv.ssd_objects[v].size, self.alloc_unit) for v in victims)
        if self.usage[ns] - old_alloc - freed + new_alloc > self.namespaces[ns].quota:
            raise QuotaExceeded(f"namespace {ns!r} quota exceeded")

        t = self._tick(now)
        if old:
            self._drop(srv, oid)
        for v in victims:
            self._drop(srv, v)
            self.stats.evictions += 1
        obj = PoolObject(ns, key, size, data, t)
        srv.ssd_objects[oid] = obj
        srv.ssd_used += new_alloc
        self.usage[ns] += new_alloc
        self._admit_dram(srv, oid, obj)
        return sid

    def get(self, ns: str, key: Hashable, client_die: int = 0, plane: PlaneSpec | None = None,
            now: int | None = None) -> GetResult:
        """Fetch an object; latency = tier latency + network transfer to ``client_die``."""
        self._check_ns(ns)
        plane = plane or self.plane
        oid = (ns, key)
        sid = self.owner(ns, key)
        srv = self.servers[sid]
        if srv.failed:
            if self.failure_mode == "error":
                raise ServerUnavailable(f"server {sid} is down")
            self.stats.misses += 1
            return GetResult(False, None, 0.0, server=sid)
        obj = srv.ssd_objects.get(oid)
        if obj is None:
            self.stats.misses += 1
            return GetResult(False, None, 0.0, server=sid)
        obj.last_access = self._tick(now)
        srv.ssd_objects.move_to_end(oid)
        if oid in srv.dram_objects:
            srv.dram_objects.move_to_end(oid)
            tier = Tier.DRAM
            self.stats.dram_hits += 1
        else:
            tier = Tier.SSD
            self.stats.ssd_hits += 1
            self._admit_dram(srv, oid, obj)
        self.stats.bytes_served[tier] += obj.size
        return GetResult(True, tier, self._access_latency(sid, client_die, obj.size, tier, plane),
                         obj.payload, obj.size, sid)

    def contains(self, ns: str, key: Hashable) -> bool:
        """Residency check without touching recency or stats."""
        srv = self.servers[self.owner(ns, key)]
        return not srv.failed and (ns, key) in srv.ssd_objects

    def delete(self, ns: str, key: Hashable) -> bool:
        self._check_ns(ns)
        oid = (ns, key)
        return self._drop(self.servers[self.owner(ns, key)], oid) is not None

    def fail_server(self, server: int) -> None:
        """Volatile DRAM is lost; the persistent SSD tier survives."""
        if server not in self.servers:
            raise PoolError(f"unknown server {server}")
        srv = self.servers[server]
        srv.dram_objects.clear()
        srv.dram_used = 0
        srv.failed = True

    def recover_server(self, server: int) -> None:
        if server not in self.servers:
            raise PoolError(f"unknown server {server}")
        self.servers[server].failed = False

    def occupancy(self) -> list[dict]:
        """Per-server tier occupancy rows for reports."""
        return [
            {"server": s.id, "dram_bytes": s.dram_used,
             "ssd_bytes": s.ssd_used, "failed": s.failed}
            for s in self.servers.values()
        ]
