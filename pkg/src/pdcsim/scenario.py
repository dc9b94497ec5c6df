"""Scenario configuration, end-to-end runs, sweeps and the table-check suite."""

from __future__ import annotations

import dataclasses
import json
import math
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from . import context_cache as cc
from . import expert_parallel as ep
from . import interconnect as ic
from . import model_cache as mc
from . import pipeline as pl
from . import prefill_hybrid as ph
from .mempool import MemoryPool
from .workload import (ArrivalProcess, ClusterSpec, LengthDist, MoEModelSpec, WorkloadSpec,
                       generate_workload, validate_specs)

SCHEMA_VERSION = 1
GiB = 1 << 30


class ConfigError(ValueError):
    """Unparseable, unknown or invalid configuration."""


# -- configuration sections -----------------------------------------------------

@dataclass(frozen=True)
class DeploymentSpec:
    prefill_instances: int = 6
    prefill_dies_per_instance: int = 32
    prefill_tp: int = 32
    prefill_batch_tokens: int = 16384
    decode_ep_degree: int = 320
    decode_batch_per_npu: int = 96
    decode_tp: int = 4
    decode_dp: int = 32
    shared_copies: int = 32
    router_experts: int = 256
    redundant_experts: int = 32


@dataclass(frozen=True)
class PipelineSection:
    stream0: tuple[pl.Stage, ...] = pl.DEFAULT_STREAM0.stages
    stream1: tuple[pl.Stage, ...] = pl.DEFAULT_STREAM1.stages
    stream0_aic: int = 16
    stream0_aiv: int = 32
    stream1_aic: int = 8
    stream1_aiv: int = 16
    reference_batch: int = 96
    microbatched: bool = True
    serial_fraction: float = 0.1
    # Residual so 61 layers at the reference batch reproduce a 49.4 ms TPOT
    # at 1.7 tokens per step: 49.4 * 1.7 ms - 61 * 1260 µs.
    decode_fixed_overhead_us: float = 7120.0
    prefill_aic: tuple[pl.Stage, ...] = pl.DEFAULT_PREFILL.aic
    prefill_aiv: tuple[pl.Stage, ...] = pl.DEFAULT_PREFILL.aiv
    prefill_sdma: tuple[pl.Stage, ...] = pl.DEFAULT_PREFILL.sdma
    prefill_reference_tokens: int = 16384
    prefill_microbatched: bool = True
    prefill_fixed_overhead_ms: float = 800.0
    decode_calibration: tuple[tuple[int, float], ...] = ((96, 49.4), (8, 14.9))


@dataclass(frozen=True)
class CacheSection:
    enabled: bool = True
    block_size: int = 128
    plane: str = "ub"
    pool_servers: int = 48
    dram_per_server: int = 512 * GiB
    ssd_per_server: int = 8192 * GiB
    dram_latency_us: float = 5.0
    ssd_latency_us: float = 100.0
    namespace_quota: int = 1 << 50
    model_kind: cc.ModelKind = cc.ModelKind.REASONING
    approx_reuse: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    model: MoEModelSpec = field(default_factory=MoEModelSpec)
    cluster: ClusterSpec = field(default_factory=ClusterSpec)
    workload: WorkloadSpec = field(default_factory=lambda: WorkloadSpec(num_requests=256))
    planes: Mapping[str, ic.PlaneSpec] = field(default_factory=ic.default_planes)
    deployment: DeploymentSpec = field(default_factory=DeploymentSpec)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    cache: CacheSection = field(default_factory=CacheSection)
    mtp: pl.MTPConfig = field(default_factory=pl.MTPConfig)
    seed: int = 0


# -- strict parsing ------------------------------------------------------------

_SKIP = {(ClusterSpec, "plane_specs")}


def _coerce(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if is_dataclass(tp):
        return _from_dict(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} items")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin in (dict, Mapping, typing.Mapping) or origin is getattr(__import__("collections.abc").abc, "Mapping"):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return {str(k): _coerce(args[1], v, f"{path}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{path}: expected an integer")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def _from_dict(cls: type, data: Any, path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in fields(cls) if f.init and (cls, f.name) not in _SKIP}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_from_dict(data: Mapping) -> ScenarioConfig:
    cfg = _from_dict(ScenarioConfig, dict(data or {}), "config")
    # Keep the cluster's plane table in sync with the planes section.
    planes = {**ic.default_planes(), **cfg.planes}
    cfg = replace(cfg, planes=planes, cluster=replace(cfg.cluster, plane_specs=planes))
    validate_config(cfg)
    return cfg


def validate_config(cfg: ScenarioConfig) -> None:
    problems = list(validate_specs(cfg.model, cfg.cluster, cfg.deployment.decode_ep_degree).violations)
    w = cfg.workload
    if w.num_requests < 0:
        problems.append("workload.num_requests must be >= 0")
    if not 0.0 <= w.reuse_rate <= 1.0:
        problems.append("workload.reuse_rate must lie in [0, 1]")
    if cfg.cache.plane not in cfg.planes:
        problems.append(f"cache.plane {cfg.cache.plane!r} is not a configured plane")
    if not cc.MIN_BLOCK <= cfg.cache.block_size <= cc.MAX_BLOCK:
        problems.append("cache.block_size must lie in [128, 512]")
    d = cfg.deployment
    if min(d.prefill_dies_per_instance, d.prefill_tp, d.prefill_batch_tokens, d.decode_batch_per_npu) < 1:
        problems.append("deployment sizes must be positive")
    for name, dist in (("prompt_len_dist", w.prompt_len_dist), ("output_len_dist", w.output_len_dist)):
        try:
            dist.validate()
        except ValueError as exc:
            problems.append(f"workload.{name}: {exc}")
    if problems:
        raise ConfigError("; ".join(problems))


def parse_config(path: str | Path) -> ScenarioConfig:
    """Load a YAML scenario file; every section is optional and defaulted.

    Raises:
        FileNotFoundError: the file does not exist.
        ConfigError: YAML syntax error (with line), unknown key, bad type or
            failed validation.
    """
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{p}: YAML parse error{where}: {getattr(exc, 'problem', exc)}") from None
    return config_from_dict(data)


def default_config_path() -> Path:
    return Path(str(resources.files("pdcsim") / "configs" / "deepseek_r1_default.yaml"))


def _plain(obj: Any) -> Any:
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)
                if f.init and (type(obj), f.name) not in _SKIP}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: ScenarioConfig) -> dict:
    return _plain(cfg)


# -- reports -------------------------------------------------------------------

@dataclass
class MetricReport:
    scenario_id: str
    rows: list[tuple[str, float, str]] = field(default_factory=list)
    trace: str | None = None

    def add(self, name: str, value: float, unit: str) -> None:
        self.rows.append((name, float(value), unit))

    def get(self, name: str) -> float:
        for n, v, _ in self.rows:
            if n == name:
                return v
        raise KeyError(name)

    def to_json(self) -> str:
        doc = {"schema_version": SCHEMA_VERSION, "scenario_id": self.scenario_id,
               "metrics": [{"name": n, "value": v, "unit": u} for n, v, u in self.rows],
               "trace": self.trace}
        return json.dumps(doc, sort_keys=True, indent=2)


def reports_to_csv(reports: Sequence[MetricReport], axis: str | None = None,
                   values: Sequence | None = None) -> str:
    """Long-format CSV: one row per (scenario, metric)."""
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema_version", "scenario_id", "axis", "value", "metric", "metric_value", "unit"])
    for i, rep in enumerate(reports):
        v = values[i] if values is not None else ""
        for n, x, u in rep.rows:
            w.writerow([SCHEMA_VERSION, rep.scenario_id, axis or "", v, n, repr(x), u])
    return buf.getvalue()


# -- simulation ----------------------------------------------------------------

def _scaled_stages(stages: Sequence[pl.Stage], factor: float) -> tuple[pl.Stage, ...]:
    return tuple(pl.Stage(s.name, s.latency_us * (s.fixed_share + factor * (1 - s.fixed_share)),
                          s.kind, s.fixed_share) for s in stages)


def decode_streams(cfg: ScenarioConfig, batch: int | None = None) -> tuple[pl.StreamSpec, pl.StreamSpec]:
    """Stage tables rescaled from the reference batch to ``batch``."""
    p = cfg.pipeline
    f = (batch or cfg.deployment.decode_batch_per_npu) / p.reference_batch
    return (pl.StreamSpec(p.stream0_aic, p.stream0_aiv, _scaled_stages(p.stream0, f)),
            pl.StreamSpec(p.stream1_aic, p.stream1_aiv, _scaled_stages(p.stream1, f)))


def prefill_layer_us(cfg: ScenarioConfig, tokens: int) -> float:
    p = cfg.pipeline
    stages = pl.PrefillStages(p.prefill_aic, p.prefill_aiv, p.prefill_sdma, p.prefill_reference_tokens)
    s = stages.scaled(tokens)
    return pl.prefill_layer_latency(s.aic, s.aiv, s.sdma, p.prefill_microbatched)


def _kv_load_us(results: list, plane: ic.PlaneSpec) -> float:
    """Time to pull a request's hit blocks.

    Blocks on one server are fetched one after another, servers in parallel,
    and the die's link caps the total rate.
    """
    if not results:
        return 0.0
    per_server: dict[int, float] = {}
    total = 0
    for r in results:
        per_server[r.server] = per_server.get(r.server, 0.0) + r.latency
        total += r.size
    return max(max(per_server.values()), total / (plane.link_bandwidth * 1e3))


def run_scenario(cfg: ScenarioConfig) -> MetricReport:
    """Workload → prefill with context caching → KV handoff → decode.

    Raises:
        ConfigError: the config fails validation.
        RuntimeError: any module error, prefixed with the scenario name.
    """
    validate_config(cfg)
    try:
        return _run(cfg)
    except ConfigError:
        raise
    except Exception as exc:  # surface with scenario context
        raise RuntimeError(f"scenario {cfg.name!r}: {exc}") from exc


def _run(cfg: ScenarioConfig) -> MetricReport:
    report = MetricReport(cfg.name)
    if cfg.workload.num_requests == 0:
        return report
    wspec = replace(cfg.workload, seed=cfg.seed, block_size=cfg.cache.block_size)
    requests = generate_workload(wspec)
    model, dep, cache = cfg.model, cfg.deployment, cfg.cache
    plane = cfg.planes[cache.plane]

    pool = MemoryPool(cache.pool_servers, cache.dram_per_server, cache.ssd_per_server, plane,
                      dram_latency=cache.dram_latency_us, ssd_latency=cache.ssd_latency_us,
                      materialize=False, dies_per_node=cfg.cluster.dies_per_node)
    pool.create_namespace(cc.CONTEXT_NS, cache.namespace_quota)
    index = cc.ContextIndex()
    # The prefill die sits on a node outside the pool servers.
    client_die = cache.pool_servers * cfg.cluster.dies_per_node

    # Requests are packed into per-die batches of about prefill_batch_tokens.
    batches: list[list] = [[]]
    tokens_in = 0
    for r in requests:
        if batches[-1] and tokens_in + r.prompt_len > dep.prefill_batch_tokens:
            batches.append([])
            tokens_in = 0
        batches[-1].append(r)
        tokens_in += r.prompt_len

    ttfts, prompt_tokens, reused_tokens, busy_us = [], 0, 0, 0.0
    load_total_us, stored_blocks, deduped = 0.0, 0, 0
    for batch in batches:
        computed, load_us, keysets = 0, 0.0, []
        for r in batch:
            keys = cc.split_into_blocks(r.token_hashes, cache.block_size)
            keysets.append(keys)
            hits = cc.lookup_prefix(index, keys, pool) if cache.enabled else 0
            reuse = min(sum(k.num_tokens for k in keys[:hits]), r.prompt_len - 1)
            got = [pool.get(cc.CONTEXT_NS, k.combined, client_die) for k in keys[:hits]]
            load_us += _kv_load_us(got, plane)
            computed += r.prompt_len - reuse
            reused_tokens += reuse
            prompt_tokens += r.prompt_len
        layer_us = prefill_layer_us(cfg, computed)
        batch_us = cfg.pipeline.prefill_fixed_overhead_ms * 1e3 + model.num_layers * layer_us + load_us
        busy_us += batch_us
        load_total_us += load_us
        ttfts.extend([batch_us] * len(batch))
        if cache.enabled:
            # Stores run in the background after the batch; nothing waits on them.
            for keys in keysets:
                rep = cc.store_blocks(index, pool, keys, cc.make_blocks(keys, model.kv_bytes_per_token))
                stored_blocks += rep.stored
                deduped += rep.deduped

    ttft = np.array(ttfts) / 1e3
    report.add("requests", len(requests), "count")
    report.add("prefill_batches", len(batches), "count")
    report.add("prefill_throughput", prompt_tokens / (busy_us / 1e6), "tokens/s/die")
    report.add("ttft_mean", float(ttft.mean()), "ms")
    report.add("ttft_p50", float(np.percentile(ttft, 50)), "ms")
    report.add("ttft_p99", float(np.percentile(ttft, 99)), "ms")
    report.add("token_reuse", reused_tokens / prompt_tokens, "fraction")
    report.add("kv_load_time_total", load_total_us / 1e3, "ms")
    report.add("cache_blocks_stored", stored_blocks, "count")
    report.add("cache_blocks_deduped", deduped, "count")
    report.add("pool_dram_hits", pool.stats.dram_hits, "count")
    report.add("pool_ssd_hits", pool.stats.ssd_hits, "count")
    report.add("pool_misses", pool.stats.misses, "count")
    report.add("pool_evictions", pool.stats.evictions, "count")
    report.add("pool_demotions", pool.stats.demotions, "count")

    # KV handoff over RDMA (mean request).
    src = ph.Instance("prefill0", 0)
    dst = ph.Instance("decode0", cfg.cluster.dies_per_node)
    mean_prompt = int(round(np.mean([r.prompt_len for r in requests])))
    probe = type("R", (), {"id": -1, "prompt_len": mean_prompt})()
    kv = ph.schedule_kv_transfer(probe, src, dst, cfg.planes["rdma"], model.kv_bytes_per_token,
                                 dies_per_node=cfg.cluster.dies_per_node)
    report.add("kv_transfer_latency", kv.latency / 1e3, "ms")
    report.add("kv_transfer_ub_bytes", kv.plane_bytes["UB"], "bytes")

    # Decode.
    s0, s1 = decode_streams(cfg)
    per_layer = pl.decode_layer_latency(s0, s1, cfg.pipeline.microbatched,
                                        cfg.cluster.aic_per_die, cfg.cluster.aiv_per_die,
                                        cfg.pipeline.serial_fraction)
    it = pl.tpot_and_throughput(dep.decode_batch_per_npu, model.num_layers, per_layer, cfg.mtp,
                                cfg.pipeline.decode_fixed_overhead_us)
    affine = pl.calibrate_decode_model(cfg.pipeline.decode_calibration, cfg.mtp.expected_tokens)
    tpot_aff, thr_aff = affine.predict(dep.decode_batch_per_npu)
    report.add("decode_per_layer", per_layer, "us")
    report.add("decode_tpot", it.tpot, "ms")
    report.add("decode_throughput", it.throughput, "tokens/s/npu")
    report.add("decode_tpot_affine", tpot_aff, "ms")
    report.add("decode_throughput_affine", thr_aff, "tokens/s/npu")
    report.add("mtp_tokens_per_iter", it.tokens_emitted, "tokens")

    # Expert-parallel exchange at the decode EP degree.
    epd = dep.decode_ep_degree
    slots = dep.shared_copies + dep.router_experts + dep.redundant_experts
    plan = ep.plan_buffers(epd, dep.decode_batch_per_npu, model.top_k, max(1, math.ceil(slots / epd)))
    local = dep.decode_batch_per_npu * model.top_k
    disp = ic.estimate_ep_exchange(epd, local * plan.dispatch_msg_size, cfg.planes["ub_dispatch"],
                                   dies_per_node=cfg.cluster.dies_per_node)
    comb = ic.estimate_ep_exchange(epd, local * plan.combine_msg_size, cfg.planes["ub_combine"],
                                   dies_per_node=cfg.cluster.dies_per_node)
    report.add("dispatch_latency", disp.latency, "us")
    report.add("combine_latency", comb.latency, "us")
    report.add("ep_buffer_total", plan.total / (1 << 20), "MiB")
    return report


# -- sweeps --------------------------------------------------------------------

def set_field(cfg: Any, axis: str, value: Any) -> Any:
    """Return a copy of ``cfg`` with the dotted field ``axis`` replaced.

    Raises:
        ConfigError: the axis does not name a config field.
    """
    head, _, rest = axis.partition(".")
    if not is_dataclass(cfg) or head not in {f.name for f in fields(cfg)}:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if rest:
        return replace(cfg, **{head: set_field(getattr(cfg, head), rest, value)})
    hint = typing.get_type_hints(type(cfg))[head]
    return replace(cfg, **{head: _coerce(hint, value, axis)})


def _run_point(args: tuple[ScenarioConfig, str, Any, int]) -> MetricReport:
    cfg, axis, value, i = args
    point = set_field(cfg, axis, value)
    point = replace(point, name=f"{cfg.name}[{axis}={value}]")
    if axis.startswith("planes."):
        point = replace(point, cluster=replace(point.cluster, plane_specs=point.planes))
    return run_scenario(point)


def sweep(cfg: ScenarioConfig, axis: str, values: Sequence[Any], workers: int = 1) -> list[MetricReport]:
    """One report per value, in input order, whatever ``workers`` is."""
    values = list(values)
    _check_axis(cfg, axis)
    if not values:
        return []
    jobs = [(cfg, axis, v, i) for i, v in enumerate(values)]
    if workers <= 1:
        return [_run_point(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_point, jobs))


def _check_axis(cfg: Any, axis: str) -> None:
    obj = cfg
    for part in axis.split("."):
        if not is_dataclass(obj) or part not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown sweep axis {axis!r}")
        obj = getattr(obj, part)


def ep_sweep(degrees: Sequence[int] = (8, 16, 32, 64, 128, 256), tokens: int = 128, top_k: int = 8,
             planes: Mapping[str, ic.PlaneSpec] | None = None) -> list[dict]:
    """Dispatch/combine latency and per-rank bandwidth per EP degree.

    Raises:
        ValueError: ``tokens`` is negative or ``top_k`` is below 1.
    """
    if tokens < 0 or top_k < 1:
        raise ValueError("ep-sweep needs tokens >= 0 and top_k >= 1")
    planes = planes or ic.default_planes()
    rows = []
    for d in degrees:
        for op, msg, plane in (("dispatch", ic.DISPATCH_MSG_BYTES, planes["ub_dispatch"]),
                               ("combine", ic.COMBINE_MSG_BYTES, planes["ub_combine"])):
            est = ic.estimate_ep_exchange(d, tokens * top_k * msg, plane)
            rows.append({"operator": op, "ep_degree": d, "latency_us": est.latency,
                         "bandwidth_gbps": est.effective_bandwidth})
    return rows


# -- table checks --------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    expected: float
    computed: float
    rel_tol: float | None = None
    abs_tol: float | None = None

    @property
    def passed(self) -> bool:
        err = abs(self.computed - self.expected)
        if self.abs_tol is not None and err <= self.abs_tol:
            return True
        if self.rel_tol is not None and err <= self.rel_tol * abs(self.expected):
            return True
        return self.abs_tol is None and self.rel_tol is None and err == 0

    def line(self) -> str:
        tol = (f"±{self.rel_tol:.0%}" if self.rel_tol is not None
               else f"±{self.abs_tol:g}" if self.abs_tol is not None else "exact")
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict}  {self.name:<44} expected {self.expected:<12.6g} computed {self.computed:<12.6g} {tol}"


def validate_tables() -> list[Check]:
    """Closed-form checks of buffer sizing, model caching, MTP, pipelines and EP."""
    MiB = 1 << 20
    checks: list[Check] = []
    b = ep.plan_buffers(320, 96, 8, 1)
    checks += [Check("dispatch buffer (MiB)", 225, b.dispatch_buffer / MiB, abs_tol=1 / 1024),
               Check("combine buffer (MiB)", 420, b.combine_buffer / MiB, abs_tol=1 / 1024),
               Check("buffer total (MiB)", 645, b.total / MiB, abs_tol=1 / 1024)]

    m = mc.ModelBlockSet()
    checks += [
        Check("cold start NO_CACHE x8 (s)", 2560, mc.cold_start_latency(mc.LoadScenario(mc.Strategy.NO_CACHE), m), rel_tol=0.01),
        Check("cold start LOCAL_DRAM x8 (s)", 2560, mc.cold_start_latency(mc.LoadScenario(mc.Strategy.LOCAL_DRAM), m), rel_tol=0.01),
        Check("cold start EMS_POOL (s)", 320, mc.cold_start_latency(mc.LoadScenario(mc.Strategy.EMS_POOL), m), rel_tol=0.01),
        Check("DRAM overhead NO_CACHE", 0, mc.dram_overhead(mc.Strategy.NO_CACHE, 8)),
        Check("DRAM overhead LOCAL_DRAM", 8, mc.dram_overhead(mc.Strategy.LOCAL_DRAM, 8)),
        Check("DRAM overhead EMS_POOL", 1, mc.dram_overhead(mc.Strategy.EMS_POOL, 8)),
        Check("hit rate NO_CACHE", 0.0, mc.switch_hit_rate(mc.Strategy.NO_CACHE, 8)),
        Check("hit rate LOCAL_DRAM", 0.125, mc.switch_hit_rate(mc.Strategy.LOCAL_DRAM, 8)),
        Check("hit rate EMS_POOL", 1.0, mc.switch_hit_rate(mc.Strategy.EMS_POOL, 8, 8)),
        Check("avg switch LOCAL_DRAM (s)", 281, mc.avg_switch_latency(0.125, 5, 320), rel_tol=0.01),
        Check("avg switch EMS_POOL (s)", 5, mc.avg_switch_latency(1.0, 5, 320), rel_tol=0.01),
    ]
    pool = MemoryPool(32, 2 * 10**12, 8 * 10**12, materialize=False)
    mc.register_model(pool, m)
    checks.append(Check("warm load 671 GB (s)", 5, mc.prefetch_and_load(pool, m, 32).duration, rel_tol=0.10))

    mtp = pl.simulate_mtp(pl.MTPConfig(k=1, accept_prob=0.7), 874, 1260, 10_000, seed=0)
    checks += [Check("MTP tokens/iteration", 1.7, mtp.tokens_per_iter, abs_tol=0.02),
               Check("MTP throughput ratio", 1.179, mtp.throughput_ratio, abs_tol=0.001)]

    s600 = pl.StreamSpec(16, 32, (pl.Stage("a", 600.0),))
    s600b = pl.StreamSpec(8, 16, (pl.Stage("b", 600.0, pl.StageKind.COMM),))
    checks.append(Check("overlap of two 600 us streams (us)", 600, pl.decode_layer_latency(s600, s600b)))
    mb = pl.decode_layer_latency(pl.DEFAULT_STREAM0, pl.DEFAULT_STREAM1, True)
    nmb = pl.decode_layer_latency(pl.DEFAULT_STREAM0, pl.DEFAULT_STREAM1, False)
    checks.append(Check("decode microbatch reduction", 0.10, 1 - mb / nmb, abs_tol=0.03))
    P = pl.DEFAULT_PREFILL
    pm = pl.prefill_layer_latency(P.aic, P.aiv, P.sdma, True)
    ps = pl.prefill_layer_latency(P.aic, P.aiv, P.sdma, False)
    checks.append(Check("prefill microbatch reduction", 0.24, 1 - pm / ps, abs_tol=0.04))

    dm = pl.calibrate_decode_model([(96, 49.4), (8, 14.9)], 1.7)
    tpot24, thr24 = dm.predict(24)
    checks += [Check("batch-24 TPOT (ms)", 24.6, tpot24, rel_tol=0.20),
               Check("batch-24 throughput (tokens/s)", 974, thr24, rel_tol=0.20)]

    conn = ph.map_connections(16, 4, 8)
    checks.append(Check("P->D map (dp=5, tp=3)", 11, conn.mapping[(5, 3)]))

    planes = ic.default_planes()
    bench = {("dispatch", 16): 131, ("dispatch", 32): 133, ("dispatch", 64): 141, ("dispatch", 128): 152,
             ("combine", 16): 132, ("combine", 32): 146, ("combine", 64): 150, ("combine", 128): 150}
    for (op, d), expected in bench.items():
        msg = ic.DISPATCH_MSG_BYTES if op == "dispatch" else ic.COMBINE_MSG_BYTES
        est = ic.estimate_ep_exchange(d, 128 * 8 * msg, planes[f"ub_{op}"])
        checks.append(Check(f"{op} EP{d} latency (us)", expected, est.latency, rel_tol=0.15))
    return checks
