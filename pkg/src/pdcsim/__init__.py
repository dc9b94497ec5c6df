"""Deterministic simulator and component library for disaggregated MoE serving.

Prefill, decode and caching run as separate resource pools on one supernode.
"""

from __future__ import annotations

from .context_cache import ContextIndex, lookup_prefix, split_into_blocks, store_blocks
from .expert_parallel import build_placement, plan_buffers, route_tokens, simulate_combine, simulate_dispatch
from .interconnect import PlaneSpec, calibrate_plane, default_planes, estimate_ep_exchange, estimate_transfer
from .mempool import HashRing, MemoryPool
from .model_cache import ModelBlockSet, Strategy, cold_start_latency, prefetch_and_load
from .pipeline import EventLoop, MTPConfig, decode_layer_latency, prefill_layer_latency, simulate_mtp
from .prefill_hybrid import compare_dp_vs_hybrid, map_connections, pack_sequences, plan_mla_stages
from .quantizer import block_clip_search, outlier_suppress, quantize_linear, scale_search
from .scenario import MetricReport, ScenarioConfig, parse_config, run_scenario, sweep, validate_tables
from .workload import ClusterSpec, MoEModelSpec, WorkloadSpec, generate_workload, validate_specs

__version__ = "0.1.0"

__all__ = [
    "ClusterSpec", "ContextIndex", "EventLoop", "HashRing", "MTPConfig", "MemoryPool", "MetricReport",
    "ModelBlockSet", "MoEModelSpec", "PlaneSpec", "ScenarioConfig", "Strategy", "WorkloadSpec",
    "block_clip_search", "build_placement", "calibrate_plane", "cold_start_latency",
    "compare_dp_vs_hybrid", "decode_layer_latency", "default_planes", "estimate_ep_exchange",
    "estimate_transfer", "generate_workload", "lookup_prefix", "map_connections", "outlier_suppress",
    "pack_sequences", "parse_config", "plan_buffers", "plan_mla_stages", "prefetch_and_load",
    "prefill_layer_latency", "quantize_linear", "route_tokens", "run_scenario", "scale_search",
    "simulate_combine", "simulate_dispatch", "simulate_mtp", "split_into_blocks", "store_blocks",
    "sweep", "validate_specs", "validate_tables",
]
