"""Command-line front end.

Exit codes: 0 success, 1 validation failure, 2 configuration or input error.
Log verbosity comes from ``PDCSIM_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import interconnect as ic
from . import quantizer as qz
from .prefill_hybrid import map_connections
from .scenario import (ConfigError, ep_sweep, parse_config, reports_to_csv, run_scenario, sweep,
                       validate_tables)

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG = 0, 1, 2
LOG_ENV = "PDCSIM_LOG_LEVEL"
log = logging.getLogger("pdcsim")

TABLE2_PREFIXES = ("cold start", "DRAM overhead", "hit rate", "avg switch", "warm load")


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _scalar(text: str):
    """Sweep values are YAML scalars so ``0.5``, ``96`` and ``vpc`` all work."""
    return yaml.safe_load(text)


def cmd_run(args) -> int:
    rep = run_scenario(parse_config(args.config))
    _emit(rep.to_json(), args.output)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    values = [_scalar(v) for v in args.values]
    reports = sweep(cfg, args.axis, values, workers=args.workers)
    _emit(reports_to_csv(reports, args.axis, values), args.output)
    return EXIT_OK


def cmd_ep_sweep(args) -> int:
    rows = ep_sweep(args.degrees, args.tokens, args.top_k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["schema_version", "operator", "ep_degree", "latency_us", "bandwidth_gbps"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({"schema_version": 1, **r})
    _emit(buf.getvalue(), args.output)
    return EXIT_OK


def cmd_pd_map(args) -> int:
    conn = map_connections(args.prefill_tp, args.decode_tp, args.decode_dp)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["decode_dp", "decode_tp", "prefill_rank"])
    for (dp, tp), p in sorted(conn.mapping.items()):
        w.writerow([dp, tp, p])
    if not args.output:
        w.writerow([])
        w.writerow(["prefill_rank", "decode_ranks_served"])
        for p, n in enumerate(conn.load()):
            w.writerow([p, n])
    _emit(buf.getvalue(), args.output)
    return EXIT_OK


def read_matrix(path: str | Path) -> np.ndarray:
    """Matrix file: first line ``rows,cols``, then row-major values (any line breaks)."""
    text = Path(path).read_text().split("\n", 1)
    try:
        rows, cols = (int(x) for x in text[0].replace(" ", "").split(","))
        body = text[1] if len(text) > 1 else ""
        vals = [float(x) for x in body.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"{path}: malformed matrix file ({exc})") from None
    if rows < 0 or cols < 0 or len(vals) != rows * cols:
        raise ConfigError(f"{path}: header says {rows}x{cols} but {len(vals)} values follow")
    return np.array(vals, dtype=np.float64).reshape(rows, cols)


def cmd_quantize(args) -> int:
    a = read_matrix(args.matrix)
    fn = {"token": qz.quantize_per_token, "channel": qz.quantize_per_channel,
          "block": qz.quantize_per_block}[args.granularity]
    q = fn(a)
    err = np.abs(q.dequantize() - a)
    if q.granularity is qz.Granularity.PER_TOKEN:
        half = np.broadcast_to(q.scales[:, None] / 2, a.shape)
    elif q.granularity is qz.Granularity.PER_CHANNEL:
        half = np.broadcast_to(q.scales[None, :] / 2, a.shape)
    else:
        half = np.full(a.shape, q.scales[0] / 2)
    fro = float(np.linalg.norm(a))
    doc = {"schema_version": 1, "granularity": q.granularity.value, "shape": list(a.shape),
           "codes": q.codes.tolist(), "scales": q.scales.tolist(),
           "error": {"max_abs": float(err.max()) if err.size else 0.0,
                     "rel_frobenius": float(np.linalg.norm(err) / fro) if fro > 0 else 0.0,
                     "within_half_step": bool(np.all(err <= half))}}
    _emit(json.dumps(doc, indent=2), args.output)
    return EXIT_OK


def cmd_validate(args) -> int:
    checks = validate_tables()
    if args.target == "table2":
        checks = [c for c in checks if c.name.startswith(TABLE2_PREFIXES)]
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_VALIDATION if failed else EXIT_OK


def cmd_calibrate(args) -> int:
    with open(args.csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        ms = [ic.Measurement(int(r["ep_degree"]), float(r["latency_us"]), float(r["bandwidth_gbps"]),
                             float(r["payload_bytes"]) if r.get("payload_bytes") else None)
              for r in rows]
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{args.csv}: need columns ep_degree, latency_us, bandwidth_gbps "
                          f"[, payload_bytes] ({exc})") from None
    template = ic.default_planes()[args.template]
    plane = ic.calibrate_plane(ms, template)
    predicted = {m.ep_degree: ic.estimate_ep_exchange(m.ep_degree, m.nbytes, plane).latency for m in ms}
    doc = {"schema_version": 1, "template": args.template,
           "link_bandwidth_gbps": plane.link_bandwidth, "sync_round_latency_us": plane.sync_round_latency,
           "fitted_latency_us": {str(k): v for k, v in predicted.items()}}
    _emit(json.dumps(doc, indent=2), args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdcsim", description="Supernode LLM serving simulator")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run one scenario and print a JSON report")
    s.add_argument("config")
    s.add_argument("-o", "--output")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="sweep one config field, CSV output")
    s.add_argument("config")
    s.add_argument("--axis", required=True, help="dotted field, e.g. workload.reuse_rate")
    s.add_argument("--values", nargs="*", default=[])
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("-o", "--output")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("ep-sweep", help="dispatch/combine latency per EP degree, CSV output")
    s.add_argument("--degrees", type=int, nargs="+", default=[8, 16, 32, 64, 128, 256])
    s.add_argument("--tokens", type=int, default=ic.EP_BENCH_TOKENS)
    s.add_argument("--top-k", type=int, default=ic.EP_BENCH_TOPK)
    s.add_argument("-o", "--output")
    s.set_defaults(fn=cmd_ep_sweep)

    plan = sub.add_parser("plan", help="deployment planning").add_subparsers(dest="what", required=True)
    s = plan.add_parser("pd-map", help="prefill to decode KV connection table")
    s.add_argument("--prefill-tp", type=int, default=16)
    s.add_argument("--decode-tp", type=int, default=4)
    s.add_argument("--decode-dp", type=int, default=8)
    s.add_argument("-o", "--output", help="write the mapping table as CSV")
    s.set_defaults(fn=cmd_pd_map)

    s = sub.add_parser("quantize", help="INT8-quantize a matrix file, JSON output")
    s.add_argument("matrix")
    s.add_argument("--granularity", choices=["token", "channel", "block"], default="channel")
    s.add_argument("-o", "--output")
    s.set_defaults(fn=cmd_quantize)

    s = sub.add_parser("validate", help="closed-form table checks")
    s.add_argument("target", choices=["tables", "table2"])
    s.set_defaults(fn=cmd_validate)

    cal = sub.add_parser("calibrate", help="fit parameters to measurements").add_subparsers(
        dest="what", required=True)
    s = cal.add_parser("plane", help="fit a plane to an EP benchmark CSV")
    s.add_argument("csv")
    s.add_argument("--template", default="ub_dispatch", choices=sorted(ic.default_planes()))
    s.add_argument("-o", "--output")
    s.set_defaults(fn=cmd_calibrate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:  # ConfigError is a ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
