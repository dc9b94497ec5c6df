# %% [markdown]
# # EP dispatch/combine: calibrate from two endpoints
#
# Fit a plane to the EP8 and EP256 benchmark latencies only, then see how
# well it predicts the intermediate degrees it never saw.

# %%
from __future__ import annotations

from pdcsim import interconnect as ic

# Benchmark latencies in microseconds, 128 tokens per rank, top-8.
bench = {"dispatch": {8: 116, 16: 131, 32: 133, 64: 141, 128: 152, 256: 152},
         "combine": {8: 118, 16: 132, 32: 146, 64: 150, 128: 150, 256: 149}}
msg = {"dispatch": ic.DISPATCH_MSG_BYTES, "combine": ic.COMBINE_MSG_BYTES}

# %%
for op, table in bench.items():
    payload = ic.EP_BENCH_TOKENS * ic.EP_BENCH_TOPK * msg[op]
    ends = [ic.Measurement(d, table[d], 0.0, payload) for d in (8, 256)]
    plane = ic.calibrate_plane(ends)
    print(f"{op}: link {plane.link_bandwidth:.1f} GB/s, sync round {plane.sync_round_latency:.2f} us")
    for d, measured in table.items():
        pred = ic.estimate_ep_exchange(d, payload, plane).latency
        print(f"  EP{d:<4} measured {measured:4d}  predicted {pred:7.1f}  error {pred / measured - 1:+.1%}")

# %% [markdown]
# Interior errors stay within about ten percent; the fit is monotone in the
# EP degree because each doubling adds one synchronisation round.
