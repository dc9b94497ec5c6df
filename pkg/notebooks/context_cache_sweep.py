# %% [markdown]
# # Context-cache reuse sweep
#
# Runs the default supernode scenario at several reuse rates and prints how
# much prefill work the shared KV cache saves, on the UB plane and on VPC.

# %%
from __future__ import annotations

from pdcsim.scenario import default_config_path, parse_config, set_field, sweep

base = set_field(parse_config(default_config_path()), "workload.num_requests", 64)
rates = [0.0, 0.25, 0.5, 0.75, 0.9]

# %%
ub = sweep(base, "workload.reuse_rate", rates, workers=2)
vpc = sweep(set_field(base, "cache.plane", "vpc"), "workload.reuse_rate", rates, workers=2)

print(f"{'reuse':>6} {'token_reuse':>12} {'ub_ttft':>10} {'vpc_ttft':>10}")
for r, a, b in zip(rates, ub, vpc):
    print(f"{r:6.2f} {a.get('token_reuse'):12.3f} {a.get('ttft_mean'):10.1f} {b.get('ttft_mean'):10.1f}")

# %% [markdown]
# Higher reuse means fewer prefill tokens. The VPC column pays a slower fetch
# for the same hits, so its advantage shrinks as blocks get larger.
