"""Fault-induced delayed voltage recovery and the two load-shedding baselines.

Run: python demos/02_uvls_baselines.py
"""
from gridrl.bench import ControllerSpec, default_env_config, run_one
from gridrl.mdpenv import Scenario

cfg = default_env_config("uvls")

# A 0.08 s fault next to bus 4 at 120% load.  Motor loads behind 104/107/118
# stall while the voltage is depressed and hold it down after clearing.
sc = Scenario(case="ieee39_fidvr", load_level=1.2, fault_bus=4, fault_start=1.0,
              fault_duration=0.08, tag="bus4_L1.2")

specs = [
    ControllerSpec("noop", "noop"),
    ControllerSpec("relay", "relay"),
    ControllerSpec("mpc", "mpc"),
]
print(f"{'controller':10s} {'reward':>9s} {'shed MW (104/107/118)':>26s} {'envelope':>9s} {'ms/step':>8s}")
for spec in specs:
    r = run_one(spec, sc, cfg)
    shed = " ".join(f"{x:6.1f}" for x in r.shed_mw)
    print(f"{spec.name:10s} {r.reward:9.1f} {shed:>26s} {'violated' if r.envelope_violated else 'ok':>9s} "
          f"{1e3 * r.mean_latency:8.2f}")

# The relay waits for its pickup timer before tripping a block.  MPC simulates
# every shedding sequence over a short horizon and picks the best, which costs
# far more time per decision.
