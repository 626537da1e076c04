"""Drive the environment from another process over the JSON bridge.

Run: python demos/03_bridge_client.py
"""
import numpy as np

from gridrl.envbridge import BridgeClient

client = BridgeClient.spawn()
spaces = client.request("init", task="brake")["spaces"]
print("spaces:", spaces)

resp = client.request("reset", scenario={"fault_bus": 3, "fault_duration": 0.5})
obs = np.asarray(resp["observation"])
print(f"first observation: {obs.shape[0]} numbers, last four {np.round(obs[-4:], 4)}")

# Frames are stacked oldest first, so the newest frame is the last N_m numbers.
# Brake while area 1 (machines 1, 2) runs faster than area 2 (machines 4, 5).
n_m = spaces["N_m"]
w = [spaces["observed"].index(f"omega:{g}") for g in (1, 2, 4, 5)]
total, steps, done = 0.0, 0, False
while not done:
    om = obs[-n_m:][w]
    action = int(om[:2].mean() > om[2:].mean())
    resp = client.request("step", action=action)
    obs = np.asarray(resp["observation"])
    total += resp["reward"]
    steps += 1
    done = resp["done"]
print(f"episode over after {steps} steps, return {total:.2f}")

bad = client.request("step", action=0)
print("stepping a finished episode:", bad["error"])
print("unknown op:", client.request("warp")["error"]["code"])
client.close()
