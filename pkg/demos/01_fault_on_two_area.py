"""Power flow, a three-phase fault and the brake on the two-area system.

Run: python demos/01_fault_on_two_area.py
"""
import numpy as np

from gridrl.dynsim import EventSchedule, ControlCommand, coi_deviation, init_dynamic_state, simulate
from gridrl.netmodel import bundled_case, solve_power_flow

case = bundled_case("two_area")
pf = solve_power_flow(case)
print(f"power flow: {pf.iterations} iterations, max mismatch {pf.max_mismatch:.1e}")
for bid, vm, va in zip(pf.bus_ids, pf.voltage_magnitude, np.degrees(pf.voltage_angle)):
    print(f"  bus {bid:2d}  |V| {vm:.4f}  angle {va:8.3f} deg")

# Fault at bus 3 starting at t = 1 s.  Clear it at a range of durations and
# watch the largest machine angle away from the centre of inertia.
state0 = init_dynamic_state(case, pf)
dt, horizon = 0.002, 6.0
n = int(round(horizon / dt))


def max_swing(duration, brake=False):
    sched = EventSchedule.fault(3, 1.0, duration)
    s = simulate(state0, sched, n_steps=int(round(1.0 / dt)))   # pre-fault second
    ctl = ControlCommand(brake={"brake": brake})
    worst = 0.0
    for _ in range(n // 50):
        s = simulate(s, sched, ctl, n_steps=50)
        worst = max(worst, coi_deviation(s))
        if s.synchronism_lost or worst > np.pi:
            return np.inf
    return worst


print("\nfault duration  max COI swing (rad)  with brake held on")
for d in (0.3, 0.5, 0.6, 0.65, 0.7):
    a, b = max_swing(d), max_swing(d, brake=True)
    print(f"  {d:.2f} s        {a:8.3f}            {b:8.3f}")
# 'inf' means the run lost synchronism.  The brake widens the range of
# survivable faults.  The reward also charges for every step the brake is on,
# so the DQN agent has to learn when to switch it on and off.
