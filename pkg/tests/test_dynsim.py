import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridrl import dynsim
from gridrl.dynsim import (NO_EVENTS, ControlCommand, EventSchedule, FaultEvent, GeneratorState,
                           MotorLoadState, SimulationFault, TrajectoryRecorder, compute_coi,
                           detect_instability, init_dynamic_state, motor_transition, network_solution,
                           shed_load, simulate, step_simulation)
from gridrl.netmodel import (Branch, Bus, CaseError, GridCase, Generator, LoadScale, StallParams,
                             apply_case_modifier, bundled_case, solve_power_flow)

from oracles import dense_ybus, small_signal_frequency

X_LINE = 0.2
XD = 0.1


def toy_pair(h1=5.0, h2=500.0, p=0.5, d=0.0):
    """Lossless two-machine system: gen 1 (PV) -> line -> gen 2 (slack), no loads."""
    case = GridCase(100.0, [Bus(1, "pv", 1.0), Bus(2, "slack", 1.0)], [Branch(1, 2, 0.0, X_LINE)],
                    [Generator(1, h1, d, XD, p), Generator(2, h2, d, XD, -p)])
    pf = solve_power_flow(case)
    assert pf.converged
    return init_dynamic_state(case, pf)


@pytest.fixture(scope="module")
def two_area_state():
    case = bundled_case("two_area")
    return init_dynamic_state(case, solve_power_flow(case))


@pytest.fixture(scope="module")
def ieee39_state():
    case = apply_case_modifier(bundled_case("ieee39_fidvr"), LoadScale(0.8))
    return init_dynamic_state(case, solve_power_flow(case), controlled_buses=(104, 107, 118))


# -- initialisation ------------------------------------------------------------

def test_two_area_equilibrium_persists(two_area_state):
    s = simulate(two_area_state, n_steps=500)
    assert np.max(np.abs(s.omega - two_area_state.omega)) < 1e-6


def test_ieee39_equilibrium_persists(ieee39_state):
    s = simulate(ieee39_state, n_steps=500)
    assert np.max(np.abs(s.omega)) < 1e-6
    assert np.all(s.run[ieee39_state.model.has_motor] == 1.0)


def test_initial_voltages_copy_power_flow():
    case = bundled_case("two_area")
    pf = solve_power_flow(case)
    s = init_dynamic_state(case, pf)
    assert np.array_equal(s.bus_voltages, pf.voltage)
    assert np.all(s.remaining_load_fraction == 1.0)


def test_initial_derivatives_vanish(two_area_state):
    pe, _, _ = network_solution(two_area_state)
    assert np.linalg.norm(two_area_state.p_mech - pe) < 1e-8


def test_refuses_unconverged_power_flow():
    case = GridCase(100.0, [Bus(1, "slack"), Bus(2, "pq", 1.0, 50.0)], [Branch(1, 2, 0.01, 0.1)],
                    [Generator(1, 5, 1, 0.3, 0.0)])
    with pytest.raises(ValueError):
        init_dynamic_state(case, solve_power_flow(case))


# -- stepping ------------------------------------------------------------------

def test_equilibrium_step_is_fixed_point(two_area_state):
    s = step_simulation(two_area_state, dt=0.002)
    assert np.max(np.abs(s.delta - two_area_state.delta)) < 1e-8
    assert np.max(np.abs(s.omega - two_area_state.omega)) < 1e-8
    assert s.time == pytest.approx(0.002)


def test_small_signal_frequency_matches_linearisation():
    s0 = toy_pair()
    e = s0.model.e_prime
    x_tot = 2 * XD + X_LINE
    p_max = e[0] * e[1] / x_tot
    d0 = s0.delta[0] - s0.delta[1]
    f_ref = small_signal_frequency(5.0, 500.0, p_max, d0)
    s = replace(s0, p_mech=s0.p_mech + np.array([0.005, -0.005]))
    dt, n = 0.002, 2500
    rel = []
    for _ in range(n):
        s = step_simulation(s, dt=dt)
        rel.append(s.delta[0] - s.delta[1])
    x = np.array(rel) - np.mean(rel)
    ups = np.flatnonzero((x[:-1] < 0) & (x[1:] >= 0))
    # interpolate the crossing instants
    t = (ups + x[ups] / (x[ups] - x[ups + 1])) * dt
    f = (len(t) - 1) / (t[-1] - t[0])
    assert f == pytest.approx(f_ref, rel=0.02)


def test_long_bus3_fault_loses_synchronism(two_area_state):
    sched = EventSchedule.fault(3, 1.0, 0.7)
    s = two_area_state
    while s.time < 30.0 and not s.synchronism_lost:
        s = simulate(s, sched, n_steps=50)
    assert s.synchronism_lost and s.time < 30.0


def test_rk4_order_step_halving():
    s0 = toy_pair(h1=3.0, h2=4.0, p=0.6)
    s0 = replace(s0, omega=np.array([0.004, -0.003]))
    T = 1.0

    def run(dt):
        return simulate(s0, dt=dt, n_steps=int(round(T / dt)))

    dt = 0.02
    ref = run(dt / 32)
    err = [np.max(np.abs(np.r_[run(h).delta - ref.delta, run(h).omega - ref.omega])) for h in (dt, dt / 2)]
    assert 12 <= err[0] / err[1] <= 20


def test_energy_conserved_on_lossless_pair():
    s = toy_pair(h1=3.0, h2=4.0, p=0.6)
    eq = s
    s = replace(s, omega=np.array([0.003, -0.00225]))
    e = s.model.e_prime
    p_max = e[0] * e[1] / (2 * XD + X_LINE)
    h = s.model.inertia

    def energy(x):
        d12 = x.delta[0] - x.delta[1]
        return dynsim.W_S * float(np.dot(h, x.omega ** 2)) - x.p_mech[0] * d12 - p_max * math.cos(d12)

    e0, e_eq = energy(s), energy(eq)
    worst = 0.0
    for _ in range(100):
        s = simulate(s, n_steps=50)
        worst = max(worst, abs(energy(s) - e0))
    assert worst / abs(e0 - e_eq) < 1e-3


def test_step_is_deterministic(ieee39_state):
    sched = EventSchedule.fault(4, 0.01, 0.08)
    a = simulate(ieee39_state, sched, n_steps=100)
    b = simulate(ieee39_state, sched, n_steps=100)
    for f in ("delta", "omega", "run", "stalled", "tripped", "bus_voltages"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_fault_shunt_collapses_bus_voltage(two_area_state):
    s = two_area_state
    fault = FaultEvent(0.0, "fault_on", 3).shunt
    _, vbus, _ = network_solution(replace(s, active_shunts=frozenset({fault})))
    k = s.model.case.bus_index[3]
    assert abs(vbus[k]) < 1e-3
    # dense oracle: constant-impedance loads, Norton generator sources
    case = s.model.case
    pf_v = s.bus_voltages
    extra = {3: complex(dynsim.G_FAULT, 0)}
    for b in case.buses:
        if b.load_p or b.load_q:
            extra[b.id] = extra.get(b.id, 0) + np.conj(complex(b.load_p, b.load_q)) / abs(pf_v[case.bus_index[b.id]]) ** 2
    I = np.zeros(case.n_bus, dtype=complex)
    for gi, g in enumerate(case.generators):
        y = 1 / (1j * g.xd_prime)
        extra[g.bus] = extra.get(g.bus, 0) + y
        I[case.bus_index[g.bus]] += s.model.e_prime[gi] * np.exp(1j * s.delta[gi]) * y
    V = np.linalg.solve(dense_ybus(case, extra), I)
    np.testing.assert_allclose(vbus, V, atol=1e-9)


def test_singular_network_is_simulation_fault(two_area_state):
    sched = EventSchedule((FaultEvent(0.1, "fault_on", 3, g=float("nan")),
                           FaultEvent(0.2, "fault_off", 3, g=float("nan"))))
    with pytest.raises(SimulationFault) as err:
        simulate(two_area_state, sched, n_steps=100)
    assert err.value.time == pytest.approx(0.1)


def test_schedule_requires_matching_clear():
    with pytest.raises(ValueError):
        EventSchedule((FaultEvent(1.0, "fault_on", 3),))
    assert EventSchedule.fault(3, 1.0, 0.2).clear_time == pytest.approx(1.2)


# -- motors --------------------------------------------------------------------

P = StallParams(v_stall=0.6, t_stall=0.033, t_trip=5.0)


def test_healthy_voltage_leaves_motor_running():
    m = MotorLoadState(params=P)
    for _ in range(1000):
        m = motor_transition(m, 1.0, 0.002)
    assert (m.run_fraction, m.stalled_fraction, m.stall_timer) == (1.0, 0.0, 0.0)


def test_sustained_low_voltage_stalls():
    m = MotorLoadState(params=P)
    n = 0
    while m.run_fraction > 0:
        m = motor_transition(m, 0.55, 0.002)
        n += 1
    assert 0.033 <= n * 0.002 < 0.033 + 0.002
    # the stalled group starts heating in the step it stalls
    assert m.stalled_fraction == pytest.approx(1.0, abs=0.002 / 5.0 + 1e-12)


def test_stalled_motor_trips_after_t_trip():
    m = MotorLoadState(0.0, 1.0, 0.0, params=P)
    for _ in range(2500):
        m = motor_transition(m, 0.5, 0.002)
    assert m.tripped_fraction == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=50)
@given(st.lists(st.floats(0.0, 1.3), min_size=1, max_size=400))
def test_motor_fractions_sum_to_one(vs):
    m = MotorLoadState(params=P)
    for v in vs:
        m = motor_transition(m, v, 0.01)
        assert abs(m.run_fraction + m.stalled_fraction + m.tripped_fraction - 1.0) <= 1e-12
        assert m.stall_timer >= 0


# -- COI / instability ---------------------------------------------------------

def test_coi_examples():
    g = lambda d: GeneratorState(d, 0.0, 1.0, 0.0)
    assert compute_coi([g(0.1), g(0.3)], [1.0, 1.0])[0] == pytest.approx(0.2)
    assert compute_coi([GeneratorState(0.4, 0.01, 1, 0)], [3.0]) == (0.4, 0.01)
    assert compute_coi([g(0.0), g(0.3)], [6.5, 13.0])[0] == pytest.approx(0.2)
    with pytest.raises(ValueError):
        compute_coi([], [])


def test_instability_threshold():
    s = toy_pair(h1=5.0, h2=5.0)
    assert not detect_instability(replace(s, delta=np.array([0.7, 0.7])))
    assert detect_instability(replace(s, delta=np.array([3.3, -3.3])))
    assert not detect_instability(replace(s, delta=np.array([math.pi, -math.pi])))


def test_instability_flag_is_sticky(two_area_state):
    s = replace(two_area_state, synchronism_lost=True)
    assert detect_instability(simulate(s, n_steps=10))


# -- shedding ------------------------------------------------------------------

def test_shed_examples(ieee39_state):
    s, inv = shed_load(ieee39_state, 104, 1)
    assert s.remaining_at(104) == pytest.approx(0.8) and not inv
    s0, inv = shed_load(ieee39_state, 104, 0)
    assert s0 is ieee39_state and not inv
    s5, _ = shed_load(ieee39_state, 104, 5)
    assert s5.remaining_at(104) == 0.0
    s6, inv = shed_load(s5, 104, 1)
    assert s6.remaining_at(104) == 0.0 and inv
    with pytest.raises(CaseError):
        shed_load(ieee39_state, 5, 1)


@settings(max_examples=15)
@given(st.lists(st.tuples(st.sampled_from([104, 107, 118]), st.integers(0, 2)), max_size=12))
def test_remaining_fraction_monotone(ieee39_state, cmds):
    s = ieee39_state
    prev = s.remaining_load_fraction.copy()
    for bus, n in cmds:
        s = simulate(s, NO_EVENTS, ControlCommand(shed={bus: n}), n_steps=5)
        assert np.all(s.remaining_load_fraction <= prev)
        prev = s.remaining_load_fraction.copy()


def test_trajectory_csv(tmp_path, two_area_state):
    rec = TrajectoryRecorder(two_area_state.model)
    s = two_area_state
    for _ in range(3):
        rec.record(s)
        s = simulate(s, n_steps=5)
    rec.write(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].startswith("time,V_1") and len(lines) == 4
