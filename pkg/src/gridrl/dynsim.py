"""Fixed-step transient simulation of classical machines, A/C motor loads and events.

Generators use the classical model (constant E' behind x'd) with damping:
``2H dw/dt = Pm - Pe - D w`` and ``d(delta)/dt = w_s w``.  The network is
solved algebraically at every RK4 stage.  Loads are constant impedance, except
at dynamic load buses (motor buses and shed-controlled buses) where the running
A/C motors are constant power and stalled ones a fixed admittance.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels as K
from .netmodel import (CaseError, GridCase, PowerFlowSolution, ShuntDevice, StallParams,
                       build_admittance_matrix)

F_NOMINAL = 60.0
W_S = 2 * np.pi * F_NOMINAL
SIM_DT = 0.002
G_FAULT = 1e7
SHED_BLOCK = 0.20


class SimulationFault(RuntimeError):
    """Network solve failed (singular, diverged or non-finite)."""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} at t={time:.4f} s")
        self.time = time


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorState:
    delta: float
    omega: float
    e_prime: float
    p_mech: float


@dataclass(frozen=True)
class MotorLoadState:
    run_fraction: float = 1.0
    stalled_fraction: float = 0.0
    tripped_fraction: float = 0.0
    stall_timer: float = 0.0
    thermal_accumulator: float = 0.0
    params: StallParams = field(default_factory=StallParams)


@dataclass(frozen=True)
class FaultEvent:
    time: float
    kind: str  # fault_on | fault_off
    bus: int
    g: float = G_FAULT
    b: float = 0.0

    @property
    def shunt(self) -> ShuntDevice:
        return ShuntDevice(f"fault@{self.bus}", self.bus, self.g, self.b, "fault")


@dataclass(frozen=True)
class EventSchedule:
    events: tuple[FaultEvent, ...] = ()

    def __post_init__(self):
        evs = tuple(sorted(self.events, key=lambda e: (e.time, e.kind != "fault_off")))
        object.__setattr__(self, "events", evs)
        open_ = {}
        for e in evs:
            if e.kind == "fault_on":
                open_[e.bus] = open_.get(e.bus, 0) + 1
            elif e.kind == "fault_off":
                if not open_.get(e.bus):
                    raise ValueError(f"fault_off at bus {e.bus} without fault_on")
                open_[e.bus] -= 1
            else:
                raise ValueError(f"bad event kind {e.kind!r}")
        if any(open_.values()):
            raise ValueError("every fault_on needs a matching fault_off")

    @classmethod
    def fault(cls, bus: int, start: float, duration: float, g: float = G_FAULT) -> "EventSchedule":
        if duration <= 0:
            return cls(())
        return cls((FaultEvent(start, "fault_on", bus, g), FaultEvent(start + duration, "fault_off", bus, g)))

    @property
    def clear_time(self) -> float | None:
        offs = [e.time for e in self.events if e.kind == "fault_off"]
        return max(offs) if offs else None


NO_EVENTS = EventSchedule(())


@dataclass(frozen=True)
class ControlCommand:
    """Switch brake shunts (id -> on/off) and shed load blocks (bus -> count)."""

    brake: Mapping[str, bool] = field(default_factory=dict)
    shed: Mapping[int, int] = field(default_factory=dict)


NO_CONTROL = ControlCommand()


# ---------------------------------------------------------------------------
# model: static arrays shared by every state of one case
# ---------------------------------------------------------------------------

class DynamicModel:
    """Precomputed network data for one (case, power flow) pair.

    Instances are treated as immutable; the only mutable member is a cache of
    impedance columns keyed by the active shunt set.
    """

    def __init__(self, case: GridCase, pf: PowerFlowSolution, controlled_buses: Sequence[int] | None = None):
        if not pf.converged:
            raise ValueError("dynamic initialisation needs a converged power flow")
        self.case = case
        idx = case.bus_index
        self.bus_ids = tuple(case.bus_ids)
        n = case.n_bus
        gens = case.generators
        self.inertia = np.array([g.inertia_h for g in gens], dtype=float)
        self.damping = np.array([g.damping_d for g in gens], dtype=float)
        self.xd = np.array([g.xd_prime for g in gens], dtype=float)
        self.areas = np.array([g.area for g in gens], dtype=int)
        self.y_gen = 1.0 / (1j * self.xd)
        gen_buses = sorted({idx[g.bus] for g in gens})
        self.gen_bus_idx = np.array([idx[g.bus] for g in gens])
        self.gen_col = np.array([gen_buses.index(idx[g.bus]) for g in gens], dtype=np.int64)

        motor_buses = [m.bus for m in case.motor_loads]
        if controlled_buses is None:
            controlled_buses = motor_buses
        dyn = list(dict.fromkeys(list(controlled_buses) + motor_buses))
        for b in dyn:
            if b not in idx:
                raise CaseError(f"unknown controlled bus {b}")
            if idx[b] in gen_buses:
                raise CaseError(f"bus {b} cannot be both a generator and a dynamic load bus")
        self.controlled_buses = tuple(controlled_buses)
        self.load_buses = tuple(dyn)
        self.load_idx = np.array([idx[b] for b in dyn], dtype=np.int64)
        self.columns = np.array(gen_buses + list(self.load_idx), dtype=np.int64)
        self.n_gcol = len(gen_buses)

        V = pf.voltage
        self.pf_voltage = V.copy()
        Ynet = build_admittance_matrix(case).toarray()
        base = Ynet.copy()
        nL = len(dyn)
        self.y_static = np.zeros(nL, dtype=complex)
        self.s_motor = np.zeros(nL, dtype=complex)
        self.y_stall = np.zeros(nL, dtype=complex)
        self.stall_params = []
        self.initial_load_p = np.zeros(nL)
        for b in case.buses:
            k = idx[b.id]
            s_load = complex(b.load_p, b.load_q)
            m = case.motor_at(b.id)
            frac = m.fraction_of_bus_load if m else 0.0
            y_static = (1 - frac) * np.conj(s_load) / abs(V[k]) ** 2
            if b.id in dyn:
                j = dyn.index(b.id)
                self.y_static[j] = y_static
                self.initial_load_p[j] = b.load_p
                p = m.stall if m else StallParams()
                self.stall_params.append(p)
                if m:
                    self.s_motor[j] = frac * s_load
                    self.y_stall[j] = frac * b.load_p * complex(p.stall_g, -p.stall_b)
            else:
                base[k, k] += y_static
        for gi, g in enumerate(gens):
            base[idx[g.bus], idx[g.bus]] += self.y_gen[gi]
        self.v_stall = np.array([p.v_stall for p in self.stall_params], dtype=float)
        self.t_stall = np.array([p.t_stall for p in self.stall_params], dtype=float)
        self.t_trip = np.array([p.t_trip for p in self.stall_params], dtype=float)
        self.has_motor = np.array([case.motor_at(b) is not None for b in dyn], dtype=bool)
        self.y_base = base
        self._zcache: dict[frozenset, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

        # generator internal EMFs from the power-flow injections
        s_inj = pf.injections
        n_at_bus = np.bincount(self.gen_bus_idx, minlength=n)
        e_c = np.empty(len(gens), dtype=complex)
        for gi, g in enumerate(gens):
            k = idx[g.bus]
            bus = case.buses[k]
            s_gen = (s_inj[k] + complex(bus.load_p, bus.load_q)) / n_at_bus[k]
            i_gen = np.conj(s_gen / V[k])
            e_c[gi] = V[k] + 1j * self.xd[gi] * i_gen
        self.delta0 = np.angle(e_c)
        self.e_prime = np.abs(e_c)
        if np.any(self.e_prime <= 0):
            raise ValueError("nonpositive internal EMF")

    # -- topology -------------------------------------------------------
    def z_columns(self, active_shunts: frozenset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(Z_full, Z_G, Z_L) for the given set of active ShuntDevices."""
        hit = self._zcache.get(active_shunts)
        if hit is not None:
            return hit
        idx = self.case.bus_index
        Y = self.y_base.copy()
        for s in active_shunts:
            Y[idx[s.bus], idx[s.bus]] += complex(s.g, s.b)
        rhs = np.zeros((len(self.bus_ids), len(self.columns)), dtype=complex)
        rhs[self.columns, np.arange(len(self.columns))] = 1.0
        try:
            Z = np.linalg.solve(Y, rhs)
        except np.linalg.LinAlgError:
            raise SimulationFault("singular network matrix", np.nan) from None
        if not np.all(np.isfinite(Z)):
            raise SimulationFault("singular network matrix", np.nan)
        out = (Z, np.ascontiguousarray(Z[self.gen_bus_idx]), np.ascontiguousarray(Z[self.load_idx]))
        self._zcache[active_shunts] = out
        return out

    def generator_index(self, bus: int) -> int:
        for i, g in enumerate(self.case.generators):
            if g.bus == bus:
                return i
        raise CaseError(f"no generator at bus {bus}")

    def shunt_by_id(self, shunt_id: str) -> ShuntDevice:
        return self.case.shunt(shunt_id)

    def controlled_index(self, bus: int) -> int:
        try:
            return self.load_buses.index(bus)
        except ValueError:
            raise CaseError(f"bus {bus} is not a controlled load bus") from None


@dataclass(frozen=True, eq=False)
class SimulationState:
    """Full dynamic state at one instant (x_t, y_t plus switching status)."""

    model: DynamicModel = field(repr=False)
    time: float
    delta: np.ndarray
    omega: np.ndarray
    p_mech: np.ndarray
    run: np.ndarray
    stalled: np.ndarray
    tripped: np.ndarray
    stall_timer: np.ndarray
    thermal: np.ndarray
    bus_voltages: np.ndarray
    remaining_load_fraction: np.ndarray
    shed_blocks: np.ndarray
    active_shunts: frozenset = frozenset()
    synchronism_lost: bool = False
    load_bus_voltages: np.ndarray = field(default=None, repr=False)

    @property
    def e_prime(self) -> np.ndarray:
        return self.model.e_prime

    @property
    def generator_states(self) -> list[GeneratorState]:
        return [GeneratorState(float(d), float(w), float(e), float(p))
                for d, w, e, p in zip(self.delta, self.omega, self.model.e_prime, self.p_mech)]

    @property
    def motor_states(self) -> list[MotorLoadState]:
        m = self.model
        return [MotorLoadState(float(self.run[j]), float(self.stalled[j]), float(self.tripped[j]),
                               float(self.stall_timer[j]), float(self.thermal[j]), m.stall_params[j])
                for j in range(len(m.load_buses)) if m.has_motor[j]]

    def voltage_at(self, bus: int) -> complex:
        return complex(self.bus_voltages[self.model.case.bus_index[bus]])

    def remaining_at(self, bus: int) -> float:
        return float(self.remaining_load_fraction[self.model.controlled_index(bus)])

    def brake_on(self, shunt_id: str) -> bool:
        return any(s.id == shunt_id for s in self.active_shunts)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def build_dynamic_model(case: GridCase, pf: PowerFlowSolution,
                        controlled_buses: Sequence[int] | None = None) -> DynamicModel:
    return DynamicModel(case, pf, controlled_buses)


def init_dynamic_state(case: GridCase, pf: PowerFlowSolution,
                       controlled_buses: Sequence[int] | None = None,
                       model: DynamicModel | None = None) -> SimulationState:
    """Equilibrium state for a converged power flow.

    Mechanical power is set to the electrical power of the initial network
    solution, so every derivative vanishes to rounding.
    """
    if not pf.converged:
        raise ValueError("power flow did not converge; refusing to initialise")
    m = model or DynamicModel(case, pf, controlled_buses)
    nL = len(m.load_buses)
    run = np.where(m.has_motor, 1.0, 0.0)
    state = SimulationState(
        model=m, time=0.0, delta=m.delta0.copy(), omega=np.zeros(len(m.inertia)),
        p_mech=np.zeros(len(m.inertia)), run=run, stalled=np.zeros(nL), tripped=np.zeros(nL),
        stall_timer=np.zeros(nL), thermal=np.zeros(nL),
        bus_voltages=pf.voltage.copy(), remaining_load_fraction=np.ones(nL),
        shed_blocks=np.zeros(nL, dtype=int), load_bus_voltages=pf.voltage[m.load_idx].copy())
    pe, _, _ = network_solution(state)
    return replace(state, p_mech=pe)


def _motor_arrays(state: SimulationState):
    # buses without motors: run fraction 0 so no constant-power term
    return state.run.copy(), state.stalled.copy(), state.tripped.copy(), state.stall_timer.copy(), state.thermal.copy()


def network_solution(state: SimulationState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Electrical powers, all bus voltages and load-bus voltages at ``state``."""
    m = state.model
    Z, ZG, ZL = m.z_columns(state.active_shunts)
    nL = len(m.load_buses)
    y_lin = np.empty(nL, dtype=complex)
    s_run = np.empty(nL, dtype=complex)
    K._load_terms(state.remaining_load_fraction, state.run, state.stalled, m.y_static, m.y_stall,
                  m.s_motor, y_lin, s_run)
    VL = (state.load_bus_voltages if state.load_bus_voltages is not None
          else state.bus_voltages[m.load_idx]).astype(complex).copy()
    I = np.zeros(len(m.columns), dtype=complex)
    st, _ = K.solve_network(state.delta, m.e_prime, m.y_gen, m.gen_col, m.n_gcol, ZL, y_lin, s_run, VL, I)
    if st != K.STATUS_OK:
        raise SimulationFault("network solve failed", state.time)
    pe = np.empty(len(m.inertia))
    K.electrical_power(state.delta, m.e_prime, m.y_gen, ZG, I, pe)
    return pe, Z @ I, VL


def apply_controls(state: SimulationState, controls: ControlCommand) -> tuple[SimulationState, dict[int, bool]]:
    """Apply brake switching and shedding; returns the new state and invalid flags per bus."""
    invalid = {}
    if controls.brake:
        shunts = set(state.active_shunts)
        for sid, on in controls.brake.items():
            dev = state.model.shunt_by_id(sid)
            if on:
                shunts.add(dev)
            else:
                shunts.discard(dev)
        state = replace(state, active_shunts=frozenset(shunts))
    for bus, blocks in controls.shed.items():
        state, invalid[bus] = shed_load(state, bus, blocks)
    return state, invalid


def shed_load(state: SimulationState, bus: int, blocks: int,
              block_fraction: float = SHED_BLOCK) -> tuple[SimulationState, bool]:
    """Drop ``blocks`` x 20 % of the initial load at a controlled bus.

    Motor and static components scale together.  ``invalid`` is true when
    shedding is requested on a bus that is already fully shed.
    """
    j = state.model.controlled_index(bus)
    if blocks < 0:
        raise ValueError("negative block count")
    if blocks == 0:
        return state, False
    rem = state.remaining_load_fraction
    invalid = rem[j] <= 0.0
    shed = state.shed_blocks.copy()
    shed[j] += blocks
    new = rem.copy()
    new[j] = max(0.0, round(1.0 - block_fraction * shed[j], 12))
    new[j] = min(new[j], rem[j])
    return replace(state, remaining_load_fraction=new, shed_blocks=shed), bool(invalid)


def _event_step(t: float, dt: float) -> int:
    return int(np.floor(t / dt + 0.5))


def simulate(state: SimulationState, schedule: EventSchedule = NO_EVENTS,
             controls: ControlCommand = NO_CONTROL, dt: float = SIM_DT, n_steps: int = 1) -> SimulationState:
    """Advance ``n_steps`` steps of size ``dt``.

    Controls are applied at the start; scheduled events snap to the nearest
    step boundary and take effect for the step that begins there.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    state, _ = apply_controls(state, controls)
    m = state.model
    k0 = _event_step(state.time, dt)
    k_end = k0 + n_steps
    pending = {}
    for ev in schedule.events:
        k = _event_step(ev.time, dt)
        if k0 <= k < k_end:
            pending.setdefault(k, []).append(ev)

    delta = state.delta.copy(); omega = state.omega.copy()
    run, stalled, tripped, timer, thermal = _motor_arrays(state)
    VL = (state.load_bus_voltages if state.load_bus_voltages is not None
          else state.bus_voltages[m.load_idx]).astype(complex).copy()
    I = np.zeros(len(m.columns), dtype=complex)
    shunts = set(state.active_shunts)
    lost = state.synchronism_lost
    k = k0
    Z = None
    boundaries = sorted(pending) + [k_end]
    for kb in boundaries:
        if kb > k:
            try:
                Z, ZG, ZL = m.z_columns(frozenset(shunts))
            except SimulationFault:
                raise SimulationFault("singular network matrix", k * dt) from None
            st, done, lost = K.integrate(
                kb - k, dt, W_S, delta, omega, m.e_prime, state.p_mech, m.inertia, m.damping, m.y_gen,
                m.gen_col, m.n_gcol, ZG, ZL, m.y_static, m.y_stall, m.s_motor,
                state.remaining_load_fraction, run, stalled, tripped, timer, thermal,
                m.v_stall, m.t_stall, m.t_trip, VL, I, lost)
            if st != K.STATUS_OK:
                raise SimulationFault("network solve failed" if st == K.STATUS_DIVERGED
                                      else "non-finite state", (k + done) * dt)
            k = kb
        for ev in pending.get(kb, ()):
            if ev.kind == "fault_on":
                shunts.add(ev.shunt)
            else:
                shunts.discard(ev.shunt)
    if Z is None:
        Z = m.z_columns(frozenset(shunts))[0]
        vbus = state.bus_voltages.copy()
    else:
        vbus = Z @ I
    return replace(state, time=k_end * dt, delta=delta, omega=omega, run=run, stalled=stalled,
                   tripped=tripped, stall_timer=timer, thermal=thermal, bus_voltages=vbus,
                   active_shunts=frozenset(shunts), synchronism_lost=bool(lost), load_bus_voltages=VL)


def step_simulation(state: SimulationState, schedule: EventSchedule = NO_EVENTS,
                    controls: ControlCommand = NO_CONTROL, dt: float = SIM_DT) -> SimulationState:
    """One explicit RK4 step (see :func:`simulate`)."""
    return simulate(state, schedule, controls, dt, 1)


def motor_transition(motor: MotorLoadState, v: float, dt: float) -> MotorLoadState:
    """Stall/trip bookkeeping for one A/C motor group over ``dt`` at voltage ``v``."""
    if v < 0:
        raise ValueError("voltage magnitude must be nonnegative")
    p = motor.params
    run, stalled, tripped, timer, thermal = K.motor_update(
        motor.run_fraction, motor.stalled_fraction, motor.tripped_fraction, motor.stall_timer,
        motor.thermal_accumulator, v, dt, p.v_stall, p.t_stall, p.t_trip)
    return replace(motor, run_fraction=run, stalled_fraction=stalled, tripped_fraction=tripped,
                   stall_timer=timer, thermal_accumulator=thermal)


def coi(delta: np.ndarray, omega: np.ndarray, inertia: np.ndarray) -> tuple[float, float]:
    inertia = np.asarray(inertia, dtype=float)
    if inertia.size == 0:
        raise ValueError("centre of inertia of an empty machine set")
    w = inertia / inertia.sum()
    return float(np.dot(w, delta)), float(np.dot(w, omega))


def compute_coi(gen_states: Sequence[GeneratorState], inertias: Sequence[float]) -> tuple[float, float]:
    """Inertia-weighted mean angle and speed."""
    if len(gen_states) == 0:
        raise ValueError("centre of inertia of an empty machine set")
    if len(gen_states) != len(inertias):
        raise ValueError("one inertia per generator required")
    return coi(np.array([g.delta for g in gen_states]), np.array([g.omega for g in gen_states]), inertias)


def coi_deviation(state: SimulationState) -> float:
    """Largest |delta_i - delta_COI| in radians."""
    d, _ = coi(state.delta, state.omega, state.model.inertia)
    return float(np.max(np.abs(state.delta - d)))


def detect_instability(state: SimulationState) -> bool:
    """True once any machine strays more than pi rad from the centre of inertia."""
    return bool(state.synchronism_lost or coi_deviation(state) > np.pi)


def group_pseudo_state(state: SimulationState) -> tuple[float, float]:
    """Angle and speed of area 1 relative to area 2, each taken at its own COI."""
    m = state.model
    a = m.areas == m.areas.min()
    b = ~a
    if not b.any():
        return coi(state.delta, state.omega, m.inertia)
    da, wa = coi(state.delta[a], state.omega[a], m.inertia[a])
    db, wb = coi(state.delta[b], state.omega[b], m.inertia[b])
    return da - db, wa - wb


# ---------------------------------------------------------------------------
# trajectory dumps
# ---------------------------------------------------------------------------

class TrajectoryRecorder:
    """Collects rows for the trajectory CSV (time, |V|, delta, omega, remaining fraction)."""

    def __init__(self, model: DynamicModel):
        self.model = model
        self.rows: list[list[float]] = []

    @property
    def header(self) -> list[str]:
        m = self.model
        return (["time"] + [f"V_{b}" for b in m.bus_ids]
                + [f"delta_{i + 1}" for i in range(len(m.inertia))]
                + [f"omega_{i + 1}" for i in range(len(m.inertia))]
                + [f"remaining_{b}" for b in m.load_buses])

    def record(self, state: SimulationState) -> None:
        self.rows.append([state.time, *np.abs(state.bus_voltages), *state.delta, *state.omega,
                          *state.remaining_load_fraction])

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            w.writerows(self.rows)
