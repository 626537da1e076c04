"""Episodic MDP wrapper around the transient simulator.

Two tasks share one environment class:

``brake``
    one resistive brake shunt, actions {0: off, 1: on}; observations are
    COI-referenced rotor angles and speeds of the generators.
``uvls``
    under-voltage load shedding at n controlled buses, action ``a`` in
    ``[0, 2**n)`` whose bit j sheds one 20 % block at controlled bus j;
    observations are bus-voltage magnitudes and remaining load fractions.

Observed quantities are strings ``kind:bus`` with kind one of ``delta``,
``omega`` (generator at that bus), ``v`` (voltage magnitude) and ``frac``
(remaining load fraction at a controlled bus).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import dynsim
from .dynsim import (NO_EVENTS, ControlCommand, EventSchedule, SimulationFault, SimulationState,
                     init_dynamic_state)
from .netmodel import (DATA_DIR, CaseError, GridCase, LoadDelta, LoadScale, MotorParamScale,
                       TieFlowDelta, apply_case_modifier, bundled_case, load_case, solve_power_flow)

TERMINAL_REWARD = -1000.0
_EPS_T = 1e-9   # tolerance for window boundaries on accumulated float time


class ContractViolation(RuntimeError):
    """Caller broke an operation precondition (bad action, stepping a finished episode)."""


class ConfigError(ValueError):
    pass


class ScenarioRejected(RuntimeError):
    """The scenario's operating point cannot be initialised (e.g. power flow diverged)."""


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """One disturbance on one operating point."""

    case: str = "two_area"
    load_level: float = 1.0
    load_delta_mw: float = 0.0
    tie_flow_mw: float = 0.0
    motor_param_scale: float = 1.0
    fault_bus: int | None = None
    fault_start: float = 1.0
    fault_duration: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    tag: str = ""

    def __post_init__(self):
        if self.fault_duration < 0:
            raise ValueError("fault duration must be nonnegative")
        if self.load_level <= 0:
            raise ValueError("load level must be positive")

    @property
    def has_fault(self) -> bool:
        return self.fault_bus is not None and self.fault_duration > 0

    @property
    def clear_time(self) -> float | None:
        return self.fault_start + self.fault_duration if self.has_fault else None

    def schedule(self) -> EventSchedule:
        if not self.has_fault:
            return NO_EVENTS
        return EventSchedule.fault(self.fault_bus, self.fault_start, self.fault_duration)

    def operating_point(self) -> tuple:
        return (self.case, self.load_level, self.load_delta_mw, self.tie_flow_mw, self.motor_param_scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Scenario":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown scenario keys {sorted(bad)}")
        return cls(**d)


def resolve_case(ref: str) -> GridCase:
    p = Path(ref)
    if p.suffix == ".case" or p.exists():
        return load_case(p)
    return bundled_case(ref)


def build_case(scenario: Scenario) -> GridCase:
    case = resolve_case(scenario.case)
    if scenario.load_level != 1.0:
        case = apply_case_modifier(case, LoadScale(scenario.load_level))
    if scenario.load_delta_mw:
        case = apply_case_modifier(case, LoadDelta(scenario.load_delta_mw))
    if scenario.tie_flow_mw:
        case = apply_case_modifier(case, TieFlowDelta(scenario.tie_flow_mw))
    if scenario.motor_param_scale != 1.0:
        case = apply_case_modifier(case, MotorParamScale(scenario.motor_param_scale))
    if scenario.fault_bus is not None and scenario.fault_bus not in case.bus_index:
        raise CaseError(f"fault bus {scenario.fault_bus} not in case")
    return case


@lru_cache(maxsize=64)
def _initial_state(op: tuple, controlled: tuple) -> SimulationState:
    case = build_case(Scenario(*op))
    pf = solve_power_flow(case)
    if not pf.converged:
        raise ScenarioRejected(f"power flow did not converge for {op} "
                               f"(mismatch {pf.max_mismatch:.3g} after {pf.iterations} iterations)")
    return init_dynamic_state(case, pf, controlled_buses=controlled or None)


def initial_state(scenario: Scenario, controlled_buses: Sequence[int] = ()) -> SimulationState:
    """Equilibrium state of the scenario's operating point (cached; states are immutable)."""
    return _initial_state(scenario.operating_point(), tuple(controlled_buses))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvConfig:
    task: str
    observed: tuple[str, ...]
    n_r: int
    action_catalog: tuple            # brake: shunt ids; uvls: controlled bus ids
    case: str = "two_area"
    agent_dt: float = 0.1
    sim_dt: float = dynsim.SIM_DT
    episode_limit: float = 10.0
    c: float = 2.0
    c1: float = 260.0
    c2: float = 150.0
    c3: float = 3.0
    monitored: tuple[int, ...] = ()  # uvls reward voltages
    envelope_thresholds: tuple[float, ...] = (0.7, 0.8, 0.9, 0.95)
    envelope_times: tuple[float, ...] = (0.33, 0.5, 1.5)
    terminal_delay: float = 4.0
    terminal_voltage: float = 0.95
    noise_sigma: float = 0.0
    obs_scale: Mapping[str, float] = field(default_factory=lambda: {"omega": 100.0})

    def __post_init__(self):
        for name in ("observed", "action_catalog", "monitored", "envelope_thresholds", "envelope_times"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "obs_scale", dict(self.obs_scale))
        self.validate()

    def validate(self) -> None:
        if self.task not in ("brake", "uvls"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.n_r < 1:
            raise ConfigError("N_r must be at least 1")
        ratio = self.agent_dt / self.sim_dt
        if self.sim_dt <= 0 or ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("agent_dt must be a positive integer multiple of sim_dt")
        for q in self.observed:
            _parse_quantity(q)
        if not self.action_catalog:
            raise ConfigError("empty action catalog")
        if self.task == "brake" and len(self.action_catalog) != 1:
            raise ConfigError("brake task controls exactly one shunt")
        if min(self.c, self.c1, self.c2, self.c3) < 0:
            raise ConfigError("reward coefficients must be nonnegative")
        if len(self.envelope_thresholds) != len(self.envelope_times) + 1:
            raise ConfigError("envelope needs one more threshold than window boundary")
        if list(self.envelope_times) != sorted(self.envelope_times):
            raise ConfigError("envelope times must be increasing")

    @property
    def n_m(self) -> int:
        return len(self.observed)

    @property
    def n_i(self) -> int:
        return self.n_m * self.n_r

    @property
    def n_o(self) -> int:
        return 2 if self.task == "brake" else 2 ** len(self.action_catalog)

    @property
    def steps_per_action(self) -> int:
        return int(round(self.agent_dt / self.sim_dt))

    @property
    def controlled_buses(self) -> tuple[int, ...]:
        return tuple(int(b) for b in self.action_catalog) if self.task == "uvls" else ()

    def scale_vector(self) -> np.ndarray:
        """Per-channel input scaling for learners, tiled over the stack."""
        s = np.array([self.obs_scale.get(_parse_quantity(q)[0], 1.0) for q in self.observed])
        return np.tile(s, self.n_r)


def _parse_quantity(q: str) -> tuple[str, int]:
    try:
        kind, bus = q.split(":")
        bus = int(bus)
    except ValueError:
        raise ConfigError(f"bad observed quantity {q!r}") from None
    if kind not in ("delta", "omega", "v", "frac"):
        raise ConfigError(f"bad observed quantity kind {kind!r}")
    return kind, bus


def brake_config(**overrides) -> EnvConfig:
    gens = (1, 2, 4, 5)
    base = dict(task="brake", case="two_area",
                observed=tuple(f"delta:{g}" for g in gens) + tuple(f"omega:{g}" for g in gens),
                n_r=4, action_catalog=("brake",), episode_limit=10.0, c=2.0)
    base.update(overrides)
    return EnvConfig(**base)


def uvls_config(**overrides) -> EnvConfig:
    base = dict(task="uvls", case="ieee39_fidvr",
                observed=("v:4", "v:7", "v:8", "v:18", "v:104", "v:107", "v:118",
                          "frac:104", "frac:107", "frac:118"),
                n_r=10, action_catalog=(104, 107, 118), monitored=(4, 7, 18),
                episode_limit=8.0, c1=260.0, c2=150.0, c3=3.0)
    base.update(overrides)
    return EnvConfig(**base)


# -- config files -----------------------------------------------------------

SIM_KEYS = {"case", "sim_dt", "agent_dt", "episode_limit", "scenarios", "relay", "mpc"}
TRAIN_KEYS = {"task", "n_r", "observed", "action_catalog", "reward", "monitored", "envelope",
              "noise_sigma", "obs_scale", "dqn"}
REWARD_KEYS = {"c", "c1", "c2", "c3"}
ENVELOPE_KEYS = {"thresholds", "times", "terminal_delay", "terminal_voltage"}
SAMPLER_KEYS = {"fault_buses", "fault_start", "durations", "duration_range", "load_levels",
                "load_deltas_mw", "tie_flows_mw", "motor_param_scales", "no_fault_probability"}


def _read_json(src) -> dict:
    if isinstance(src, Mapping):
        return dict(src)
    return json.loads(Path(src).read_text())


def _reject_unknown(d: Mapping, allowed: set, where: str) -> None:
    bad = set(d) - allowed
    if bad:
        raise ConfigError(f"unknown keys in {where}: {sorted(bad)}")


def load_configs(sim_config, train_config) -> tuple[EnvConfig, "ScenarioSampler", dict]:
    """Read the simulation and training configuration files.

    Returns the environment config, the training scenario sampler and the raw
    DQN hyperparameter mapping (validated by :mod:`gridrl.agents`).
    """
    sim = _read_json(sim_config)
    tr = _read_json(train_config)
    _reject_unknown(sim, SIM_KEYS, "simulation config")
    _reject_unknown(tr, TRAIN_KEYS, "training config")
    if "task" not in tr:
        raise ConfigError("training config needs 'task'")
    kw: dict[str, Any] = {}
    for k in ("case", "sim_dt", "agent_dt", "episode_limit"):
        if k in sim:
            kw[k] = sim[k]
    for k in ("n_r", "observed", "action_catalog", "monitored", "noise_sigma", "obs_scale"):
        if k in tr:
            kw[k] = tr[k]
    rew = tr.get("reward", {})
    _reject_unknown(rew, REWARD_KEYS, "reward")
    kw.update(rew)
    env = tr.get("envelope", {})
    _reject_unknown(env, ENVELOPE_KEYS, "envelope")
    for k in ("thresholds", "times"):
        if k in env:
            kw[f"envelope_{k}"] = env[k]
    for k in ("terminal_delay", "terminal_voltage"):
        if k in env:
            kw[k] = env[k]
    if tr["task"] == "brake":
        cfg = brake_config(**kw)
    elif tr["task"] == "uvls":
        cfg = uvls_config(**kw)
    else:
        raise ConfigError(f"unknown task {tr['task']!r}")
    samp = sim.get("scenarios", {})
    _reject_unknown(samp, SAMPLER_KEYS, "scenarios")
    sampler = ScenarioSampler(case=cfg.case, **{k: (tuple(v) if isinstance(v, list) else v)
                                                for k, v in samp.items()})
    return cfg, sampler, dict(tr.get("dqn", {}))


def baseline_sections(sim_config) -> dict[str, dict]:
    """The ``relay`` and ``mpc`` sections of a simulation config (empty when absent)."""
    sim = _read_json(sim_config)
    _reject_unknown(sim, SIM_KEYS, "simulation config")
    out = {}
    for k in ("relay", "mpc"):
        sec = sim.get(k, {})
        if not isinstance(sec, Mapping):
            raise ConfigError(f"'{k}' section must be an object")
        out[k] = dict(sec)
    return out


def bundled_config_paths(task: str) -> tuple[Path, Path]:
    d = DATA_DIR / "configs"
    return d / f"{task}_sim.json", d / f"{task}_train.json"


@dataclass(frozen=True)
class ScenarioSampler:
    """Training distribution: uniform over the listed factors."""

    case: str = "two_area"
    fault_buses: tuple[int, ...] = (3,)
    fault_start: float = 1.0
    durations: tuple[float, ...] = ()
    duration_range: tuple[float, float] = (0.581, 0.585)
    load_levels: tuple[float, ...] = (1.0,)
    load_deltas_mw: tuple[float, ...] = (0.0,)
    tie_flows_mw: tuple[float, ...] = (0.0,)
    motor_param_scales: tuple[float, ...] = (1.0,)
    no_fault_probability: float = 0.0

    def sample(self, rng: np.random.Generator, noise_sigma: float = 0.0) -> Scenario:
        pick = lambda xs: xs[int(rng.integers(len(xs)))]
        bus = int(pick(self.fault_buses))
        if self.durations:
            dur = float(pick(self.durations))
        else:
            dur = float(rng.uniform(*self.duration_range))
        if rng.random() < self.no_fault_probability:
            dur = 0.0
        return Scenario(case=self.case, load_level=float(pick(self.load_levels)),
                        load_delta_mw=float(pick(self.load_deltas_mw)),
                        tie_flow_mw=float(pick(self.tie_flows_mw)),
                        motor_param_scale=float(pick(self.motor_param_scales)),
                        fault_bus=bus, fault_start=self.fault_start, fault_duration=dur,
                        noise_sigma=noise_sigma, seed=int(rng.integers(2**31)))


# ---------------------------------------------------------------------------
# pure pieces: actions, rewards, stacking, noise
# ---------------------------------------------------------------------------

def decode_action(action: int, n_bits: int) -> tuple[int, ...]:
    if not 0 <= action < 2 ** n_bits:
        raise ContractViolation(f"action {action} outside [0, {2 ** n_bits})")
    return tuple((action >> j) & 1 for j in range(n_bits))


def encode_action(bits: Sequence[int]) -> int:
    return sum(int(b) << j for j, b in enumerate(bits))


def brake_reward(omega_avg: float, delta_avg: float, u: int, c: float) -> float:
    if u not in (0, 1):
        raise ValueError("brake action must be 0 or 1")
    if abs(delta_avg) <= math.pi:
        return -abs(omega_avg) - c * u
    return TERMINAL_REWARD


def envelope_threshold(elapsed: float, thresholds=(0.7, 0.8, 0.9, 0.95), times=(0.33, 0.5, 1.5)) -> float | None:
    """Minimum admissible voltage ``elapsed`` seconds after fault clearing (None before)."""
    if elapsed <= _EPS_T:
        return None
    for th, tb in zip(thresholds, times):
        if elapsed <= tb + _EPS_T:
            return th
    return thresholds[-1]


def voltage_deviations(voltages, elapsed: float, thresholds=(0.7, 0.8, 0.9, 0.95),
                       times=(0.33, 0.5, 1.5)) -> np.ndarray:
    """ΔV_i = min(V_i - threshold, 0); zeros before clearing."""
    v = np.asarray(voltages, dtype=float)
    th = envelope_threshold(elapsed, thresholds, times)
    if th is None:
        return np.zeros_like(v)
    return np.minimum(v - th, 0.0)


def is_terminal_voltage(voltages, t: float, t_pf: float | None, delay: float = 4.0,
                        v_min: float = 0.95) -> bool:
    if t_pf is None:
        return False
    return t - t_pf > delay + _EPS_T and bool(np.any(np.asarray(voltages) < v_min))


def uvls_reward(monitored_voltages, shed_this_step: float, invalid_flag, t: float,
                t_pf: float | None, coeffs: Mapping[str, float] | Sequence[float] = (260.0, 150.0, 3.0),
                thresholds=(0.7, 0.8, 0.9, 0.95), times=(0.33, 0.5, 1.5),
                terminal_delay: float = 4.0, terminal_voltage: float = 0.95) -> float:
    if isinstance(coeffs, Mapping):
        c1, c2, c3 = coeffs["c1"], coeffs["c2"], coeffs["c3"]
    else:
        c1, c2, c3 = coeffs
    if is_terminal_voltage(monitored_voltages, t, t_pf, terminal_delay, terminal_voltage):
        return TERMINAL_REWARD
    dv = 0.0
    if t_pf is not None:
        dv = float(voltage_deviations(monitored_voltages, t - t_pf, thresholds, times).sum())
    return c1 * dv - c2 * float(shed_this_step) - c3 * float(bool(invalid_flag))


@dataclass(frozen=True, eq=False)
class ObservationStack:
    frames: np.ndarray   # (N_r, N_m), oldest first

    @classmethod
    def zeros(cls, n_r: int, n_m: int) -> "ObservationStack":
        return cls(np.zeros((n_r, n_m)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape

    def as_vector(self) -> np.ndarray:
        return self.frames.reshape(-1).copy()

    def __eq__(self, other):
        return isinstance(other, ObservationStack) and np.array_equal(self.frames, other.frames)


def push_frame(stack: ObservationStack, frame) -> ObservationStack:
    f = np.asarray(frame, dtype=float)
    if f.shape != (stack.frames.shape[1],):
        raise ContractViolation(f"frame length {f.shape} != N_m {stack.frames.shape[1]}")
    return ObservationStack(np.vstack([stack.frames[1:], f[None, :]]))


def add_observation_noise(frame, sigma_fraction: float, rng: np.random.Generator) -> np.ndarray:
    if sigma_fraction < 0:
        raise ValueError("noise sigma must be nonnegative")
    f = np.asarray(frame, dtype=float)
    if sigma_fraction == 0:
        return f.copy()
    return f * (1.0 + rng.normal(0.0, sigma_fraction, size=f.shape))


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------

def brake_signals(state: SimulationState) -> tuple[float, float]:
    """(ω̄, δ̄): inter-area COI speed difference and the largest COI angle deviation."""
    _, w = dynsim.group_pseudo_state(state)
    return w, dynsim.coi_deviation(state)


class GridEnv:
    """One episode at a time; not thread-safe while stepping."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state: SimulationState | None = None
        self.scenario: Scenario | None = None
        self.stack: ObservationStack | None = None
        self.done = True
        self.steps = 0
        self._rng = np.random.default_rng(0)
        self._schedule = NO_EVENTS
        self._sigma = 0.0
        self._scale = config.scale_vector()

    # -- observation --------------------------------------------------------
    def measure(self, state: SimulationState | None = None) -> np.ndarray:
        s = state or self.state
        m = s.model
        dev = None
        out = np.empty(self.config.n_m)
        for i, q in enumerate(self.config.observed):
            kind, bus = _parse_quantity(q)
            if kind == "delta":
                if dev is None:
                    d_coi, _ = dynsim.coi(s.delta, s.omega, m.inertia)
                    dev = s.delta - d_coi
                out[i] = dev[m.generator_index(bus)]
            elif kind == "omega":
                out[i] = s.omega[m.generator_index(bus)]
            elif kind == "v":
                out[i] = abs(s.voltage_at(bus))
            else:
                out[i] = s.remaining_at(bus)
        return out

    def observe(self) -> np.ndarray:
        return add_observation_noise(self.measure(), self._sigma, self._rng)

    def state_vector(self, stack: ObservationStack | None = None) -> np.ndarray:
        """Flattened, scaled stack fed to learners."""
        return (stack or self.stack).as_vector() * self._scale

    # -- episode ------------------------------------------------------------
    def reset(self, scenario: Scenario) -> ObservationStack:
        cfg = self.config
        if scenario.case != cfg.case and Path(scenario.case).stem != Path(cfg.case).stem:
            raise ConfigError(f"scenario case {scenario.case!r} does not match config case {cfg.case!r}")
        self.state = initial_state(scenario, cfg.controlled_buses)
        self.scenario = scenario
        self._schedule = scenario.schedule()
        self._sigma = scenario.noise_sigma if scenario.noise_sigma > 0 else cfg.noise_sigma
        self._rng = np.random.default_rng(scenario.seed)
        self.done = False
        self.steps = 0
        self.stack = push_frame(ObservationStack.zeros(cfg.n_r, cfg.n_m), self.observe())
        return self.stack

    def _controls(self, action: int) -> tuple[ControlCommand, tuple[int, ...]]:
        cfg = self.config
        if cfg.task == "brake":
            if action not in (0, 1):
                raise ContractViolation(f"brake action must be 0 or 1, got {action}")
            return ControlCommand(brake={cfg.action_catalog[0]: bool(action)}), (action,)
        bits = decode_action(action, len(cfg.action_catalog))
        shed = {bus: 1 for bus, b in zip(cfg.controlled_buses, bits) if b}
        return ControlCommand(shed=shed), bits

    def step(self, action: int) -> tuple[ObservationStack, float, bool, dict]:
        if self.done or self.state is None:
            raise ContractViolation("step called on a finished or unreset episode")
        action = int(action)
        if not 0 <= action < self.config.n_o:
            raise ContractViolation(f"action {action} outside [0, {self.config.n_o})")
        cfg = self.config
        ctl, bits = self._controls(action)
        before = self.state
        info: dict[str, Any] = {}
        try:
            applied, invalid = dynsim.apply_controls(before, ctl)
            after = dynsim.simulate(applied, self._schedule, dynsim.NO_CONTROL, cfg.sim_dt,
                                    cfg.steps_per_action)
        except SimulationFault as exc:
            self.done = True
            self.steps += 1
            info.update(time=exc.time, terminal="simulation_fault", message=str(exc))
            return self.stack, TERMINAL_REWARD, True, info
        self.state = after
        self.steps += 1
        t = after.time
        done = t >= cfg.episode_limit - _EPS_T
        if cfg.task == "brake":
            w_bar, d_bar = brake_signals(after)
            if after.synchronism_lost:
                d_bar = max(d_bar, math.pi + 1e-12)
            reward = brake_reward(w_bar, d_bar, bits[0], cfg.c)
            info.update(omega_bar=w_bar, delta_bar=d_bar, brake=bool(bits[0]))
        else:
            m = after.model
            p0 = m.initial_load_p
            shed = float(np.sum((before.remaining_load_fraction - after.remaining_load_fraction) * p0))
            any_invalid = any(invalid.values())
            volts = [abs(after.voltage_at(b)) for b in cfg.monitored]
            t_pf = self.scenario.clear_time
            reward = uvls_reward(volts, shed, any_invalid, t, t_pf, (cfg.c1, cfg.c2, cfg.c3),
                                 cfg.envelope_thresholds, cfg.envelope_times,
                                 cfg.terminal_delay, cfg.terminal_voltage)
            if after.synchronism_lost:
                reward = TERMINAL_REWARD
            info.update(shed_pu=shed, invalid=any_invalid, voltages=volts, bits=bits)
            if reward == TERMINAL_REWARD:
                info["terminal"] = "voltage" if not after.synchronism_lost else "instability"
        if after.synchronism_lost:
            info["terminal"] = "instability"
            done = True
        if reward == TERMINAL_REWARD:
            done = True
        info.update(time=t, synchronism_lost=after.synchronism_lost)
        self.stack = push_frame(self.stack, self.observe())
        self.done = done
        return self.stack, float(reward), done, info


def env_reset(config: EnvConfig, scenario: Scenario, env: GridEnv | None = None) -> tuple[GridEnv, ObservationStack]:
    env = env or GridEnv(config)
    return env, env.reset(scenario)


def env_step(env: GridEnv, action: int) -> tuple[ObservationStack, float, bool, dict]:
    return env.step(action)


def run_episode(env: GridEnv, scenario: Scenario, policy) -> dict:
    """Roll out ``policy(env) -> action`` for one episode and summarise."""
    env.reset(scenario)
    total = 0.0
    actions = []
    done = False
    info: dict = {}
    while not done:
        a = int(policy(env))
        _, r, done, info = env.step(a)
        total += r
        actions.append(a)
    s = env.state
    return {"reward": total, "steps": env.steps, "actions": actions,
            "synchronism_lost": bool(s.synchronism_lost), "terminal": info.get("terminal"),
            "time": s.time, "remaining": s.remaining_load_fraction.tolist()}
