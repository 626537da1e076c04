"""Non-learning UVLS controllers: a local step-wise relay and a receding-horizon
MPC that enumerates shedding plans on an internal model.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import dynsim
from .dynsim import NO_CONTROL, NO_EVENTS, ControlCommand, EventSchedule, SimulationFault, SimulationState
from .mdpenv import (TERMINAL_REWARD, EnvConfig, GridEnv, Scenario, decode_action, encode_action,
                     initial_state, uvls_reward)

_EPS = 1e-9


# ---------------------------------------------------------------------------
# relay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RelayConfig:
    pickup_threshold: float = 0.90
    pickup_delay: float = 0.33
    breaker_delay: float = 0.1
    block_fraction: float = 0.20
    max_blocks: int = 3

    def __post_init__(self):
        if not 0.0 < self.pickup_threshold < 1.0:
            raise ValueError("pickup threshold must lie in (0, 1)")
        if self.pickup_delay < 0 or self.breaker_delay < 0:
            raise ValueError("delays must be nonnegative")
        if self.max_blocks < 0:
            raise ValueError("max_blocks must be nonnegative")


@dataclass(frozen=True)
class RelayState:
    timers: tuple[float, ...]
    blocks: tuple[int, ...]

    @classmethod
    def initial(cls, n: int) -> "RelayState":
        return cls((0.0,) * n, (0,) * n)


def relay_step(voltages: Sequence[float], state: RelayState, config: RelayConfig,
               dt: float) -> tuple[tuple[int, ...], RelayState]:
    """One relay scan per bus. Returns trip orders (0/1 per bus) and the new state.

    A trip order is a one-block shed that the breaker executes ``breaker_delay``
    later; the pickup timer re-arms after each trip.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    timers, blocks, trips = [], [], []
    for v, t, n in zip(voltages, state.timers, state.blocks):
        t = t + dt if v < config.pickup_threshold else 0.0
        trip = 0
        if t >= config.pickup_delay - _EPS and n < config.max_blocks:
            trip, n, t = 1, n + 1, 0.0
        timers.append(t); blocks.append(n); trips.append(trip)
    return tuple(trips), RelayState(tuple(timers), tuple(blocks))


class RelayController:
    """Relay bank on the monitored buses driving the controlled loads at agent cadence."""

    def __init__(self, env_config: EnvConfig, config: RelayConfig = RelayConfig(),
                 measured_buses: Sequence[int] | None = None):
        self.env_config = env_config
        self.config = config
        self.measured = tuple(measured_buses or env_config.monitored)
        n = len(env_config.controlled_buses)
        if len(self.measured) != n:
            raise ValueError("one measured bus per controlled bus is required")
        self.reset()

    def reset(self) -> None:
        n = len(self.env_config.controlled_buses)
        self.state = RelayState.initial(n)
        self.queue: list[list[float]] = [[] for _ in range(n)]   # breaker countdowns per bus

    def __call__(self, env: GridEnv) -> int:
        if env.steps == 0:
            self.reset()
        dt = env.config.agent_dt
        # breaker countdowns started on earlier scans
        bits = [0] * len(self.queue)
        for j, q in enumerate(self.queue):
            q[:] = [c - dt for c in q]
            if q and q[0] <= _EPS:
                bits[j] = 1
                q.pop(0)
        v = [abs(env.state.voltage_at(b)) for b in self.measured]
        trips, self.state = relay_step(v, self.state, self.config, dt)
        for j, tr in enumerate(trips):
            if tr:
                if self.config.breaker_delay <= _EPS and not bits[j]:
                    bits[j] = 1
                else:
                    self.queue[j].append(self.config.breaker_delay)
        return encode_action(bits)


# ---------------------------------------------------------------------------
# MPC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MpcConfig:
    prediction_horizon: float = 3.0
    control_interval: float = 0.1
    max_control_moves: int = 3
    move_spacing: float = 0.5
    internal_param_scale: float = 1.0     # T_stall/V_stall scale of the internal model
    sim_dt: float = 0.01                  # coarser than the plant step to keep plans fast
    timeout: float | None = None          # seconds of wall clock per plan
    prune: bool = True

    def __post_init__(self):
        if self.prediction_horizon < self.control_interval:
            raise ValueError("horizon must cover at least one control interval")
        if self.max_control_moves < 1:
            raise ValueError("need at least one control move")
        if (self.max_control_moves - 1) * self.move_spacing >= self.prediction_horizon + _EPS:
            raise ValueError("control moves must fall inside the horizon")
        for name in ("move_spacing", "prediction_horizon"):
            r = getattr(self, name) / self.control_interval
            if abs(r - round(r)) > 1e-9:
                raise ValueError(f"{name} must be a multiple of control_interval")
        r = self.control_interval / self.sim_dt
        if abs(r - round(r)) > 1e-9:
            raise ValueError("control_interval must be a multiple of sim_dt")


class PlanTimeout(RuntimeError):
    pass


@dataclass
class PlanResult:
    plan: tuple[int, ...]
    score: float
    evaluated: int = 0
    pruned: int = 0


def _segment_lengths(config: MpcConfig) -> list[int]:
    """Control intervals covered by each move's segment."""
    per_move = int(round(config.move_spacing / config.control_interval))
    total = int(round(config.prediction_horizon / config.control_interval))
    lens = [per_move] * (config.max_control_moves - 1)
    lens.append(total - sum(lens))
    return lens


def mpc_plan(current_state: SimulationState, config: MpcConfig, env_config: EnvConfig,
             schedule: EventSchedule = NO_EVENTS, t_pf: float | None = None,
             deadline: float | None = None) -> PlanResult:
    """Best shedding sequence (one action per move) by depth-first enumeration.

    ``current_state`` must already live on the internal model.  Partial plans
    are cut when their accumulated reward is strictly below the incumbent:
    every later reward term is nonpositive, so such a branch cannot win.
    Candidates whose simulation fails score -inf.
    """
    buses = env_config.controlled_buses
    n_bits = len(buses)
    n_actions = 2 ** n_bits
    seg = _segment_lengths(config)
    steps_per = int(round(config.control_interval / config.sim_dt))
    coeffs = (env_config.c1, env_config.c2, env_config.c3)
    p0 = current_state.model.initial_load_p
    best = PlanResult((0,) * config.max_control_moves, -math.inf)

    def score_segment(state, action, n_int):
        bits = decode_action(action, n_bits)
        ctl = ControlCommand(shed={b: 1 for b, x in zip(buses, bits) if x})
        applied, invalid = dynsim.apply_controls(state, ctl)
        shed = float(np.sum((state.remaining_load_fraction - applied.remaining_load_fraction) * p0))
        inv = any(invalid.values())
        total = 0.0
        s = applied
        for k in range(n_int):
            s = dynsim.simulate(s, schedule, NO_CONTROL, config.sim_dt, steps_per)
            volts = [abs(s.voltage_at(b)) for b in env_config.monitored]
            r = uvls_reward(volts, shed if k == 0 else 0.0, inv and k == 0, s.time, t_pf, coeffs,
                            env_config.envelope_thresholds, env_config.envelope_times,
                            env_config.terminal_delay, env_config.terminal_voltage)
            if s.synchronism_lost:
                r = TERMINAL_REWARD
            total += r
            if r == TERMINAL_REWARD:
                return total, s, True
        return total, s, False

    def shed_bound(state, action):
        # reward of the first control interval can be no better than the shed/invalid cost
        bits = decode_action(action, n_bits)
        cost = 0.0
        for j, x in enumerate(bits):
            if x:
                rem = state.remaining_load_fraction[state.model.controlled_index(buses[j])]
                if rem <= 0:
                    return None         # invalid shed: dominated by the same plan without it
                cost += min(rem, dynsim.SHED_BLOCK) * p0[state.model.controlled_index(buses[j])]
        return -env_config.c2 * cost

    def total_shed(plan):
        return sum(bin(a).count("1") for a in plan)

    def better(score, plan):
        if score > best.score:
            return True
        if score == best.score and score > -math.inf:
            ts, tb = total_shed(plan), total_shed(best.plan)
            return ts < tb or (ts == tb and plan < best.plan)
        return False

    def dfs(state, depth, acc, prefix):
        for a in range(n_actions):
            if deadline is not None and time.perf_counter() > deadline:
                raise PlanTimeout("MPC planning exceeded its time budget")
            b = shed_bound(state, a)
            if b is None:
                best.pruned += 1
                continue
            if config.prune and acc + b < best.score:
                best.pruned += 1
                continue
            plan = prefix + (a,)
            try:
                r, s, terminal = score_segment(state, a, seg[depth])
            except SimulationFault:
                r, s, terminal = -math.inf, None, True
            total = acc + r
            if terminal or depth == len(seg) - 1:
                full = plan + (0,) * (len(seg) - len(plan))
                best.evaluated += 1
                if better(total, full):
                    best.plan, best.score = full, total
                continue
            if config.prune and total < best.score:
                best.pruned += 1
                continue
            dfs(s, depth + 1, total, plan)

    dfs(current_state, 0, 0.0, ())
    return best


def mpc_exhaustive(current_state: SimulationState, config: MpcConfig, env_config: EnvConfig,
                   schedule: EventSchedule = NO_EVENTS, t_pf: float | None = None) -> PlanResult:
    """Unpruned reference search (same scoring, same tie rules)."""
    return mpc_plan(current_state, replace(config, prune=False), env_config, schedule, t_pf)


class MpcController:
    """Receding-horizon wrapper: re-plans every call and applies the first move."""

    def __init__(self, env_config: EnvConfig, config: MpcConfig = MpcConfig()):
        if env_config.task != "uvls":
            raise ValueError("MPC baseline is defined for the uvls task")
        self.env_config = env_config
        self.config = config
        self.plan_times: list[float] = []
        self.timeouts = 0
        self.last_plan: PlanResult | None = None

    def internal_state(self, env: GridEnv) -> SimulationState:
        sc = env.scenario
        internal = replace(sc, motor_param_scale=sc.motor_param_scale * self.config.internal_param_scale)
        base = initial_state(internal, self.env_config.controlled_buses)
        return replace(env.state, model=base.model)

    def known_schedule(self, env: GridEnv) -> tuple[EventSchedule, float | None]:
        """The plant schedule once its fault has begun (faults are not foreseen)."""
        sc = env.scenario
        if sc.has_fault and env.state.time >= sc.fault_start - _EPS:
            return env._schedule, sc.clear_time
        return NO_EVENTS, None

    def __call__(self, env: GridEnv) -> int:
        t0 = time.perf_counter()
        schedule, t_pf = self.known_schedule(env)
        deadline = t0 + self.config.timeout if self.config.timeout else None
        try:
            res = mpc_plan(self.internal_state(env), self.config, self.env_config, schedule, t_pf, deadline)
            action = res.plan[0]
            self.last_plan = res
        except PlanTimeout:
            self.timeouts += 1
            action = 0
        self.plan_times.append(time.perf_counter() - t0)
        return action
