"""Scenario suites, batch evaluation, comparison metrics and result files."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .agents import DqnPolicy, QTablePolicy, load_checkpoint, load_qtable
from .baselines import MpcConfig, MpcController, RelayConfig, RelayController
from .dynsim import TrajectoryRecorder
from .mdpenv import (EnvConfig, GridEnv, Scenario, brake_config, envelope_threshold, uvls_config)

UVLS_LOAD_LEVELS = (0.8, 0.9, 1.1, 1.2)
UVLS_PARAM_SCALES = (1.0, 1.1)
UVLS_FAULT_BUSES = tuple(range(1, 31))
UVLS_DURATIONS = (0.02, 0.05, 0.08, 0.1)

# power-flow variants of the two-area case: (label, scenario overrides)
BRAKE_VARIANTS = (
    ("base", {}),
    ("load+50", {"load_delta_mw": 50.0}),
    ("load+100", {"load_delta_mw": 100.0}),
    ("load-25", {"load_delta_mw": -25.0}),
    ("tie-50", {"tie_flow_mw": -50.0}),
    ("tie-100", {"tie_flow_mw": -100.0}),
    ("tie+25", {"tie_flow_mw": 25.0}),
    ("level0.95", {"load_level": 0.95}),
    ("level0.97", {"load_level": 0.97}),
    ("level1.03", {"load_level": 1.03}),
    ("level1.05", {"load_level": 1.05}),
)
BRAKE_DURATIONS_PER_BUS = 2
BRAKE_DURATION_RANGE = (0.3, 0.7)
BRAKE_SUITE_SEED = 20190101
HIST_BIN_WIDTH = 50.0


# ---------------------------------------------------------------------------
# scenario sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSet:
    name: str
    scenarios: tuple[Scenario, ...]

    def __len__(self):
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def __getitem__(self, i):
        return self.scenarios[i]

    @property
    def ids(self) -> list[str]:
        return [s.tag for s in self.scenarios]

    def content_hash(self) -> str:
        blob = json.dumps([s.to_dict() for s in self.scenarios], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def subset(self, n: int, seed: int = 0, name: str | None = None) -> "ScenarioSet":
        """``n`` scenarios drawn without replacement, kept in suite order."""
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return ScenarioSet(name or f"{self.name}[{n}@{seed}]", tuple(self.scenarios[i] for i in idx))

    def where(self, pred, name: str | None = None) -> "ScenarioSet":
        return ScenarioSet(name or self.name, tuple(s for s in self.scenarios if pred(s)))

    def with_noise(self, sigma: float) -> "ScenarioSet":
        return ScenarioSet(f"{self.name}+noise{sigma}",
                           tuple(replace(s, noise_sigma=sigma) for s in self.scenarios))

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "scenarios": [s.to_dict() for s in self.scenarios]})

    @classmethod
    def from_json(cls, text: str) -> "ScenarioSet":
        d = json.loads(text)
        return cls(d["name"], tuple(Scenario.from_dict(s) for s in d["scenarios"]))


def generate_uvls_scenarios() -> ScenarioSet:
    """Full factorial: load level x motor-parameter set x fault bus x duration (960)."""
    out = []
    for lv in UVLS_LOAD_LEVELS:
        for ps in UVLS_PARAM_SCALES:
            for bus in UVLS_FAULT_BUSES:
                for dur in UVLS_DURATIONS:
                    k = len(out)
                    out.append(Scenario(case="ieee39_fidvr", load_level=lv, motor_param_scale=ps,
                                        fault_bus=bus, fault_start=1.0, fault_duration=dur, seed=k,
                                        tag=f"uvls-{k:03d}-L{lv:g}-P{ps:g}-B{bus}-D{dur:g}"))
    return ScenarioSet("uvls960", tuple(out))


def generate_brake_scenarios() -> ScenarioSet:
    """Power-flow variant x fault bus (1..10) x two seeded durations in [0.3, 0.7] s (220)."""
    rng = np.random.default_rng(BRAKE_SUITE_SEED)
    out = []
    for label, kw in BRAKE_VARIANTS:
        for bus in range(1, 11):
            for _ in range(BRAKE_DURATIONS_PER_BUS):
                dur = round(float(rng.uniform(*BRAKE_DURATION_RANGE)), 4)
                k = len(out)
                out.append(Scenario(case="two_area", fault_bus=bus, fault_start=1.0, fault_duration=dur,
                                    seed=k, tag=f"brake-{k:03d}-{label}-B{bus}-D{dur:g}", **kw))
    return ScenarioSet("brake220", tuple(out))


SUITES = {"uvls960": generate_uvls_scenarios, "brake220": generate_brake_scenarios}


def named_suite(name: str) -> ScenarioSet:
    """``uvls960`` / ``brake220``, optionally ``name:N`` for a seeded N-subset."""
    base, _, n = name.partition(":")
    if base not in SUITES:
        raise KeyError(f"unknown scenario set {base!r}; choose from {sorted(SUITES)}")
    s = SUITES[base]()
    return s.subset(int(n)) if n else s


# ---------------------------------------------------------------------------
# controllers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControllerSpec:
    """Picklable description of a controller; built inside each worker.

    kind: noop | always | dqn | qtable | relay | mpc
    """

    name: str
    kind: str
    checkpoint: str | None = None
    options: tuple = ()

    def option_dict(self) -> dict:
        return dict(self.options)


def build_controller(spec: ControllerSpec, env_config: EnvConfig):
    opts = spec.option_dict()
    if spec.kind == "noop":
        return lambda env: 0
    if spec.kind == "always":
        return lambda env: env.config.n_o - 1
    if spec.kind == "dqn":
        if spec.checkpoint is None:
            raise ValueError("dqn controller needs a checkpoint")
        params, _ = load_checkpoint(spec.checkpoint)
        return DqnPolicy(params)
    if spec.kind == "qtable":
        return QTablePolicy(load_qtable(spec.checkpoint))
    if spec.kind == "relay":
        return RelayController(env_config, RelayConfig(**opts))
    if spec.kind == "mpc":
        return MpcController(env_config, MpcConfig(**opts))
    raise ValueError(f"unknown controller kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunRecord:
    scenario_id: str
    controller: str
    reward: float
    stable: bool
    shed_mw: tuple[float, ...]
    envelope_violated: bool
    mean_latency: float
    steps: int
    brake_steps: int = 0
    timeouts: int = 0          # MPC plans abandoned for the no-op fallback
    error: str = ""
    trajectory_path: str = ""

    @property
    def total_shed_mw(self) -> float:
        return float(sum(self.shed_mw))


RECORD_FIELDS = ("scenario_id", "controller", "reward", "stable", "shed_mw", "envelope_violated",
                 "mean_latency", "steps", "brake_steps", "timeouts", "error", "trajectory_path")


def _envelope_violation(env: GridEnv) -> bool:
    sc = env.scenario
    if env.config.task != "uvls" or not sc.has_fault:
        return False
    t = env.state.time - sc.clear_time
    th = envelope_threshold(t, env.config.envelope_thresholds, env.config.envelope_times)
    if th is None:
        return False
    return any(abs(env.state.voltage_at(b)) < th for b in env.config.monitored)


def run_one(spec: ControllerSpec, scenario: Scenario, env_config: EnvConfig,
            trajectory_dir: str | None = None, controller=None) -> RunRecord:
    """Evaluate one controller on one scenario in a fresh environment."""
    env = GridEnv(env_config)
    rec = None
    try:
        ctl = controller or build_controller(spec, env_config)
        env.reset(scenario)
        if trajectory_dir:
            rec = TrajectoryRecorder(env.state.model)
            rec.record(env.state)
        total, lat, violated, brakes = 0.0, [], False, 0
        done = False
        while not done:
            t0 = time.perf_counter()
            a = int(ctl(env))
            lat.append(time.perf_counter() - t0)
            _, r, done, info = env.step(a)
            total += r
            brakes += int(env_config.task == "brake" and a == 1)
            violated = violated or _envelope_violation(env)
            if rec is not None:
                rec.record(env.state)
        s = env.state
        shed = ()
        if env_config.task == "uvls":
            m = s.model
            base = m.case.base_mva
            shed = tuple(float((1.0 - s.remaining_at(b)) * m.initial_load_p[m.controlled_index(b)] * base)
                         for b in env_config.controlled_buses)
        path = ""
        if rec is not None:
            p = Path(trajectory_dir) / f"{spec.name}__{scenario.tag or 'scenario'}.csv"
            rec.write(p)
            path = str(p)
        return RunRecord(scenario.tag, spec.name, float(total), not s.synchronism_lost, shed, violated,
                         float(np.mean(lat)) if lat else 0.0, env.steps, brakes,
                         int(getattr(ctl, "timeouts", 0)), "", path)
    except Exception as exc:   # per-run failures are recorded, never fatal to a sweep
        return RunRecord(scenario.tag, spec.name, -math.inf, False, (), False, 0.0, env.steps, 0, 0,
                         f"{type(exc).__name__}: {exc}", "")


def _run_chunk(args):
    spec, scenarios, env_config, trajectory_dir = args
    return [run_one(spec, sc, env_config, trajectory_dir) for sc in scenarios]


def run_benchmark(controllers: Sequence[ControllerSpec], scenarios: Iterable[Scenario],
                  env_config: EnvConfig, parallelism: int = 1,
                  trajectory_dir: str | None = None) -> list[RunRecord]:
    """Every (controller, scenario) pair in an isolated environment.

    Records come back ordered by controller then scenario, whatever the
    parallelism, so output does not depend on worker scheduling.
    """
    scenarios = list(scenarios)
    if not scenarios or not controllers:
        return []
    if parallelism <= 1:
        return [r for spec in controllers for r in _run_chunk((spec, scenarios, env_config, trajectory_dir))]
    jobs = []
    size = max(1, math.ceil(len(scenarios) / (parallelism * 4)))
    for spec in controllers:
        for i in range(0, len(scenarios), size):
            jobs.append((spec, scenarios[i:i + size], env_config, trajectory_dir))
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        chunks = list(pool.map(_run_chunk, jobs))
    return [r for c in chunks for r in c]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

class StructuralError(ValueError):
    pass


def _by_scenario(records, controller):
    out = {r.scenario_id: r for r in records if r.controller == controller}
    return out


def reward_difference_report(records: Sequence[RunRecord], controller_a: str, controller_b: str,
                             bin_width: float = HIST_BIN_WIDTH) -> dict:
    """diff = reward_a - reward_b per scenario; a strict positive diff counts as a win."""
    ra, rb = _by_scenario(records, controller_a), _by_scenario(records, controller_b)
    if set(ra) != set(rb):
        raise StructuralError("controllers were not evaluated on identical scenario sets")
    ids = sorted(ra)
    diffs = {i: ra[i].reward - rb[i].reward for i in ids}
    vals = np.array([diffs[i] for i in ids], dtype=float)
    n = len(vals)
    finite = vals[np.isfinite(vals)]
    wins = int(np.sum(vals > 0)); losses = int(np.sum(vals < 0))
    ties = n - wins - losses
    if finite.size:
        lo = math.floor(finite.min() / bin_width) * bin_width
        hi = math.floor(finite.max() / bin_width) * bin_width + bin_width
        edges = np.arange(lo, hi + bin_width / 2, bin_width)
        counts, _ = np.histogram(finite, bins=edges)
    else:
        edges, counts = np.array([]), np.array([], dtype=int)
    return {
        "controller_a": controller_a, "controller_b": controller_b, "n": n,
        "diffs": diffs,
        "win_rate": wins / n if n else 0.0,
        "loss_rate": losses / n if n else 0.0,
        "tie_rate": ties / n if n else 0.0,
        "mean_diff": float(finite.mean()) if finite.size else 0.0,
        "histogram": {"bin_width": bin_width, "edges": edges.tolist(), "counts": counts.tolist()},
    }


def filter_fidvr_positive(scenarios: ScenarioSet, noop_records: Sequence[RunRecord],
                          controller: str | None = None) -> ScenarioSet:
    """Scenarios whose no-action run breaks the voltage-recovery envelope."""
    recs = {r.scenario_id: r for r in noop_records if controller is None or r.controller == controller}
    missing = [s.tag for s in scenarios if s.tag not in recs]
    if missing:
        raise StructuralError(f"no no-op record for {len(missing)} scenarios (e.g. {missing[0]})")
    return scenarios.where(lambda s: s.has_fault and recs[s.tag].envelope_violated,
                           name=f"{scenarios.name}/fidvr")


def stability_rate(records: Sequence[RunRecord], controller: str) -> float:
    rs = [r for r in records if r.controller == controller]
    return sum(r.stable for r in rs) / len(rs) if rs else 0.0


def mean_latency(records: Sequence[RunRecord], controller: str) -> float:
    rs = [r.mean_latency for r in records if r.controller == controller and r.steps]
    return float(np.mean(rs)) if rs else 0.0


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_records_csv(records: Sequence[RunRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.scenario_id, r.controller, repr(r.reward), int(r.stable),
                        ";".join(repr(x) for x in r.shed_mw), int(r.envelope_violated),
                        repr(r.mean_latency), r.steps, r.brake_steps, r.timeouts, r.error, r.trajectory_path])


def read_records_csv(path) -> list[RunRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RunRecord(
                row["scenario_id"], row["controller"], float(row["reward"]), bool(int(row["stable"])),
                tuple(float(x) for x in row["shed_mw"].split(";") if x),
                bool(int(row["envelope_violated"])), float(row["mean_latency"]), int(row["steps"]),
                int(row["brake_steps"]), int(row.get("timeouts") or 0), row["error"], row["trajectory_path"]))
    return out


def write_report(report: dict, json_path, histogram_csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(report, indent=2, sort_keys=True))
    if histogram_csv_path:
        h = report["histogram"]
        with open(histogram_csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in zip(h["edges"][:-1], h["edges"][1:], h["counts"]):
                w.writerow([lo, hi, c])


def default_env_config(task: str) -> EnvConfig:
    return brake_config() if task == "brake" else uvls_config()
