import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridrl.bench import (ControllerSpec, RunRecord, ScenarioSet, StructuralError, filter_fidvr_positive,
                          generate_brake_scenarios, generate_uvls_scenarios, named_suite,
                          read_records_csv, reward_difference_report, run_benchmark, run_one,
                          stability_rate, write_records_csv, write_report)
from gridrl.mdpenv import Scenario, initial_state, uvls_config

BRAKE_HASH = "0d41337b6635fcdbd3e15f13dd7372e0f3e5d45c5468587ee7de5816c7a54bc8"
UVLS_HASH = "2f0d3688140ef1d851d5bede33200bce5dcda09943f9002acf5c853a918b11e4"


@pytest.fixture(scope="module")
def uvls_suite():
    return generate_uvls_scenarios()


@pytest.fixture(scope="module")
def brake_suite():
    return generate_brake_scenarios()


def rec(sid, ctl, reward, **kw):
    base = dict(stable=True, shed_mw=(), envelope_violated=False, mean_latency=0.0, steps=1)
    base.update(kw)
    return RunRecord(sid, ctl, reward, **base)


# -- suites ----------------------------------------------------------------------------

def test_uvls_suite_is_960_factorial(uvls_suite):
    assert len(uvls_suite) == 960
    keys = [(s.load_level, s.motor_param_scale, s.fault_bus, s.fault_duration) for s in uvls_suite]
    assert len(set(keys)) == 960
    assert keys.count((0.8, 1.0, 1, 0.02)) == 1
    assert sum(s.motor_param_scale == 1.0 for s in uvls_suite) == 480
    assert len(set(uvls_suite.ids)) == 960


def test_brake_suite_is_220(brake_suite):
    assert len(brake_suite) == 220
    assert {s.fault_bus for s in brake_suite} == set(range(1, 11))
    assert all(0.3 <= s.fault_duration <= 0.7 for s in brake_suite)
    assert all(s.case == "two_area" for s in brake_suite)


def test_suites_are_pinned_by_content_hash(uvls_suite, brake_suite):
    assert brake_suite.content_hash() == BRAKE_HASH
    assert uvls_suite.content_hash() == UVLS_HASH
    assert generate_brake_scenarios().content_hash() == BRAKE_HASH


def test_named_suite_and_subsets(brake_suite):
    sub = named_suite("brake220:50")
    assert len(sub) == 50 and set(sub.ids) <= set(brake_suite.ids)
    assert named_suite("brake220:50").ids == sub.ids
    with pytest.raises(KeyError):
        named_suite("nope")


def test_scenario_set_json_round_trip(brake_suite):
    again = ScenarioSet.from_json(brake_suite.to_json())
    assert again == brake_suite


# -- runs -----------------------------------------------------------------------------

def test_empty_inputs_give_no_records():
    assert run_benchmark([ControllerSpec("n", "noop")], [], uvls_config()) == []


def test_records_independent_of_parallelism(uvls_suite):
    scs = uvls_suite.subset(20, seed=3)
    specs = [ControllerSpec("relay", "relay"), ControllerSpec("noop", "noop")]
    one = run_benchmark(specs, scs, uvls_config(), parallelism=1)
    eight = run_benchmark(specs, scs, uvls_config(), parallelism=8)

    def norm(rs):
        return sorted((r.controller, r.scenario_id, r.reward, r.stable, r.shed_mw, r.envelope_violated,
                       r.steps) for r in rs)

    assert len(one) == 40 and norm(one) == norm(eight)
    assert [(r.controller, r.scenario_id) for r in one] == [(r.controller, r.scenario_id) for r in eight]


def test_run_failure_is_captured_not_raised():
    r = run_one(ControllerSpec("bad", "dqn"), Scenario(case="ieee39_fidvr"), uvls_config())
    assert r.reward == -math.inf and r.error
    r = run_one(ControllerSpec("n", "noop"), Scenario(case="ieee39_fidvr", load_level=9.0), uvls_config())
    assert r.reward == -math.inf and "ScenarioRejected" in r.error


def test_shed_total_matches_trajectory(tmp_path):
    sc = Scenario(case="ieee39_fidvr", load_level=1.2, fault_bus=3, fault_start=1.0, fault_duration=0.1,
                  tag="sev3")
    cfg = uvls_config()
    r = run_one(ControllerSpec("relay", "relay"), sc, cfg, trajectory_dir=str(tmp_path))
    assert r.total_shed_mw > 0 and r.envelope_violated in (True, False)
    with open(r.trajectory_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    model = initial_state(sc, cfg.controlled_buses).model
    expect = []
    for b in cfg.controlled_buses:
        final = float(rows[-1][f"remaining_{b}"])
        expect.append((1 - final) * model.initial_load_p[model.controlled_index(b)] * model.case.base_mva)
    np.testing.assert_allclose(r.shed_mw, expect, rtol=1e-12)


def test_records_csv_round_trip(tmp_path):
    rs = [rec("a", "x", -1.5, shed_mw=(1.0, 2.5, 0.0), timeouts=2),
          rec("b", "x", -math.inf, stable=False, error="boom")]
    write_records_csv(rs, tmp_path / "r.csv")
    assert read_records_csv(tmp_path / "r.csv") == rs


# -- metrics --------------------------------------------------------------------------

def test_self_comparison_has_no_wins():
    rs = [rec("a", "x", -5.0), rec("b", "x", -1.0)]
    rep = reward_difference_report(rs, "x", "x")
    assert set(rep["diffs"].values()) == {0.0} and rep["win_rate"] == 0.0 and rep["tie_rate"] == 1.0


def test_reward_differences_arithmetic(tmp_path):
    rs = [rec("s1", "a", -5.0), rec("s2", "a", -1.0), rec("s1", "b", -6.0), rec("s2", "b", -3.0)]
    rep = reward_difference_report(rs, "a", "b")
    assert rep["diffs"] == {"s1": 1.0, "s2": 2.0} and rep["win_rate"] == 1.0
    assert rep["histogram"]["edges"] == [0.0, 50.0] and rep["histogram"]["counts"] == [2]
    write_report(rep, tmp_path / "r.json", tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines() == ["bin_low,bin_high,count", "0.0,50.0,2"]


def test_mismatched_sets_are_structural_error():
    rs = [rec("s1", "a", 0.0), rec("s2", "b", 0.0)]
    with pytest.raises(StructuralError):
        reward_difference_report(rs, "a", "b")


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(-3, 3), st.integers(-3, 3)), min_size=1, max_size=30))
def test_win_loss_tie_partition(pairs):
    rs = [rec(f"s{k}", "a", float(x)) for k, (x, _) in enumerate(pairs)]
    rs += [rec(f"s{k}", "b", float(y)) for k, (_, y) in enumerate(pairs)]
    ab = reward_difference_report(rs, "a", "b")
    ba = reward_difference_report(rs, "b", "a")
    assert ab["win_rate"] + ba["win_rate"] + ab["tie_rate"] == pytest.approx(1.0, abs=1e-15)
    assert ab["loss_rate"] == ba["win_rate"]
    assert sum(ab["histogram"]["counts"]) == len(pairs)


def test_fidvr_filter(uvls_suite):
    scs = ScenarioSet("t", (Scenario(case="ieee39_fidvr", tag="calm"),
                            Scenario(case="ieee39_fidvr", fault_bus=3, fault_duration=0.1, tag="hit"),
                            Scenario(case="ieee39_fidvr", fault_bus=4, fault_duration=0.1, tag="ok")))
    noop = [rec("calm", "noop", 0.0, envelope_violated=True),
            rec("hit", "noop", -9.0, envelope_violated=True),
            rec("ok", "noop", 0.0)]
    out = filter_fidvr_positive(scs, noop)
    assert out.ids == ["hit"]
    assert set(out.ids) <= set(scs.ids)
    with pytest.raises(StructuralError):
        filter_fidvr_positive(scs, noop[:2])


def test_stability_rate():
    rs = [rec("a", "x", 0.0), rec("b", "x", 0.0, stable=False), rec("c", "y", 0.0)]
    assert stability_rate(rs, "x") == 0.5 and stability_rate(rs, "z") == 0.0
