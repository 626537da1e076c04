import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridrl.mdpenv import (TERMINAL_REWARD, ConfigError, ContractViolation, GridEnv, ObservationStack,
                           Scenario, ScenarioRejected, add_observation_noise, baseline_sections,
                           brake_config, brake_reward, bundled_config_paths, decode_action,
                           encode_action, env_reset, env_step, load_configs, push_frame, run_episode,
                           uvls_config, uvls_reward, voltage_deviations)

C = (260.0, 150.0, 3.0)
T_PF = 1.1


@pytest.fixture(scope="module")
def brake_env():
    return GridEnv(brake_config())


@pytest.fixture(scope="module")
def uvls_env():
    return GridEnv(uvls_config())


# -- reset -----------------------------------------------------------------------

def test_brake_stack_shape(brake_env):
    stack = brake_env.reset(Scenario())
    assert stack.shape == (4, 8) and brake_env.config.n_i == 32 and brake_env.config.n_o == 2


def test_uvls_stack_shape_follows_channel_count():
    env = GridEnv(uvls_config())
    assert env.reset(Scenario(case="ieee39_fidvr")).shape == (10, 10)
    eleven = uvls_config().observed + ("v:15",)
    env = GridEnv(uvls_config(observed=eleven))
    assert env.reset(Scenario(case="ieee39_fidvr")).shape == (10, 11)
    assert env.config.n_i == 110 and env.config.n_o == 8


def test_first_frame_is_newest_and_rest_zero(brake_env):
    stack = brake_env.reset(Scenario())
    assert np.all(stack.frames[:-1] == 0)
    np.testing.assert_allclose(stack.frames[-1], brake_env.measure())


def test_reset_is_deterministic(uvls_env):
    sc = Scenario(case="ieee39_fidvr", noise_sigma=0.01, seed=7)
    assert uvls_env.reset(sc) == uvls_env.reset(sc)


def test_infeasible_operating_point_rejected():
    env = GridEnv(brake_config())
    with pytest.raises(ScenarioRejected):
        env.reset(Scenario(load_level=4.0))


def test_case_mismatch_rejected(brake_env):
    with pytest.raises(ConfigError):
        brake_env.reset(Scenario(case="ieee39_fidvr"))


# -- step ------------------------------------------------------------------------

def test_brake_step_reward_follows_signals(brake_env):
    brake_env.reset(Scenario(fault_bus=3, fault_start=0.1, fault_duration=0.1))
    for a in (0, 0, 0, 1):
        _, r, done, info = brake_env.step(a)
    assert r == pytest.approx(-abs(info["omega_bar"]) - 2.0 * a, abs=1e-15)
    assert info["brake"] and not done


def test_brake_instability_is_terminal():
    env = GridEnv(brake_config())
    env.reset(Scenario(fault_bus=3, fault_duration=0.9))
    done, r = False, 0.0
    while not done:
        _, r, done, info = env.step(0)
    assert r == TERMINAL_REWARD and info["terminal"] == "instability"
    assert env.state.time < env.config.episode_limit
    with pytest.raises(ContractViolation):
        env.step(0)


def test_uvls_no_fault_runs_to_limit_with_zero_reward(uvls_env):
    out = run_episode(uvls_env, Scenario(case="ieee39_fidvr"), lambda env: 0)
    assert out["reward"] == 0.0
    assert out["steps"] == 80 and out["time"] == pytest.approx(8.0)


def test_brake_no_fault_zero_policy_is_quiet(brake_env):
    out = run_episode(brake_env, Scenario(), lambda env: 0)
    assert -1e-6 < out["reward"] <= 0.0


def test_action_range_enforced(uvls_env):
    uvls_env.reset(Scenario(case="ieee39_fidvr"))
    for a in (-1, 8):
        with pytest.raises(ContractViolation):
            uvls_env.step(a)


def test_uvls_shed_reward_and_invalid_penalty(uvls_env):
    uvls_env.reset(Scenario(case="ieee39_fidvr"))
    _, r, _, info = uvls_env.step(0b001)
    p0 = uvls_env.state.model.initial_load_p[0]
    assert info["shed_pu"] == pytest.approx(0.2 * p0)
    assert r == pytest.approx(-150.0 * 0.2 * p0)
    for _ in range(4):
        uvls_env.step(0b001)
    _, r, _, info = uvls_env.step(0b001)
    assert info["invalid"] and r == pytest.approx(-3.0)
    _, r, _, _ = uvls_env.step(0)
    assert r == 0.0


def test_env_reset_and_step_helpers():
    env, stack = env_reset(brake_config(), Scenario())
    stack2, r, done, info = env_step(env, 0)
    assert stack2.shape == stack.shape and not done and info["time"] == pytest.approx(0.1)


def test_noise_only_perturbs_observations():
    clean, noisy = GridEnv(brake_config()), GridEnv(brake_config())
    sc = Scenario(fault_bus=3, fault_duration=0.3)
    clean.reset(sc)
    noisy.reset(Scenario(fault_bus=3, fault_duration=0.3, noise_sigma=0.01, seed=3))
    for a in (0, 1, 0, 1, 1):
        s1, r1, _, _ = clean.step(a)
        s2, r2, _, _ = noisy.step(a)
    assert r1 == r2
    assert not np.array_equal(s1.frames, s2.frames)
    np.testing.assert_allclose(s1.frames, s2.frames, rtol=0.06, atol=1e-12)


# -- rewards ---------------------------------------------------------------------

def test_brake_reward_examples():
    assert brake_reward(0.0, 0.0, 0, 2.0) == 0.0
    assert brake_reward(-0.002, 0.5, 1, 2.0) == pytest.approx(-2.002, abs=1e-15)
    assert brake_reward(0.01, 3.2, 0, 2.0) == -1000.0
    assert brake_reward(0.01, math.pi, 0, 2.0) == -0.01


def test_uvls_reward_examples():
    assert uvls_reward([1.0, 1.0, 1.0], 0.0, False, T_PF + 0.2, T_PF, C) == 0.0
    r = uvls_reward([0.65, 1.0, 1.0], 0.2, False, T_PF + 0.2, T_PF, C)
    assert r == pytest.approx(-43.0, abs=1e-12)
    assert uvls_reward([0.94, 1.0, 1.0], 0.0, False, T_PF + 4.1, T_PF, C) == -1000.0


@pytest.mark.parametrize("elapsed,threshold", [
    (0.0, None), (0.2, 0.7), (0.33, 0.7), (0.34, 0.8), (0.5, 0.8), (0.51, 0.9), (1.5, 0.9),
    (1.51, 0.95), (3.9, 0.95), (4.0, 0.95)])
def test_envelope_window_boundaries(elapsed, threshold):
    v = 0.6
    r = uvls_reward([v], 0.0, False, T_PF + elapsed, T_PF, C)
    expected = 0.0 if threshold is None else 260.0 * (v - threshold)
    assert r == pytest.approx(expected, abs=1e-9)


def test_terminal_strictly_after_four_seconds():
    assert uvls_reward([0.94], 0.0, False, T_PF + 4.0, T_PF, C) == pytest.approx(260 * (0.94 - 0.95))
    assert uvls_reward([0.94], 0.0, False, T_PF + 4.0 + 1e-6, T_PF, C) == -1000.0
    assert uvls_reward([0.95], 0.0, False, T_PF + 5.0, T_PF, C) == 0.0


def test_no_fault_only_shed_and_invalid_terms():
    assert uvls_reward([0.5], 0.1, True, 7.0, None, C) == pytest.approx(-150 * 0.1 - 3)


def test_before_clearing_only_shed_terms():
    assert uvls_reward([0.1], 0.0, False, T_PF - 0.05, T_PF, C) == 0.0


volts = st.lists(st.floats(0.0, 1.2), min_size=1, max_size=4)


@settings(max_examples=200)
@given(volts, st.floats(0, 1), st.booleans(), st.floats(0, 3.9), st.floats(0, 500), st.floats(0, 500),
       st.floats(0, 10), st.floats(0.1, 4))
def test_uvls_reward_linear_in_coefficients(v, shed, inv, el, c1, c2, c3, k):
    t = T_PF + el
    r = uvls_reward(v, shed, inv, t, T_PF, (c1, c2, c3))
    parts = [uvls_reward(v, shed, inv, t, T_PF, e) for e in ((c1, 0, 0), (0, c2, 0), (0, 0, c3))]
    assert r == pytest.approx(sum(parts), rel=1e-12, abs=1e-9)
    assert uvls_reward(v, shed, inv, t, T_PF, (k * c1, k * c2, k * c3)) == pytest.approx(k * r, rel=1e-12, abs=1e-9)
    assert r <= 0.0
    assert np.all(voltage_deviations(v, el) <= 0)


@settings(max_examples=200)
@given(st.floats(-1, 1), st.floats(-4, 4), st.integers(0, 1), st.floats(0, 10))
def test_brake_reward_bounds(w, d, u, c):
    r = brake_reward(w, d, u, c)
    assert r <= 0.0
    assert r >= -1000.0 or r == TERMINAL_REWARD


@settings(max_examples=15)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=40))
def test_brake_episode_reward_bounds(brake_env, actions):
    brake_env.reset(Scenario(fault_bus=3, fault_duration=0.4))
    total, n = 0.0, 0
    for a in actions:
        _, r, done, _ = brake_env.step(a)
        total += r; n += 1
        if done:
            break
    assert -1000.0 * n <= total <= 0.0


# -- stacking, noise, actions ----------------------------------------------------

def test_push_frame_examples():
    z = ObservationStack.zeros(3, 2)
    s = push_frame(z, [1, 2])
    np.testing.assert_array_equal(s.frames, [[0, 0], [0, 0], [1, 2]])
    for f in ([3, 4], [5, 6]):
        s = push_frame(s, f)
    np.testing.assert_array_equal(s.frames, [[1, 2], [3, 4], [5, 6]])
    s = push_frame(s, [7, 8])
    assert [1, 2] not in s.frames.tolist() and s.shape == (3, 2)
    with pytest.raises(ContractViolation):
        push_frame(s, [1, 2, 3])


def test_noise_statistics():
    f = np.ones(3)
    assert np.array_equal(add_observation_noise(f, 0.0, np.random.default_rng(0)), f)
    rng = np.random.default_rng(123)
    x = add_observation_noise(np.ones(100_000), 0.01, rng)
    assert abs(x.mean() - 1.0) < 0.001 and abs(x.std() - 0.01) < 0.001
    a = add_observation_noise(f, 0.01, np.random.default_rng(5))
    b = add_observation_noise(f, 0.01, np.random.default_rng(5))
    assert np.array_equal(a, b)


@given(st.lists(st.integers(0, 1), min_size=1, max_size=8))
def test_action_codec_round_trip(bits):
    assert decode_action(encode_action(bits), len(bits)) == tuple(bits)


def test_uvls_catalog_size():
    assert uvls_config().n_o == 8
    with pytest.raises(ContractViolation):
        decode_action(8, 3)


# -- configuration files -----------------------------------------------------------

@pytest.mark.parametrize("task,n_i,n_o", [("brake", 32, 2), ("uvls", 100, 8)])
def test_bundled_configs_load(task, n_i, n_o):
    cfg, sampler, dqn = load_configs(*bundled_config_paths(task))
    assert (cfg.n_i, cfg.n_o) == (n_i, n_o)
    assert dqn["total_steps"] > 0
    sc = sampler.sample(np.random.default_rng(0))
    assert sc.case == cfg.case


def test_unknown_keys_rejected(tmp_path):
    sim, train = (json.loads(p.read_text()) for p in bundled_config_paths("brake"))
    with pytest.raises(ConfigError):
        load_configs({**sim, "colour": "blue"}, train)
    with pytest.raises(ConfigError):
        load_configs(sim, {**train, "reward": {"c": 2, "c9": 1}})
    with pytest.raises(ConfigError):
        load_configs(sim, {**train, "task": "juggle"})
    with pytest.raises(ConfigError):
        Scenario.from_dict({"case": "two_area", "wind": 3})


def test_config_invariants():
    with pytest.raises(ConfigError):
        brake_config(agent_dt=0.003)
    with pytest.raises(ConfigError):
        uvls_config(c2=-1.0)
    with pytest.raises(ConfigError):
        brake_config(observed=("delta:1", "speed:1"))


def test_baseline_sections():
    sec = baseline_sections(bundled_config_paths("uvls")[0])
    assert sec["relay"]["pickup_delay"] == 0.33 and sec["mpc"]["max_control_moves"] == 3
    assert baseline_sections(bundled_config_paths("brake")[0]) == {"relay": {}, "mpc": {}}
