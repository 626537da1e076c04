import io
import json
import random
import threading

import numpy as np
import pytest

from gridrl.envbridge import BridgeClient, BridgeSession, serve_stdio, serve_tcp
from gridrl.mdpenv import GridEnv, Scenario, uvls_config

from sessions import LoopbackClient, in_process, over_bridge, scripted_scenarios


def req(op, version=1, **payload):
    return json.dumps({"version": version, "op": op, "payload": payload})


@pytest.fixture
def client():
    return LoopbackClient(BridgeSession())


def test_spaces_on_brake(client):
    assert client.request("init", task="brake")["spaces"]["N_i"] == 32
    sp = client.request("spaces")["spaces"]
    assert (sp["N_i"], sp["N_o"]) == (32, 2)


def test_uvls_spaces(client):
    sp = client.request("init", task="uvls")["spaces"]
    assert (sp["N_i"], sp["N_o"], sp["N_r"], sp["N_m"]) == (100, 8, 10, 10)


def test_step_before_reset(client):
    assert client.request("step", action=0)["error"]["code"] == "not_initialized"
    client.request("init", task="brake")
    assert client.request("step", action=0)["error"]["code"] == "not_initialized"


@pytest.mark.parametrize("line,code", [
    (req("jump"), "unknown_op"),
    (req("spaces", version=2), "bad_version"),
    (json.dumps({"op": "spaces"}), "bad_version"),
    ("{not json", "bad_request"),
    ("[1, 2]", "bad_request"),
    (json.dumps({"version": 1, "op": "reset", "payload": [1]}), "bad_request"),
])
def test_error_codes(client, line, code):
    resp = client.send_raw(line)
    assert resp["ok"] is False and resp["error"]["code"] == code and resp["version"] == 1


@pytest.mark.parametrize("action", [2, -1, 1.0, "0", True, None])
def test_bad_action(client, action):
    client.request("init", task="brake")
    client.request("reset", scenario={"fault_bus": 3, "fault_duration": 0.1})
    assert client.request("step", action=action)["error"]["code"] == "bad_action"
    assert client.request("step", action=0)["ok"]


def test_request_id_echoed(client):
    resp = client.send_raw(json.dumps({"version": 1, "op": "jump", "id": "abc"}))
    assert resp["id"] == "abc"


def test_unknown_scenario_key_rejected(client):
    client.request("init", task="uvls")
    resp = client.request("reset", scenario={"fault_bus": 3, "colour": "red"})
    assert resp["error"]["code"] == "bad_request"


def test_episode_done_requires_reset(client):
    client.request("init", task="uvls")
    client.request("reset", scenario={})
    done = False
    while not done:
        done = client.request("step", action=0)["done"]
    assert client.request("step", action=0)["error"]["code"] == "episode_done"


def test_quiet_uvls_session_earns_nothing_and_matches_in_process(client):
    sc = {"case": "ieee39_fidvr", "seed": 4}
    assert client.request("init", task="uvls")["ok"]
    client.request("reset", scenario=sc)
    env = GridEnv(uvls_config())
    env.reset(Scenario.from_dict(sc))
    total = local = 0.0
    for _ in range(300):
        resp = client.request("step", action=0)
        _, r, done, _ = env.step(0)
        total += resp["reward"]
        local += r
        assert resp["reward"] == r and resp["done"] == done
        if done:
            client.request("reset", scenario=sc)
            env.reset(Scenario.from_dict(sc))
    assert total == 0.0 and local == 0.0


@pytest.mark.parametrize("task", ["brake", "uvls"])
def test_bridge_stream_bit_identical(task, client):
    scs = scripted_scenarios(task, 40, seed=1)
    acts = np.random.default_rng(2).integers(0, 2 if task == "brake" else 8, 200)
    assert over_bridge(client, task, scs, acts) == in_process(task, scs, acts)


def random_garbage(rng: random.Random) -> str:
    kind = rng.randrange(8)
    if kind == 0:
        return "".join(chr(rng.randrange(1, 0x2FF)) for _ in range(rng.randrange(1, 60)))
    if kind == 1:
        return "[" * rng.randrange(1, 5000)
    if kind == 2:
        good = req("step", action=0)
        return good[:rng.randrange(len(good))]
    if kind == 3:
        vals = [None, True, 1e308, -1, "x", [], {}, float("nan"), 2 ** 70]
        return json.dumps({"version": rng.choice(vals + [1]), "op": rng.choice(vals + ["step", "reset"]),
                           "payload": rng.choice(vals)})
    if kind == 4:
        vals = [None, True, 1e308, -3, "x", [1], {"a": 1}, 2 ** 70, 0.5]
        return json.dumps({"version": 1, "op": "reset",
                           "payload": {"scenario": {rng.choice(["fault_bus", "load_level", "fault_duration",
                                                                "case", "seed"]): rng.choice(vals)}}})
    if kind == 5:
        return json.dumps({"version": 1, "op": rng.choice(["init", "step", "spaces"]),
                           "payload": {"task": rng.choice(["brake", "x", 3]),
                                       "action": rng.choice([0, 9, -1, "a", 0.5]),
                                       "overrides": rng.choice([{"agent_dt": -1}, {"bogus": 1}, 5, {}])}})
    if kind == 6:
        return json.dumps(rng.choice([1, "s", None, [], 3.5]))
    return "\x00" * rng.randrange(1, 10) + "}"


def test_fuzz_never_kills_session():
    session = BridgeSession()
    rng = random.Random(12345)
    session.handle_line(req("init", task="uvls"))
    for _ in range(10_000):
        line = random_garbage(rng)
        out = session.handle_line(line)
        resp = json.loads(out)
        assert resp["version"] == 1 and isinstance(resp["ok"], bool)
        assert "\n" not in out
        if session.closed:
            session = BridgeSession()
    session.handle_line(req("init", task="brake"))
    assert json.loads(session.handle_line(req("reset", scenario={})))["ok"]
    assert json.loads(session.handle_line(req("step", action=1)))["ok"]


def test_stdio_transport_one_response_per_request():
    lines = [req("init", task="brake"), "", req("jump"), req("reset"), req("step", action=1),
             req("close"), req("spaces")]
    out = io.StringIO()
    serve_stdio(io.StringIO("\n".join(lines) + "\n"), out)
    resp = [json.loads(x) for x in out.getvalue().splitlines()]
    assert len(resp) == 5          # blank skipped, nothing after close
    assert [r["ok"] for r in resp] == [True, False, True, True, True]


def test_spawned_server_matches_in_process():
    scs = scripted_scenarios("uvls", 10, seed=5)
    acts = np.random.default_rng(6).integers(0, 8, 100)
    c = BridgeClient.spawn()
    try:
        assert over_bridge(c, "uvls", scs, acts) == in_process("uvls", scs, acts)
    finally:
        c.close()
    assert c.proc.returncode == 0


def test_tcp_server_session():
    box = {}
    ready = threading.Event()

    def run():
        serve_tcp("127.0.0.1", 0, ready=lambda addr: (box.update(addr=addr), ready.set()))

    t = threading.Thread(target=run, daemon=True)
    t.start()
    assert ready.wait(10)
    c = BridgeClient.connect(*box["addr"])
    assert c.request("init", task="brake")["spaces"]["N_i"] == 32
    assert c.request("reset", scenario={"fault_bus": 3, "fault_duration": 0.2})["ok"]
    assert c.request("step", action=1)["ok"]
    c.close()
    t.join(10)
    assert not t.is_alive()
