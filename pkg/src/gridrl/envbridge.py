"""Line-delimited JSON bridge exposing :class:`~gridrl.mdpenv.GridEnv` to other processes.

Every request line is one JSON object ``{"version": 1, "op": ..., "payload": {...}}``
(an optional ``"id"`` is echoed back).  Every request gets exactly one
response line.  See ``docs/protocol.md`` for the field reference.
"""
from __future__ import annotations

import json
import math
import os
import socket
import socketserver
import subprocess
import sys
from typing import IO, Any

import numpy as np

from .mdpenv import (ConfigError, ContractViolation, GridEnv, Scenario, bundled_config_paths,
                     load_configs, _read_json)

PROTOCOL_VERSION = 1
OPS = ("init", "reset", "step", "spaces", "close")


def _plain(x: Any) -> Any:
    """JSON-safe copy: numpy scalars/arrays to Python, tuples to lists."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    return x


class BridgeSession:
    """Protocol state machine for one client; transport-agnostic."""

    def __init__(self):
        self.env: GridEnv | None = None
        self.closed = False

    # -- helpers ------------------------------------------------------------
    @staticmethod
    def _error(code: str, message: str, rid=None) -> dict:
        out = {"version": PROTOCOL_VERSION, "ok": False, "error": {"code": code, "message": message}}
        if rid is not None:
            out["id"] = rid
        return out

    @staticmethod
    def _ok(rid=None, **fields) -> dict:
        out = {"version": PROTOCOL_VERSION, "ok": True}
        out.update(fields)
        if rid is not None:
            out["id"] = rid
        return out

    # -- entry points -------------------------------------------------------
    def handle_line(self, line: str) -> str:
        return json.dumps(self.handle(line))

    def handle(self, line: str | bytes) -> dict:
        try:
            if isinstance(line, bytes):
                line = line.decode("utf-8")
            req = json.loads(line)
        except (ValueError, UnicodeDecodeError, RecursionError) as exc:
            return self._error("bad_request", f"not valid JSON: {type(exc).__name__}")
        if not isinstance(req, dict):
            return self._error("bad_request", "request must be a JSON object")
        rid = req.get("id")
        if not isinstance(rid, (str, int, type(None))) or isinstance(rid, bool):
            rid = None
        if req.get("version") != PROTOCOL_VERSION:
            return self._error("bad_version", f"version must be {PROTOCOL_VERSION}", rid)
        op = req.get("op")
        payload = req.get("payload", {})
        if payload is None:
            payload = {}
        if not isinstance(payload, dict):
            return self._error("bad_request", "payload must be an object", rid)
        if op not in OPS:
            return self._error("unknown_op", f"unknown op {op!r}", rid)
        try:
            return getattr(self, f"_op_{op}")(payload, rid)
        except (ConfigError, ValueError, TypeError, KeyError) as exc:
            return self._error("bad_request", f"{type(exc).__name__}: {exc}", rid)
        except Exception as exc:   # never let one request kill the server
            return self._error("internal", f"{type(exc).__name__}: {exc}", rid)

    # -- ops ----------------------------------------------------------------
    def _op_init(self, payload: dict, rid):
        task = payload.get("task")
        sim = payload.get("sim_config")
        train = payload.get("train_config")
        if sim is None or train is None:
            if task not in ("brake", "uvls"):
                raise ConfigError("init needs 'task' (brake|uvls) or both config objects")
            d_sim, d_train = bundled_config_paths(task)
            sim = sim if sim is not None else d_sim
            train = train if train is not None else d_train
        sim = _read_json(sim)
        overrides = payload.get("overrides", {})
        if not isinstance(overrides, dict):
            raise ConfigError("overrides must be an object")
        sim.update(overrides)
        cfg, _, _ = load_configs(sim, train)
        self.env = GridEnv(cfg)
        return self._ok(rid, spaces=self._spaces())

    def _spaces(self) -> dict:
        c = self.env.config
        return {"N_i": c.n_i, "N_o": c.n_o, "N_m": c.n_m, "N_r": c.n_r, "task": c.task,
                "observed": list(c.observed)}

    def _op_spaces(self, payload, rid):
        if self.env is None:
            return self._error("not_initialized", "call init first", rid)
        return self._ok(rid, spaces=self._spaces())

    def _op_reset(self, payload, rid):
        if self.env is None:
            return self._error("not_initialized", "call init first", rid)
        sc = payload.get("scenario", {})
        if not isinstance(sc, dict):
            raise ConfigError("scenario must be an object")
        sc = dict(sc)
        sc.setdefault("case", self.env.config.case)
        stack = self.env.reset(Scenario.from_dict(sc))
        return self._ok(rid, observation=_plain(stack.as_vector()), reward=0.0, done=False,
                        info={"time": self.env.state.time})

    def _op_step(self, payload, rid):
        if self.env is None or self.env.state is None:
            return self._error("not_initialized", "call init and reset before step", rid)
        a = payload.get("action")
        if isinstance(a, bool) or not isinstance(a, int) or not 0 <= a < self.env.config.n_o:
            return self._error("bad_action", f"action must be an integer in [0, {self.env.config.n_o})", rid)
        if self.env.done:
            return self._error("episode_done", "episode finished; call reset", rid)
        try:
            stack, r, done, info = self.env.step(a)
        except ContractViolation as exc:
            return self._error("bad_action", str(exc), rid)
        return self._ok(rid, observation=_plain(stack.as_vector()), reward=float(r), done=bool(done),
                        info=_plain(info))

    def _op_close(self, payload, rid):
        self.closed = True
        self.env = None
        return self._ok(rid)


# ---------------------------------------------------------------------------
# transports
# ---------------------------------------------------------------------------

def serve_stdio(stdin: IO[str] | None = None, stdout: IO[str] | None = None) -> None:
    """Serve one session over text streams until ``close`` or end of input."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    session = BridgeSession()
    for line in stdin:
        if not line.strip():
            continue
        stdout.write(session.handle_line(line) + "\n")
        stdout.flush()
        if session.closed:
            break


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        session = BridgeSession()
        for raw in self.rfile:
            if not raw.strip():
                continue
            self.wfile.write((session.handle_line(raw) + "\n").encode("utf-8"))
            self.wfile.flush()
            if session.closed:
                self.server.stop_after = True
                break


class _Server(socketserver.TCPServer):
    allow_reuse_address = True
    stop_after = False


def serve_tcp(host: str = "127.0.0.1", port: int = 0, ready=None) -> None:
    """Serve sessions on a local TCP socket, one client at a time, until a ``close``."""
    with _Server((host, port), _Handler) as srv:
        if ready is not None:
            ready(srv.server_address)
        while not srv.stop_after:
            srv.handle_request()


def serve(endpoint: str = "stdio") -> None:
    """``stdio`` or ``tcp:HOST:PORT``."""
    if endpoint == "stdio":
        serve_stdio()
        return
    kind, _, rest = endpoint.partition(":")
    if kind != "tcp":
        raise ValueError(f"unknown endpoint {endpoint!r}")
    host, _, port = rest.rpartition(":")
    serve_tcp(host or "127.0.0.1", int(port),
              ready=lambda addr: print(f"listening on {addr[0]}:{addr[1]}", file=sys.stderr, flush=True))


# ---------------------------------------------------------------------------
# client
# ---------------------------------------------------------------------------

class BridgeClient:
    """Minimal client speaking the protocol over a pipe pair or a socket file."""

    def __init__(self, reader: IO[str], writer: IO[str], proc: subprocess.Popen | None = None,
                 sock: socket.socket | None = None):
        self.reader, self.writer, self.proc, self.sock = reader, writer, proc, sock

    @classmethod
    def spawn(cls, python: str = sys.executable) -> "BridgeClient":
        env = {**os.environ, "PYTHONIOENCODING": "utf-8"}
        proc = subprocess.Popen([python, "-m", "gridrl", "serve", "--stdio"], stdin=subprocess.PIPE,
                                stdout=subprocess.PIPE, encoding="utf-8", bufsize=1, env=env)
        return cls(proc.stdout, proc.stdin, proc=proc)

    @classmethod
    def connect(cls, host: str, port: int) -> "BridgeClient":
        s = socket.create_connection((host, port))
        f = s.makefile("rw", encoding="utf-8", newline="\n")
        return cls(f, f, sock=s)

    def send_raw(self, line: str) -> dict:
        self.writer.write(line.rstrip("\n") + "\n")
        self.writer.flush()
        resp = self.reader.readline()
        if not resp:
            raise ConnectionError("bridge closed the stream")
        return json.loads(resp)

    def request(self, op: str, **payload) -> dict:
        return self.send_raw(json.dumps({"version": PROTOCOL_VERSION, "op": op, "payload": payload}))

    def close(self) -> None:
        try:
            self.request("close")
        except (ConnectionError, OSError, ValueError):
            pass
        if self.proc is not None:
            self.proc.stdin.close()
            self.proc.wait(timeout=30)
            self.proc.stdout.close()
        if self.sock is not None:
            self.sock.close()
