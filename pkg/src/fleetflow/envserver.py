"""Line-delimited JSON environment protocol over stdio.

One request per line, one reply per line, strictly ordered.  Requests:

    {"op": "reset", "seed": 7}
    {"op": "step", "actions": [0, 1, 1, ...]}   # destination per zone
    {"op": "close"}

``actions[h]`` is the destination recommended to every idle driver in zone h
(h itself means wait).  Replies carry ``ok``; successful ones include an
observation (idle supply per zone, outgoing demand per zone, 1-based
timestep) and, for steps, the per-zone net earnings and the done flag.  The
reply to the final step adds an episode summary so clients can audit their
reward totals against the engine's trace.
"""

from __future__ import annotations

import json
import sys

import numpy as np

from .city import Scenario
from .errors import ContractViolation
from .simulate import ObjectiveMode, Simulation

PROTOCOL_FORMAT_VERSION = 1


class ZoneActionPolicy:
    """Adapts a per-zone destination array to the engine's policy interface."""

    def __init__(self, actions):
        self.actions = actions

    def destinations(self, t, zone, driver_ids, rng):
        return np.full(len(driver_ids), self.actions[zone], dtype=np.int64)


class EnvSession:
    """One environment lifecycle: reset -> step* -> close."""

    def __init__(self, scenario: Scenario, n_drivers: int):
        self.scenario = scenario
        self.sim = Simulation(scenario.matrices, n_drivers,
                              ObjectiveMode.MAX_EARNINGS)
        self.active = False
        self.closed = False

    def handle(self, request: dict) -> tuple[dict, bool]:
        """Returns (reply, keep_running)."""
        if not isinstance(request, dict) or "op" not in request:
            return _error("malformed request: missing op"), True
        op = request["op"]
        if op == "reset":
            return self._reset(request), True
        if op == "step":
            return self._step(request), True
        if op == "close":
            self.closed = True
            return {"ok": True, "format_version": PROTOCOL_FORMAT_VERSION}, False
        return _error(f"unknown op {op!r}"), True

    def _reset(self, request: dict) -> dict:
        seed = request.get("seed")
        if not isinstance(seed, int):
            return _error("reset needs an integer seed")
        self.sim.reset(seed)
        self.active = True
        return {
            "ok": True,
            "format_version": PROTOCOL_FORMAT_VERSION,
            "observation": self.sim.observation(),
            "done": False,
        }

    def _step(self, request: dict) -> dict:
        if not self.active:
            return _error("no active episode; send reset first")
        if self.sim.done:
            return _error("episode is done; send reset to start another")
        actions = request.get("actions")
        m = self.scenario.grid.m
        if (
            not isinstance(actions, list)
            or len(actions) != m
            or not all(isinstance(a, int) and 0 <= a < m for a in actions)
        ):
            return _error(f"actions must be a list of {m} zone indices")
        rewards = self.sim.step(ZoneActionPolicy(actions))
        reply = {
            "ok": True,
            "observation": self.sim.observation(),
            "rewards": rewards.tolist(),
            "done": self.sim.done,
        }
        if self.sim.done:
            trace = self.sim.trace()
            reply["episode"] = {
                "total_earnings": trace.total_earnings(),
                "fulfilled": trace.total_fulfilled(),
                "total_demand": int(self.scenario.matrices.demand.sum()),
            }
        return reply


def _error(message: str) -> dict:
    return {"ok": False, "error": message}


def serve(scenario: Scenario, n_drivers: int, instream=None, outstream=None) -> int:
    """Serve the protocol until close or EOF; replies are flushed per line."""
    instream = instream if instream is not None else sys.stdin
    outstream = outstream if outstream is not None else sys.stdout
    session = EnvSession(scenario, n_drivers)
    for line in instream:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            reply, keep = _error(f"invalid JSON: {exc}"), True
        else:
            try:
                reply, keep = session.handle(request)
            except ContractViolation as exc:
                reply, keep = _error(f"contract violation: {exc}"), True
        outstream.write(json.dumps(reply) + "\n")
        outstream.flush()
        if not keep:
            return 0
    return 0
