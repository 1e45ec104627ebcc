"""JSON-lines wire protocol for driving the environment from another process.

Messages are single-line JSON objects; every server reply carries
``"fairdyn_schema": 1``. The exact field lists are frozen in protocol.md
at schema 1. The Session class is transport-free (dict in, dict out) so
it can be tested directly and reused by both the stdio and TCP servers.

Besides the raw step reward r = 1 - loss, every step reply carries the
time-scheduled scalar -(kappa_t*loss + lambda_t*disparity) with
lambda_t = t/H and kappa_t = 1 - lambda_t, so external learners can
optimize the schedule without computing any metric themselves.
"""

from __future__ import annotations

import json
from typing import Any

import numpy as np

from fairdyn.core import SCHEMA_VERSION, PopulationState, ThresholdAction, seed_rng
from fairdyn.env import FairnessEnv

# error codes, frozen at schema 1
E_MALFORMED = "malformed"
E_UNKNOWN_TYPE = "unknown_type"
E_VERSION_MISMATCH = "version_mismatch"
E_NOT_RESET = "not_reset"
E_ACTION_OUT_OF_RANGE = "action_out_of_range"
E_BAD_ACTION = "bad_action"
E_BAD_STATE = "bad_state"


class ProtocolError(Exception):
    """Carries an error code; the session turns it into an error reply."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code

    def reply(self) -> dict:
        return error_message(self.code, str(self))


def encode_message(payload: dict) -> str:
    """One protocol line (no trailing newline), keys sorted for stability."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def parse_line(line: str) -> dict:
    """Parse one incoming line into a message dict."""
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(E_MALFORMED, f"not valid JSON: {exc}") from None
    if not isinstance(payload, dict) or not isinstance(payload.get("type"), str):
        raise ProtocolError(E_MALFORMED, "message must be an object with a string 'type'")
    return payload


def error_message(code: str, message: str) -> dict:
    return {
        "type": "error",
        "fairdyn_schema": SCHEMA_VERSION,
        "code": code,
        "message": message,
    }


class Session:
    """One environment session: hello, then reset/step cycles.

    The server is client-paced and strictly sequential: each incoming
    message produces exactly one reply. A fatal version mismatch marks the
    session closed; transports drop the connection after delivering the
    error reply.
    """

    def __init__(self, env: FairnessEnv, seed: int = 0):
        self.env = env
        self.rng = seed_rng(seed, "serve/session")
        self.state: PopulationState | None = None
        self.t = 0
        self.episode = 0
        self.closed = False

    def hello_message(self) -> dict:
        """Sent unprompted as the first line of every session."""
        return {
            "type": "hello",
            "fairdyn_schema": SCHEMA_VERSION,
            "group_count": self.env.n_groups,
            "action_dims": self.env.n_groups,
            "horizon": self.env.horizon,
            "model_ref": self.env.model_ref,
        }

    def handle_line(self, line: str) -> dict:
        """Parse and dispatch one raw line; never raises."""
        try:
            return self.handle(parse_line(line))
        except ProtocolError as exc:
            if exc.code == E_VERSION_MISMATCH:
                self.closed = True
            return exc.reply()

    def handle(self, msg: dict) -> dict:
        kind = msg["type"]
        if kind == "hello":
            return self._on_hello(msg)
        if kind == "reset":
            return self._on_reset(msg)
        if kind == "step":
            return self._on_step(msg)
        raise ProtocolError(E_UNKNOWN_TYPE, f"unsupported message type {kind!r}")

    def _on_hello(self, msg: dict) -> dict:
        schema = msg.get("fairdyn_schema")
        if schema != SCHEMA_VERSION:
            raise ProtocolError(
                E_VERSION_MISMATCH,
                f"server speaks fairdyn_schema {SCHEMA_VERSION}, client sent {schema!r}",
            )
        return self.hello_message()

    def _on_reset(self, msg: dict) -> dict:
        if "seed" in msg:
            if not isinstance(msg["seed"], int):
                raise ProtocolError(E_MALFORMED, "reset seed must be an integer")
            self.rng = seed_rng(msg["seed"], "serve/session")
        if "q" in msg:
            q = _parse_vector(msg["q"], self.env.n_groups, E_BAD_STATE, "q")
            if np.any(q < 0.0) or np.any(q > 1.0):
                raise ProtocolError(E_BAD_STATE, "q components must lie in [0, 1]")
            state = PopulationState(tuple(q.tolist()), self.env.model_ref)
        else:
            state = self.env.initial_state(self.rng)
        self.state = state
        self.t = 0
        self.episode += 1
        return self._state_message(state, done=False)

    def _on_step(self, msg: dict) -> dict:
        if self.state is None or self.t >= self.env.horizon:
            raise ProtocolError(
                E_NOT_RESET, "no active episode; send a reset message first"
            )
        raw = msg.get("action")
        vec = _parse_vector(raw, self.env.n_groups, E_BAD_ACTION, "action")
        if np.any(vec < 0.0) or np.any(vec > 1.0):
            raise ProtocolError(
                E_ACTION_OUT_OF_RANGE, f"action components must lie in [0, 1], got {raw!r}"
            )
        action = ThresholdAction(tuple(vec.tolist()))
        step_loss, step_disp, _ = self.env.step_metrics(self.state, action)
        next_state = self.env.transition(self.state, action)
        self.t += 1
        tau = self.t
        lam = tau / self.env.horizon
        kappa = 1.0 - lam
        scheduled = -(kappa * step_loss + lam * step_disp)
        done = tau == self.env.horizon
        self.state = next_state
        reply = self._state_message(next_state, done=done)
        reply.update(
            reward=1.0 - step_loss,
            scheduled_reward=scheduled,
            utility=1.0 - step_disp,
            loss=step_loss,
            disparity=step_disp,
        )
        return reply

    def _state_message(self, state: PopulationState, done: bool) -> dict:
        return {
            "type": "state",
            "fairdyn_schema": SCHEMA_VERSION,
            "q": list(state.qualification_rates),
            "t": self.t,
            "episode": self.episode,
            "done": done,
        }


def _parse_vector(raw: Any, dims: int, code: str, name: str) -> np.ndarray:
    if not isinstance(raw, list) or len(raw) != dims:
        raise ProtocolError(code, f"{name} must be a list of {dims} numbers, got {raw!r}")
    try:
        vec = np.asarray([float(v) for v in raw], dtype=np.float64)
    except (TypeError, ValueError):
        raise ProtocolError(code, f"{name} components must be numbers, got {raw!r}") from None
    if not np.all(np.isfinite(vec)):
        raise ProtocolError(code, f"{name} components must be finite, got {raw!r}")
    return vec
