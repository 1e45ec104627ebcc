"""Transports for the wire protocol: stdio (one session) and TCP.

Each connection gets its own Session; the hello message is sent
unprompted, then the loop is strictly one reply per incoming line. TCP
sessions run on the standard threading server so several external agents
can train concurrently against independent sessions.
"""

from __future__ import annotations

import socketserver
import sys
from typing import IO

from fairdyn.env import FairnessEnv
from fairdyn.protocol import Session, encode_message


def serve_stream(env: FairnessEnv, inp: IO[str], out: IO[str], seed: int = 0) -> None:
    """Run one session over text streams until EOF or version refusal."""
    session = Session(env, seed=seed)
    out.write(encode_message(session.hello_message()) + "\n")
    out.flush()
    for line in inp:
        line = line.strip()
        if not line:
            continue
        reply = session.handle_line(line)
        out.write(encode_message(reply) + "\n")
        out.flush()
        if session.closed:
            break


def serve_stdio(env: FairnessEnv, seed: int = 0) -> None:
    """Single session over stdin/stdout; intended for child-process use."""
    serve_stream(env, sys.stdin, sys.stdout, seed=seed)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        env = self.server.env  # type: ignore[attr-defined]
        seed = self.server.session_seed  # type: ignore[attr-defined]
        session = Session(env, seed=seed)
        self.wfile.write((encode_message(session.hello_message()) + "\n").encode())
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            reply = session.handle_line(line)
            self.wfile.write((encode_message(reply) + "\n").encode())
            if session.closed:
                break


class ProtocolServer(socketserver.ThreadingTCPServer):
    """TCP server handing each connection an independent session."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, env: FairnessEnv, host: str = "127.0.0.1", port: int = 0, seed: int = 0):
        super().__init__((host, port), _Handler)
        self.env = env
        self.session_seed = seed

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]


def serve_tcp(env: FairnessEnv, host: str = "127.0.0.1", port: int = 0, seed: int = 0) -> None:
    """Blocking TCP serve loop; port 0 picks a free port (printed)."""
    with ProtocolServer(env, host, port, seed) as server:
        bound_host, bound_port = server.address
        print(f"fairdyn serving on {bound_host}:{bound_port}", flush=True)
        server.serve_forever()
