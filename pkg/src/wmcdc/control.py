"""Local control channel for a live run.

The server listens on a Unix domain socket.  Each connection carries one
JSON request line and gets one JSON response line back::

    {"cmd": "dump", "scope": "table:t0", "chunk_size": 100, "throttle": 0}
    {"cmd": "pause"}            # optional "dump_id"; defaults to the latest dump
    {"cmd": "resume"}
    {"cmd": "status"}
"""

from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import threading
import time

from .dump import DumpRequest, Scope

logger = logging.getLogger(__name__)

APPLY_TIMEOUT = 30.0


class ControlError(RuntimeError):
    pass


def _status_json(status: dict) -> dict:
    return {
        "dump_id": status["dump_id"],
        "state": status["state"],
        "halted": status["halted"],
        "tables": {t: {"status": cp.status, "last_key": None if cp.last_key is None else list(cp.last_key)}
                   for t, cp in status["tables"].items()},
    }


class ControlServer:
    def __init__(self, path, scenario_ref: dict):
        self.path = str(path)
        self.ref = scenario_ref  # {"scenario": _Scenario} filled in once the run starts
        self.latest: str | None = None
        if os.path.exists(self.path):
            os.unlink(self.path)
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                line = self.rfile.readline()
                try:
                    reply = outer.handle(json.loads(line))
                    reply = {"ok": True, **reply}
                except Exception as exc:
                    reply = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
                self.wfile.write((json.dumps(reply) + "\n").encode())

        self.server = socketserver.ThreadingUnixStreamServer(self.path, Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def start(self):
        self.thread.start()
        return self

    def stop(self):
        self.server.shutdown()
        self.server.server_close()
        if os.path.exists(self.path):
            os.unlink(self.path)

    def _coordinator(self):
        sc = self.ref.get("scenario")
        node = sc.active_node() if sc else None
        if node is None:
            raise ControlError("no active capture node")
        sc.last_control = time.monotonic()
        return node.coordinator

    def _dump_id(self, coord, req) -> str:
        dump_id = req.get("dump_id") or coord.active_dump or self.latest
        if dump_id is None:
            raise ControlError("no dump has been requested")
        return dump_id

    def handle(self, req: dict) -> dict:
        cmd = req.get("cmd")
        coord = self._coordinator()
        if cmd == "dump":
            r = DumpRequest(Scope.parse(req["scope"]), int(req.get("chunk_size", 1000)),
                            int(req.get("throttle", 0)))
            self.latest = coord.request_dump(r)
            return {"dump_id": self.latest}
        if cmd in ("pause", "resume"):
            dump_id = self._dump_id(coord, req)
            fut = coord.pause_dump(dump_id) if cmd == "pause" else coord.resume_dump(dump_id)
            return {"status": _status_json(fut.result(APPLY_TIMEOUT))}
        if cmd == "status":
            return {"status": _status_json(coord.dump_status(self._dump_id(coord, req)))}
        raise ControlError(f"unknown command {cmd!r}")


def send_command(path, req: dict, timeout: float = APPLY_TIMEOUT + 5) -> dict:
    with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as s:
        s.settimeout(timeout)
        s.connect(str(path))
        s.sendall((json.dumps(req) + "\n").encode())
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = s.recv(65536)
            if not chunk:
                break
            buf += chunk
    return json.loads(buf)
