"""Line-delimited JSON transport between the coordinator and subsystem processes.

Each subsystem runs a small TCP server around its controller.  Negotiation
traffic uses :class:`~hiermpc.protocol.NegotiationRequest` and
:class:`~hiermpc.protocol.NegotiationResponse` unchanged.  The simulated
plant additionally talks to the subsystem through a few plant-side
messages (``measure``, ``actuate``) and the coordinator asks once for
the signal widths (``describe``) and the coupling sensitivity used for
certification (``sensitivity``).  None of them carries model matrices.
"""
from __future__ import annotations

import json
import socket
import socketserver
import threading

import numpy as np

from .local import CentralCostConfig
from .protocol import COMMIT, ERROR, NEGOTIATE, NegotiationRequest, NegotiationResponse

PLANT_MESSAGES = ("measure", "actuate", "describe", "sensitivity", "set_central", "shutdown")


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address {text!r} is not host:port")
    return host, int(port)


def _handle_plant_message(controller, msg: dict) -> dict:
    kind = msg["type"]
    if kind == "measure":
        controller.measure(msg["x"], msg.get("step"))
        return {"type": "ok"}
    if kind == "actuate":
        move = controller.committed
        return {"type": "ok", "u": None if move is None else np.asarray(move).tolist()}
    if kind == "describe":
        return {"type": "ok", **controller.describe()}
    if kind == "sensitivity":
        return {"type": "ok", "Mv": controller.coupling_sensitivity().tolist()}
    if kind == "set_central":
        controller.set_central(CentralCostConfig(
            np.asarray(msg["Qc"], float), np.asarray(msg["Rc"], float), int(msg["q"]), msg["r_d"]))
        return {"type": "ok"}
    raise ValueError(f"unknown message type {kind!r}")


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        controller = self.server.controller
        for raw in self.rfile:
            line = raw.decode().strip()
            if not line:
                continue
            msg = json.loads(line)
            if msg.get("type") in (NEGOTIATE, COMMIT):
                reply = controller.serve(NegotiationRequest.from_json(line)).to_json()
            elif msg.get("type") == "shutdown":
                self.wfile.write(b'{"type": "ok"}\n')
                threading.Thread(target=self.server.shutdown, daemon=True).start()
                return
            else:
                try:
                    reply = json.dumps(_handle_plant_message(controller, msg))
                except (KeyError, ValueError) as exc:
                    reply = NegotiationResponse(ERROR, message=str(exc)).to_json()
            self.wfile.write(reply.encode() + b"\n")
            self.wfile.flush()


class SubsystemServer(socketserver.ThreadingTCPServer):
    """Serves one controller; requests on a connection are handled in order."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, controller, address=("127.0.0.1", 0)):
        self.controller = controller
        super().__init__(address, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def serve_subsystem(controller, address=("127.0.0.1", 0), ready=None) -> None:
    """Blocking server loop; ``ready`` (a callable) receives the bound address."""
    with SubsystemServer(controller, address) as server:
        if ready is not None:
            ready(server.address)
        server.serve_forever()


class RemoteSubsystem:
    """Client-side stand-in for a subsystem controller reached over TCP."""

    def __init__(self, address: str, timeout: float = 60.0):
        self.address = address
        self._sock = socket.create_connection(parse_address(address), timeout=timeout)
        self._rfile = self._sock.makefile("rb")

    def _call(self, line: str) -> str:
        self._sock.sendall(line.encode() + b"\n")
        reply = self._rfile.readline()
        if not reply:
            raise ConnectionError(f"subsystem at {self.address} closed the connection")
        return reply.decode()

    def _plant(self, **msg) -> dict:
        reply = json.loads(self._call(json.dumps(msg)))
        if reply.get("type") != "ok":
            raise RuntimeError(reply.get("message", "subsystem error"))
        return reply

    def serve(self, request: NegotiationRequest) -> NegotiationResponse:
        return NegotiationResponse.from_json(self._call(request.to_json()))

    def measure(self, x, step=None) -> None:
        self._plant(type="measure", x=np.asarray(x, float).tolist(), step=step)

    @property
    def committed(self):
        u = self._plant(type="actuate")["u"]
        return None if u is None else np.asarray(u, dtype=float)

    def describe(self) -> dict:
        d = self._plant(type="describe")
        d.pop("type")
        return d

    @property
    def N(self) -> int:
        return int(self.describe()["N"])

    def coupling_sensitivity(self) -> np.ndarray:
        return np.asarray(self._plant(type="sensitivity")["Mv"], dtype=float)

    def set_central(self, cc: CentralCostConfig) -> None:
        self._plant(type="set_central", Qc=cc.Qc.tolist(), Rc=cc.Rc.tolist(), q=int(cc.q),
                    r_d=np.asarray(cc.r_d, float).tolist())

    def shutdown(self) -> None:
        try:
            self._call(json.dumps({"type": "shutdown"}))
        finally:
            self.close()

    def close(self) -> None:
        self._rfile.close()
        self._sock.close()

    def __repr__(self) -> str:
        return f"RemoteSubsystem({self.address!r})"
