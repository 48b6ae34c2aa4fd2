"""Coordinator/subsystem messages and their line-delimited JSON encoding.

Floats are written with ``repr`` precision by :mod:`json`, which round-trips
IEEE doubles exactly, so in-process and wire runs see identical numbers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

NEGOTIATE = "negotiate"
COMMIT = "commit"
REPLY = "reply"
ACK = "ack"
ERROR = "error"


def _arr(value):
    return None if value is None else np.asarray(value, dtype=float)


def _list(value):
    return None if value is None else np.asarray(value, dtype=float).tolist()


@dataclass
class NegotiationRequest:
    """Coordinator -> subsystem.

    ``negotiate`` carries the auxiliary set-point ``r``, the central target
    ``r_d`` and the presumed coupling profile ``v``.  ``commit`` is the
    end-of-iterations flag; when ``r``/``v`` are given the subsystem
    re-solves at them before recording the first move, otherwise it
    commits its most recent optimum.
    """

    type: str
    step: int = 0
    sigma: int = 0
    r: np.ndarray | None = None
    r_d: np.ndarray | None = None
    v: np.ndarray | None = None

    def to_json(self) -> str:
        return json.dumps({
            "type": self.type, "step": self.step, "sigma": self.sigma,
            "r": _list(self.r), "r_d": _list(self.r_d), "v": _list(self.v),
        })

    @classmethod
    def from_json(cls, line: str) -> "NegotiationRequest":
        d = json.loads(line)
        return cls(type=d["type"], step=int(d.get("step", 0)), sigma=int(d.get("sigma", 0)),
                   r=_arr(d.get("r")), r_d=_arr(d.get("r_d")), v=_arr(d.get("v")))


@dataclass
class NegotiationResponse:
    """Subsystem -> coordinator.

    Only the emitted coupling profile and the scalar central-cost
    contribution leave the subsystem; its state, model and control profile
    stay private.
    """

    type: str
    step: int = 0
    sigma: int = 0
    v_hat: np.ndarray | None = None
    cost: float | None = None
    message: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "type": self.type, "step": self.step, "sigma": self.sigma,
            "v_hat": _list(self.v_hat), "cost": self.cost, "message": self.message,
        })

    @classmethod
    def from_json(cls, line: str) -> "NegotiationResponse":
        d = json.loads(line)
        cost = d.get("cost")
        return cls(type=d["type"], step=int(d.get("step", 0)), sigma=int(d.get("sigma", 0)),
                   v_hat=_arr(d.get("v_hat")), cost=None if cost is None else float(cost),
                   message=d.get("message", ""))


RESPONSE_FIELDS = tuple(f.name for f in fields(NegotiationResponse))
