"""Receding-horizon closed loop, scenario scripting and operator handover.

All signals are deviations from the operating point; ``U0``/``Y0`` are
added back only in the log's absolute columns.  Negotiation is treated as
instantaneous within a sample: its wall-clock time is logged but never
delays the applied move.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .coordinator import (
    Coordinator, CoordinatorConfig, NegotiationOutcome, certify_convergence,
)
from .errors import HandoverError, NoConvergentBeta
from .local import CentralCostConfig, LocalMpcConfig, SubsystemController
from .model import CoupledPlant, PlantState, SubsystemModel, step_plant, validate_model
from .protocol import COMMIT, ERROR, NEGOTIATE, NegotiationRequest
from .surrogate import _fields

STATE_SENTINEL = 1e9

VERDICT_CODES = {"stable": 0, "diverged": 2, "negotiation_failure": 3}


# --------------------------------------------------------------------------
# scenario description


class HeatPulse(BaseModel):
    """Periodic rectangular pulse on one disturbance channel.

    ``period`` is counted in samples.  The pulse is on while
    ``(t - start) mod period < duty * period`` and ``start <= t < stop``.
    """

    model_config = ConfigDict(extra="forbid")

    subsystem: Literal[1, 2] = 1
    channel: int = Field(0, ge=0)
    amplitude: float = 0.0
    period: int = Field(1, ge=1)
    duty: float = Field(0.0, ge=0.0, le=1.0)
    start: int = Field(0, ge=0)
    stop: Optional[int] = None


EVENT_KINDS = ("set_rd", "set_weights", "fix_setpoint", "release_setpoint",
               "take_actuator", "release_actuator")


class Event(BaseModel):
    """One scripted change applied at the start of sample ``step``.

    ``set_rd``            subsystem, value (one entry per regulated output)
    ``set_weights``       mode (preset name) or explicit Qc1/Qc2/Rc1/Rc2
    ``fix_setpoint``      subsystem, index (output), value
    ``release_setpoint``  subsystem, index
    ``take_actuator``     subsystem, index (actuator), stream (held at last value)
    ``release_actuator``  subsystem, index
    """

    model_config = ConfigDict(extra="forbid")

    step: int = Field(ge=0)
    kind: Literal["set_rd", "set_weights", "fix_setpoint", "release_setpoint",
                  "take_actuator", "release_actuator"]
    subsystem: Optional[Literal[1, 2]] = None
    index: Optional[int] = Field(None, ge=0)
    value: Optional[float | list[float]] = None
    mode: Optional[str] = None
    Qc1: Optional[list[list[float]]] = None
    Qc2: Optional[list[list[float]]] = None
    Rc1: Optional[list[list[float]]] = None
    Rc2: Optional[list[list[float]]] = None
    stream: Optional[list[float]] = None

    @model_validator(mode="after")
    def _fields_for_kind(self):
        need = {
            "set_rd": ("subsystem", "value"),
            "set_weights": (),
            "fix_setpoint": ("subsystem", "index", "value"),
            "release_setpoint": ("subsystem", "index"),
            "take_actuator": ("subsystem", "index", "stream"),
            "release_actuator": ("subsystem", "index"),
        }[self.kind]
        missing = [name for name in need if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.kind} event at step {self.step} needs {', '.join(missing)}")
        if self.kind == "set_weights" and self.mode is None and all(
                getattr(self, k) is None for k in ("Qc1", "Qc2", "Rc1", "Rc2")):
            raise ValueError("set_weights needs a mode or explicit matrices")
        if self.kind == "take_actuator" and not self.stream:
            raise ValueError("take_actuator needs a non-empty stream")
        return self


class ScenarioScript(BaseModel):
    model_config = ConfigDict(extra="forbid")

    duration: int = Field(ge=0)
    mode: Literal["hierarchical", "decentralized"] = "hierarchical"
    disturbance: list[HeatPulse] = Field(default_factory=list)
    events: list[Event] = Field(default_factory=list)
    seed: int = 0
    initial_upset: float = 0.0

    @model_validator(mode="after")
    def _check_events(self):
        taken = set()
        for ev in sorted(self.events, key=lambda e: e.step):
            if ev.step >= max(self.duration, 1):
                raise ValueError(f"{ev.kind} event at step {ev.step} is outside the run")
            key = (ev.subsystem, ev.index)
            if ev.kind == "take_actuator":
                if key in taken:
                    raise ValueError(f"actuator {key} handed over twice")
                taken.add(key)
            elif ev.kind == "release_actuator":
                if key not in taken:
                    raise ValueError(f"actuator {key} released but not handed over")
                taken.discard(key)
        return self

    @classmethod
    def load(cls, path) -> "ScenarioScript":
        return cls.model_validate_json(Path(path).read_text())


def heat_pulse(t: int, params: HeatPulse) -> float:
    """Value of one pulse train at sample ``t``."""
    if t < params.start or (params.stop is not None and t >= params.stop):
        return 0.0
    return params.amplitude if (t - params.start) % params.period < params.duty * params.period else 0.0


def disturbance(t: int, pulses, plant: CoupledPlant):
    """``(w1, w2)`` at sample ``t``; pulses on the same channel add up."""
    w = [np.zeros(plant.s1.n_w), np.zeros(plant.s2.n_w)]
    for p in pulses:
        target = w[p.subsystem - 1]
        if p.channel >= target.size:
            raise ValueError(f"subsystem {p.subsystem} has no disturbance channel {p.channel}")
        target[p.channel] += heat_pulse(t, p)
    return w[0], w[1]


# --------------------------------------------------------------------------
# controller set-up and operator handover


@dataclass
class ControlSetup:
    """Full-size controller configuration of both subsystems.

    ``beta=None`` means "use the certified recommendation".
    """

    local: tuple
    central: tuple
    coordinator: CoordinatorConfig = field(default_factory=CoordinatorConfig)
    beta: float | None = None
    beta_grid: list | None = None


def handover_model(model: SubsystemModel, actuator: int) -> tuple[SubsystemModel, int]:
    """Move actuator ``actuator`` of ``model`` into a trailing coupling-input channel.

    The paired tracked output (same position in ``tracked``) is dropped so
    the steady-state map stays square.  Returns the new model and the index
    of the dropped regulated output.
    """
    if not 0 <= actuator < model.n_u:
        raise HandoverError(f"actuator {actuator} does not exist (n_u={model.n_u})")
    keep = [c for c in range(model.n_u) if c != actuator]
    f = _fields(model)
    f["B"] = model.B[:, keep]
    f["D"] = model.D[:, keep]
    f["Dv"] = model.Dv[:, keep]
    f["G"] = np.hstack([model.G, model.B[:, [actuator]]])
    f["E"] = np.hstack([model.E, model.D[:, [actuator]]])
    f["Ev"] = np.hstack([model.Ev, model.Dv[:, [actuator]]])
    f["U0"] = model.U0[keep]
    tracked = list(model.tracked)
    dropped = tracked.pop(actuator) if actuator < len(tracked) else None
    f["tracked"] = tuple(tracked)
    f["n_ext"] = model.n_ext + 1
    labels = dict(model.labels)
    if "u" in labels and len(labels["u"]) == model.n_u:
        names = list(labels["u"])
        taken = names.pop(actuator)
        labels["u"] = names
        labels["v_in"] = list(labels.get("v_in", [])) + [f"operator:{taken}"]
    f["labels"] = labels
    return SubsystemModel(**f), dropped


def reduce_configs(local: LocalMpcConfig, central: CentralCostConfig, keep):
    """Restrict input weights to the actuators in ``keep``."""
    idx = np.ix_(keep, keep)
    return (LocalMpcConfig(local.Q, local.R[idx], local.N),
            CentralCostConfig(central.Qc, central.Rc[idx], central.q, central.r_d))


def apply_handover(plant: CoupledPlant, base_configs, taken):
    """Restructure ``plant`` for the operator-held actuators in ``taken``.

    ``taken`` is an ordered sequence of ``(subsystem, actuator)`` pairs in
    original actuator numbering; the trailing coupling-input channels of
    each subsystem follow that order.  ``base_configs`` holds the full-size
    ``(LocalMpcConfig, CentralCostConfig)`` per subsystem.  Returns the new
    plant, fresh controllers, the kept actuator lists and the dropped
    outputs per subsystem.
    """
    models = list(plant.subsystems)
    kept = [list(range(m.n_u)) for m in models]
    dropped = [[], []]
    seen = set()
    for s, j in taken:
        if (s, j) in seen:
            raise HandoverError(f"actuator {j} of subsystem {s} is already handed over")
        seen.add((s, j))
        if j not in kept[s - 1]:
            raise HandoverError(f"actuator {j} of subsystem {s} does not exist")
        pos = kept[s - 1].index(j)
        models[s - 1], out = handover_model(models[s - 1], pos)
        kept[s - 1].pop(pos)
        dropped[s - 1].append(out)
    new_plant = CoupledPlant(models[0], models[1], tau=plant.tau)
    report = validate_model(new_plant)
    if not report.ok:
        raise HandoverError("restructured plant failed validation: " + "; ".join(report.issues))
    handlers = []
    for i, (model, (lc, cc)) in enumerate(zip(models, base_configs)):
        lc_r, cc_r = reduce_configs(lc, cc, kept[i])
        handlers.append(SubsystemController(model, lc_r, cc_r, name=f"S{i + 1}"))
    return new_plant, handlers, kept, dropped


def certify_handlers(handlers, betas=None):
    return certify_convergence(handlers[0].coupling_sensitivity(),
                               handlers[1].coupling_sensitivity(), betas)


# --------------------------------------------------------------------------
# log


@dataclass
class StepRecord:
    k: int
    u: tuple            # applied deviation per subsystem, original actuator numbering
    y: tuple            # regulated output deviations per subsystem
    r_d: tuple
    r_opt: tuple        # per subsystem, per regulated output (nan where untracked)
    iterations: int
    max_error: float
    converged: bool
    status: str
    negotiation_time: float
    state_norm: float
    flags: list = field(default_factory=list)
    committed_first: tuple = ()


@dataclass
class SimulationLog:
    """Per-step closed-loop record and run verdict."""

    tau: float
    U0: tuple
    Y0: tuple
    mode: str = "hierarchical"
    records: list = field(default_factory=list)
    verdict: str = "stable"
    halted_at: int | None = None
    certification: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    final_state: PlantState | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def columns(self) -> list:
        n_u = [len(u) for u in self.U0]
        n_y = [len(y) for y in self.Y0]
        cols = ["k", "time_s"]
        for kind, sizes in (("u", n_u), ("U", n_u), ("y", n_y), ("Y", n_y),
                            ("rd", n_y), ("ropt", n_y)):
            cols += [f"{kind}{s + 1}_{j + 1}" for s in range(2) for j in range(sizes[s])]
        return cols + ["iterations", "max_error", "converged", "status",
                       "negotiation_ms", "state_norm", "flags"]

    def rows(self):
        for rec in self.records:
            u = np.concatenate(rec.u)
            y = np.concatenate(rec.y)
            yield ([rec.k, rec.k * self.tau]
                   + list(u) + list(u + np.concatenate(self.U0))
                   + list(y) + list(y + np.concatenate(self.Y0))
                   + list(np.concatenate(rec.r_d)) + list(np.concatenate(rec.r_opt))
                   + [rec.iterations, rec.max_error, int(rec.converged), rec.status,
                      1e3 * rec.negotiation_time, rec.state_norm, ";".join(rec.flags)])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns())
            for row in self.rows():
                writer.writerow([_cell(v) for v in row])

    def array(self, name: str) -> np.ndarray:
        """Stacked per-step values of ``u``, ``y``, ``r_d`` or ``r_opt``."""
        return np.array([np.concatenate(getattr(rec, name)) for rec in self.records]).reshape(
            len(self.records), -1)

    def summary(self) -> dict:
        out = {
            "verdict": self.verdict,
            "exit_code": VERDICT_CODES[self.verdict],
            "mode": self.mode,
            "steps": len(self.records),
            "halted_at": self.halted_at,
            "certification": self.certification,
            "notes": list(self.notes),
        }
        if self.records:
            y = np.abs(self.array("y"))
            gap = np.abs(self.array("r_opt") - self.array("r_d"))
            times = np.array([rec.negotiation_time for rec in self.records])
            out["max_abs_y"] = [_finite(v) for v in y.max(axis=0)]
            out["max_abs_ropt_minus_rd"] = [_finite(v) for v in np.nanmax(
                np.where(np.isnan(gap), -np.inf, gap), axis=0)]
            out["max_negotiation_error"] = _finite(max(rec.max_error for rec in self.records))
            out["unconverged_steps"] = sum(not rec.converged for rec in self.records)
            out["total_iterations"] = int(sum(rec.iterations for rec in self.records))
            out["negotiation_time_s"] = {
                "p50": float(np.percentile(times, 50)),
                "p95": float(np.percentile(times, 95)),
                "max": float(times.max()),
            }
        return out

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))


def _cell(v):
    # repr of a Python float round-trips exactly
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _finite(v):
    v = float(v)
    return v if math.isfinite(v) else None


# --------------------------------------------------------------------------
# closed loop


class ClosedLoop:
    """Plant, controllers, coordinator and scripted operator state.

    ``handlers`` may be supplied (e.g. remote subsystems); otherwise local
    controllers are built from ``setup``.  Actuator handover needs local
    controllers because the subsystem model is restructured.
    """

    def __init__(self, plant: CoupledPlant, setup: ControlSetup,
                 mode: str = "hierarchical", handlers=None):
        if mode not in ("hierarchical", "decentralized"):
            raise ValueError(f"unknown mode {mode!r}")
        self.base_plant = plant
        self.plant = plant
        self.setup = setup
        self.mode = mode
        self.base_configs = [(setup.local[i], setup.central[i]) for i in range(2)]
        self.r_d = [np.array(cc.r_d, dtype=float) for cc in setup.central]
        self.remote = handlers is not None
        self.taken: dict = {}           # (s, original actuator) -> (start step, stream)
        self.fixed: dict = {}           # (s, output index) -> value
        self.kept = [list(range(m.n_u)) for m in plant.subsystems]
        self.dropped = [[], []]
        self.certification = None
        self.notes: list = []
        if handlers is None:
            handlers = [SubsystemController(m, lc, cc, name=f"S{i + 1}")
                        for i, (m, (lc, cc)) in enumerate(zip(plant.subsystems, self.base_configs))]
        self.handlers = list(handlers)
        self._build_coordinator()

    # -- configuration -----------------------------------------------------

    def _build_coordinator(self) -> None:
        cfg = self.setup.coordinator
        if self.mode == "hierarchical":
            self.certification = certify_handlers(self.handlers, self.setup.beta_grid)
            if self.setup.beta is None:
                if not self.certification.certified:
                    raise NoConvergentBeta(
                        f"no beta with rho < 1 (min rho {min(self.certification.rhos[1:]):.6g})")
                cfg = replace(cfg, beta=self.certification.recommended_beta)
            else:
                cfg = replace(cfg, beta=float(self.setup.beta))
        self.coordinator = Coordinator(self.handlers, cfg, self.r_d)
        self._sync_fixed()

    def _sync_fixed(self) -> None:
        fixed = {}
        offset = 0
        for s, it in enumerate(self.coordinator.interfaces, start=1):
            for pos, out in enumerate(it.tracked):
                if (s, out) in self.fixed:
                    fixed[offset + pos] = self.fixed[(s, out)]
            offset += it.n_r
        self.coordinator.fixed = fixed

    def _rebuild_after_handover(self, k: int) -> None:
        if self.remote:
            raise HandoverError("actuator handover needs in-process subsystems")
        centrals = [h.central_cfg for h in self.handlers]
        old_kept = self.kept
        self.plant, self.handlers, self.kept, self.dropped = apply_handover(
            self.base_plant, self._current_base_configs(centrals, old_kept), list(self.taken))
        self._build_coordinator()
        cert = self.certification
        self.notes.append(
            f"step {k}: handover {sorted(self.taken)} dropped outputs {self.dropped}; "
            f"recertified beta={self.coordinator.cfg.beta if cert is None else cert.recommended_beta}")

    def _current_base_configs(self, centrals, kept):
        # central weights may have changed since set-up; keep their full-size form
        out = []
        for i, (lc, cc) in enumerate(self.base_configs):
            Rc = np.array(cc.Rc)
            Rc[np.ix_(kept[i], kept[i])] = centrals[i].Rc
            out.append((lc, CentralCostConfig(centrals[i].Qc, Rc, centrals[i].q, self.r_d[i])))
        self.base_configs = out
        return out

    def set_weights(self, weights) -> None:
        """``weights`` = ((Qc1, Rc1), (Qc2, Rc2)) with full-size ``Rc``."""
        for i, (Qc, Rc) in enumerate(weights):
            lc, cc = self.base_configs[i]
            full = CentralCostConfig(np.asarray(Qc, float), np.asarray(Rc, float), cc.q, self.r_d[i])
            self.base_configs[i] = (lc, full)
            keep = self.kept[i]
            reduced = CentralCostConfig(full.Qc, full.Rc[np.ix_(keep, keep)], full.q, self.r_d[i])
            self.handlers[i].set_central(reduced)
        self.coordinator.reset_warm_start()

    def apply_event(self, ev: Event, k: int) -> None:
        s = ev.subsystem
        if ev.kind == "set_rd":
            value = np.atleast_1d(np.asarray(ev.value, dtype=float))
            if value.size != self.r_d[s - 1].size:
                raise ValueError(f"set_rd for subsystem {s}: expected {self.r_d[s - 1].size} values")
            self.r_d[s - 1] = value
            self.coordinator.r_d[s - 1] = value.copy()
        elif ev.kind == "set_weights":
            self.set_weights(_event_weights(ev, self.base_configs))
        elif ev.kind == "fix_setpoint":
            self.fixed[(s, ev.index)] = float(np.asarray(ev.value, dtype=float).reshape(-1)[0])
            self._sync_fixed()
        elif ev.kind == "release_setpoint":
            self.fixed.pop((s, ev.index), None)
            self._sync_fixed()
        elif ev.kind == "take_actuator":
            if (s, ev.index) in self.taken:
                raise HandoverError(f"actuator {ev.index} of subsystem {s} already handed over")
            self.taken[(s, ev.index)] = (k, np.asarray(ev.stream, dtype=float))
            self._rebuild_after_handover(k)
        elif ev.kind == "release_actuator":
            if self.taken.pop((s, ev.index), None) is None:
                raise HandoverError(f"actuator {ev.index} of subsystem {s} is not handed over")
            self._rebuild_after_handover(k)

    # -- operator streams --------------------------------------------------

    def operator_profiles(self, k: int):
        """Operator channel values over the horizon, ``(N, n_ext)`` per subsystem."""
        out = []
        for s, h in enumerate(self.coordinator.interfaces, start=1):
            cols = []
            for (ss, _), (start, stream) in self.taken.items():
                if ss != s:
                    continue
                idx = np.clip(np.arange(k, k + h.N) - start, 0, len(stream) - 1)
                cols.append(stream[idx])
            out.append(np.column_stack(cols) if cols else np.zeros((h.N, 0)))
        return out

    # -- one sample --------------------------------------------------------

    def step(self, state: PlantState, w):
        """Compute and apply the moves of sample ``state.k``.

        Returns ``(next_state, record)``.
        """
        k = state.k
        ext = self.operator_profiles(k)
        for h, x in zip(self.handlers, (state.x1, state.x2)):
            h.measure(x, k)
        t0 = time.perf_counter()
        if self.mode == "hierarchical":
            self.coordinator.ext = ext
            res = self.coordinator.coordinate_step(k)
            out: NegotiationOutcome = res.outcome
            r_parts = np.split(res.r_opt, np.cumsum([it.n_r for it in self.coordinator.interfaces])[:-1])
            iterations, max_error = res.iterations, out.final_error
            converged, status, flags = out.converged and not res.flags, out.status, list(res.flags)
        else:
            r_parts = [rd[list(it.tracked)] for rd, it in zip(self.r_d, self.coordinator.interfaces)]
            for h, it, rs, es in zip(self.handlers, self.coordinator.interfaces, r_parts, ext):
                v = np.hstack([np.zeros((it.N, it.n_v_core)), es])
                for req in (NegotiationRequest(NEGOTIATE, k, 0, r=rs, r_d=None, v=v),
                            NegotiationRequest(COMMIT, k, 0)):
                    reply = h.serve(req)
                    if reply.type == ERROR:
                        raise RuntimeError(f"subsystem {h}: {reply.message}")
            iterations, max_error, converged, status, flags = 0, 0.0, True, "decentralized", []
        elapsed = time.perf_counter() - t0
        moves = [np.asarray(h.committed, dtype=float).reshape(-1) for h in self.handlers]
        current_ext = [e[0] if len(e) else np.zeros(0) for e in ext]
        nxt, y1, y2, _, _ = step_plant(self.plant, state, moves[0], moves[1], w[0], w[1],
                                       current_ext[0], current_ext[1])
        record = StepRecord(
            k=k,
            u=tuple(self._full_moves(moves, current_ext)),
            y=(y1, y2),
            r_d=tuple(rd.copy() for rd in self.r_d),
            r_opt=tuple(self._full_setpoint(r_parts)),
            iterations=iterations, max_error=float(max_error), converged=bool(converged),
            status=status, negotiation_time=elapsed,
            state_norm=float(np.max(np.abs(np.concatenate([nxt.x1, nxt.x2])), initial=0.0)),
            flags=flags, committed_first=tuple(m.copy() for m in moves),
        )
        return nxt, record

    def _full_moves(self, moves, current_ext):
        """Applied inputs in original actuator numbering (operator values included)."""
        out = []
        for s, model in enumerate(self.base_plant.subsystems, start=1):
            u = np.zeros(model.n_u)
            u[self.kept[s - 1]] = moves[s - 1]
            ext_owners = [j for (ss, j) in self.taken if ss == s]
            for pos, j in enumerate(ext_owners):
                u[j] = current_ext[s - 1][pos]
            out.append(u)
        return out

    def _full_setpoint(self, r_parts):
        out = []
        for rs, it, rd in zip(r_parts, self.coordinator.interfaces, self.r_d):
            full = np.full(rd.size, np.nan)
            full[list(it.tracked)] = rs
            out.append(full)
        return out


def _event_weights(ev: Event, base_configs):
    if ev.mode is not None:
        from .presets import central_weights
        return central_weights(ev.mode)
    out = []
    for i, (_, cc) in enumerate(base_configs, start=1):
        Qc = getattr(ev, f"Qc{i}")
        Rc = getattr(ev, f"Rc{i}")
        out.append((cc.Qc if Qc is None else np.asarray(Qc, float),
                    cc.Rc if Rc is None else np.asarray(Rc, float)))
    return out


def initial_state(plant: CoupledPlant, scenario: ScenarioScript) -> PlantState:
    if scenario.initial_upset == 0:
        return PlantState.zeros(plant)
    rng = np.random.default_rng(scenario.seed)
    return PlantState(scenario.initial_upset * rng.standard_normal(plant.s1.n_x),
                      scenario.initial_upset * rng.standard_normal(plant.s2.n_x), 0)


def closed_loop_step(loop: ClosedLoop, scenario: ScenarioScript, state: PlantState):
    """Apply the events scheduled at ``state.k``, then run one sample."""
    for ev in scenario.events:
        if ev.step == state.k:
            loop.apply_event(ev, state.k)
    w = disturbance(state.k, scenario.disturbance, loop.plant)
    return loop.step(state, w)


def run_scenario(scenario: ScenarioScript, plant: CoupledPlant, setup: ControlSetup,
                 handlers=None, state: PlantState | None = None) -> SimulationLog:
    """Run the scripted closed loop; halts early on plant divergence."""
    loop = ClosedLoop(plant, setup, scenario.mode, handlers)
    log = SimulationLog(tau=plant.tau, U0=tuple(m.U0 for m in plant.subsystems),
                        Y0=tuple(m.Y0 for m in plant.subsystems), mode=scenario.mode)
    if loop.certification is not None:
        log.certification = {
            "beta": loop.coordinator.cfg.beta,
            "rho": loop.certification.rho_at(loop.coordinator.cfg.beta)
            if loop.coordinator.cfg.beta in loop.certification.betas else None,
            "recommended_beta": loop.certification.recommended_beta,
        }
    state = initial_state(plant, scenario) if state is None else state
    for _ in range(scenario.duration):
        state, rec = closed_loop_step(loop, scenario, state)
        log.records.append(rec)
        if not math.isfinite(rec.state_norm) or rec.state_norm > STATE_SENTINEL:
            log.verdict = "diverged"
            log.halted_at = rec.k
            break
    if log.verdict == "stable" and any(not rec.converged for rec in log.records):
        log.verdict = "negotiation_failure"
    log.notes.extend(loop.notes)
    log.notes.append("operating-point offsets U0/Y0 of the surrogate are placeholders")
    log.final_state = state
    return log
