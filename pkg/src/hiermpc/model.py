"""Two-subsystem coupled linear plant.

All signals are deviations from the nominal operating point.  Subsystem
``s`` evolves as::

    x_s+ = A_s x_s + B_s u_s + G_s v_s + F_s w_s
    y_s  = C_s x_s + D_s u_s + E_s v_s

and emits the coupling signal consumed by the *other* subsystem::

    v_other = Cv_s x_s + Dv_s u_s + Ev_s v_s

so ``v1`` (input of subsystem 1) is produced by subsystem 2 and vice versa.
A subsystem may also carry trailing *exogenous* coupling channels (an
operator driving a former actuator); those are appended after the channels
produced by the partner subsystem.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import DimensionError, InvalidModel, NonFinite, SingularLoop

LOOP_COND_MAX = 1e12

_MATRICES = ("A", "B", "G", "F", "C", "D", "E", "Cv", "Dv", "Ev")


def _as_matrix(value, rows=None, cols=None) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 1 and arr.size == 0 and rows is not None and cols is not None:
        arr = arr.reshape(rows, cols)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _as_vector(value) -> np.ndarray:
    arr = np.atleast_1d(np.array(value, dtype=float)).reshape(-1)
    arr.setflags(write=False)
    return arr


_SHAPE_KEYS = {
    "A": ("n_x", "n_x"), "B": ("n_x", "n_u"), "G": ("n_x", "n_v_in"), "F": ("n_x", "n_w"),
    "C": ("n_y", "n_x"), "D": ("n_y", "n_u"), "E": ("n_y", "n_v_in"),
    "Cv": ("n_v_out", "n_x"), "Dv": ("n_v_out", "n_u"), "Ev": ("n_v_out", "n_v_in"),
}


def _restore_empty(name, value, data):
    """JSON cannot tell a (0, n) matrix from (0,); use the dimension fields."""
    arr = np.array(value, dtype=float)
    if arr.size == 0 and arr.ndim < 2:
        rows, cols = _SHAPE_KEYS[name]
        if rows in data and cols in data:
            return np.zeros((int(data[rows]), int(data[cols])))
    return arr


def dimension_issues(mats: Mapping[str, Any], tag: str = "") -> list[str]:
    """Return human readable dimension problems for one subsystem.

    ``mats`` maps matrix names (``A``, ``B``, ...) to array-likes.  Names in
    the messages are suffixed with ``tag`` (``"B1"`` for subsystem 1).
    """
    issues = []
    shapes = {}
    for name in _MATRICES:
        if name not in mats:
            issues.append(f"{name}{tag}: missing")
            continue
        arr = _restore_empty(name, mats[name], mats)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            issues.append(f"{name}{tag}: not a matrix (shape {arr.shape})")
            continue
        if not np.all(np.isfinite(arr)):
            issues.append(f"{name}{tag}: non-finite entries")
        shapes[name] = arr.shape
    if "A" not in shapes:
        return issues
    nx, nx2 = shapes["A"]
    if nx != nx2:
        issues.append(f"A{tag}: not square {shapes['A']}")
    ref = {"B": nx, "G": nx, "F": nx}
    for name, rows in ref.items():
        if name in shapes and shapes[name][0] != rows:
            issues.append(f"{name}{tag}: has {shapes[name][0]} rows, expected {rows}")
    nu = shapes["B"][1] if "B" in shapes else None
    nv = shapes["G"][1] if "G" in shapes else None
    ny = shapes["C"][0] if "C" in shapes else None
    nvo = shapes["Cv"][0] if "Cv" in shapes else None
    expect = {
        "C": (ny, nx), "D": (ny, nu), "E": (ny, nv),
        "Cv": (nvo, nx), "Dv": (nvo, nu), "Ev": (nvo, nv),
    }
    for name, (rows, cols) in expect.items():
        if name not in shapes:
            continue
        r, c = shapes[name]
        if rows is not None and r != rows:
            issues.append(f"{name}{tag}: has {r} rows, expected {rows}")
        if cols is not None and c != cols:
            issues.append(f"{name}{tag}: has {c} columns, expected {cols}")
    if "U0" in mats and nu is not None and np.size(mats["U0"]) != nu:
        issues.append(f"U0{tag}: length {np.size(mats['U0'])}, expected {nu}")
    if "Y0" in mats and ny is not None and np.size(mats["Y0"]) != ny:
        issues.append(f"Y0{tag}: length {np.size(mats['Y0'])}, expected {ny}")
    return issues


@dataclass(frozen=True, eq=False)
class SubsystemModel:
    """Linear state, regulated-output and coupling-output maps of one subsystem.

    ``tracked`` lists the regulated outputs the local controller tracks
    (all of them unless an actuator was handed over to an operator); the
    local steady-state map needs ``len(tracked) == n_u``.  ``n_ext`` counts
    trailing coupling-input channels fed by an operator instead of the
    partner subsystem.
    """

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    F: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    Cv: np.ndarray
    Dv: np.ndarray
    Ev: np.ndarray
    U0: np.ndarray | None = None
    Y0: np.ndarray | None = None
    labels: dict = field(default_factory=dict)
    tracked: tuple | None = None
    n_ext: int = 0

    def __post_init__(self):
        raw = {name: getattr(self, name) for name in _MATRICES}
        issues = dimension_issues(raw)
        if issues:
            raise DimensionError("; ".join(issues))
        nx = np.shape(np.atleast_2d(raw["A"]))[0]
        for name in _MATRICES:
            object.__setattr__(self, name, _as_matrix(raw[name]))
        nu, ny = self.B.shape[1], self.C.shape[0]
        object.__setattr__(self, "U0", _as_vector(np.zeros(nu) if self.U0 is None else self.U0))
        object.__setattr__(self, "Y0", _as_vector(np.zeros(ny) if self.Y0 is None else self.Y0))
        if self.U0.size != nu or self.Y0.size != ny:
            raise DimensionError("U0/Y0 lengths do not match n_u/n_y")
        tracked = tuple(range(ny)) if self.tracked is None else tuple(int(i) for i in self.tracked)
        if any(i < 0 or i >= ny for i in tracked) or len(set(tracked)) != len(tracked):
            raise DimensionError(f"tracked outputs {tracked} out of range for n_y={ny}")
        object.__setattr__(self, "tracked", tracked)
        if not 0 <= self.n_ext <= self.G.shape[1]:
            raise DimensionError("n_ext exceeds the coupling-input width")
        for name in _MATRICES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFinite(f"{name} has non-finite entries")
        assert self.A.shape == (nx, nx)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @property
    def n_w(self) -> int:
        return self.F.shape[1]

    @property
    def n_v_in(self) -> int:
        """Width of the coupling input, exogenous channels included."""
        return self.G.shape[1]

    @property
    def n_v_out(self) -> int:
        return self.Cv.shape[0]

    @property
    def n_r(self) -> int:
        return len(self.tracked)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name).tolist() for name in _MATRICES}
        out.update(
            n_x=self.n_x, n_u=self.n_u, n_y=self.n_y, n_w=self.n_w,
            n_v_in=self.n_v_in, n_v_out=self.n_v_out,
            U0=self.U0.tolist(), Y0=self.Y0.tolist(), labels=dict(self.labels),
        )
        if self.tracked != tuple(range(self.n_y)):
            out["tracked"] = list(self.tracked)
        if self.n_ext:
            out["n_ext"] = self.n_ext
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SubsystemModel":
        kwargs = {name: _restore_empty(name, data[name], data) for name in _MATRICES}
        return cls(
            **kwargs,
            U0=data.get("U0"),
            Y0=data.get("Y0"),
            labels=dict(data.get("labels", {})),
            tracked=data.get("tracked"),
            n_ext=int(data.get("n_ext", 0)),
        )


@dataclass(frozen=True, eq=False)
class CoupledPlant:
    """Two subsystems wired so that each one's coupling output feeds the other.

    Construction checks the wiring widths only; use :func:`validate_model`
    for the full report (loop conditioning, open-loop spectra).
    """

    s1: SubsystemModel
    s2: SubsystemModel
    tau: float = 5.0

    def __post_init__(self):
        issues = _wiring_issues(self.s1, self.s2)
        if issues:
            raise DimensionError("; ".join(issues))

    @property
    def subsystems(self) -> tuple[SubsystemModel, SubsystemModel]:
        return (self.s1, self.s2)

    def loop_matrix(self) -> np.ndarray:
        """``I - Ev1 @ Ev2`` restricted to the partner-produced channels."""
        e1 = _core_ev(self.s2, self.s1)  # produces v1 from v2
        e2 = _core_ev(self.s1, self.s2)  # produces v2 from v1
        return np.eye(e1.shape[0]) - e1 @ e2

    def to_dict(self) -> dict:
        return {
            "format": "hiermpc-plant",
            "version": 1,
            "tau": self.tau,
            "subsystems": [self.s1.to_dict(), self.s2.to_dict()],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CoupledPlant":
        s1, s2 = (SubsystemModel.from_dict(d) for d in data["subsystems"])
        return cls(s1, s2, tau=float(data.get("tau", 5.0)))


def _core_ev(emitter: SubsystemModel, receiver: SubsystemModel) -> np.ndarray:
    """Columns of ``emitter.Ev`` acting on partner-produced input channels."""
    n_core = emitter.n_v_in - emitter.n_ext
    return emitter.Ev[:, :n_core]


def _wiring_issues(s1: SubsystemModel, s2: SubsystemModel) -> list[str]:
    issues = []
    if s1.n_v_in - s1.n_ext != s2.n_v_out:
        issues.append(
            f"v1 width mismatch: subsystem 1 consumes {s1.n_v_in - s1.n_ext}, "
            f"subsystem 2 emits {s2.n_v_out}"
        )
    if s2.n_v_in - s2.n_ext != s1.n_v_out:
        issues.append(
            f"v2 width mismatch: subsystem 2 consumes {s2.n_v_in - s2.n_ext}, "
            f"subsystem 1 emits {s1.n_v_out}"
        )
    return issues


@dataclass(frozen=True)
class PlantState:
    x1: np.ndarray
    x2: np.ndarray
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x1", _as_vector(self.x1))
        object.__setattr__(self, "x2", _as_vector(self.x2))
        if not (np.all(np.isfinite(self.x1)) and np.all(np.isfinite(self.x2))):
            raise NonFinite("plant state is not finite")

    @classmethod
    def zeros(cls, plant: CoupledPlant) -> "PlantState":
        return cls(np.zeros(plant.s1.n_x), np.zeros(plant.s2.n_x), 0)


def _vec(value, size, name) -> np.ndarray:
    if value is None:
        return np.zeros(size)
    arr = np.atleast_1d(np.asarray(value, dtype=float)).reshape(-1)
    if arr.size != size:
        raise DimensionError(f"{name}: length {arr.size}, expected {size}")
    return arr


def resolve_coupling(plant: CoupledPlant, x: PlantState, u1, u2, ext1=None, ext2=None):
    """Solve the instantaneous coupling equations for ``(v1, v2)``.

    ``v2`` is eliminated and ``(I - Ev1 Ev2) v1 = a1 + Ev1 a2`` solved
    directly.  The returned vectors include any exogenous channels
    (``ext1``/``ext2``) appended at the end.
    """
    s1, s2 = plant.s1, plant.s2
    u1 = _vec(u1, s1.n_u, "u1")
    u2 = _vec(u2, s2.n_u, "u2")
    ext1 = _vec(ext1, s1.n_ext, "ext1")
    ext2 = _vec(ext2, s2.n_ext, "ext2")
    ev1 = _core_ev(s2, s1)
    ev2 = _core_ev(s1, s2)
    a1 = s2.Cv @ x.x2 + s2.Dv @ u2 + s2.Ev[:, ev1.shape[1]:] @ ext2
    a2 = s1.Cv @ x.x1 + s1.Dv @ u1 + s1.Ev[:, ev2.shape[1]:] @ ext1
    loop = np.eye(ev1.shape[0]) - ev1 @ ev2
    if loop.size:
        cond = np.linalg.cond(loop)
        if not np.isfinite(cond) or cond > LOOP_COND_MAX:
            raise SingularLoop(f"coupling loop matrix condition number {cond:.3g}")
        v1 = np.linalg.solve(loop, a1 + ev1 @ a2)
    else:
        v1 = a1
    v2 = a2 + ev2 @ v1
    return np.concatenate([v1, ext1]), np.concatenate([v2, ext2])


def step_plant(plant: CoupledPlant, state: PlantState, u1, u2, w1=None, w2=None,
               ext1=None, ext2=None):
    """Advance the true plant by one sample.

    Returns ``(next_state, y1, y2, v1, v2)`` where outputs and coupling
    signals are those at the *current* sample.  The disturbance only enters
    the state update.
    """
    s1, s2 = plant.s1, plant.s2
    u1 = _vec(u1, s1.n_u, "u1")
    u2 = _vec(u2, s2.n_u, "u2")
    w1 = _vec(w1, s1.n_w, "w1")
    w2 = _vec(w2, s2.n_w, "w2")
    v1, v2 = resolve_coupling(plant, state, u1, u2, ext1, ext2)
    x1n = s1.A @ state.x1 + s1.B @ u1 + s1.G @ v1 + s1.F @ w1
    x2n = s2.A @ state.x2 + s2.B @ u2 + s2.G @ v2 + s2.F @ w2
    y1 = s1.C @ state.x1 + s1.D @ u1 + s1.E @ v1
    y2 = s2.C @ state.x2 + s2.D @ u2 + s2.E @ v2
    # no finiteness check here: the simulator's divergence sentinel handles blow-up
    nxt = object.__new__(PlantState)
    object.__setattr__(nxt, "x1", x1n)
    object.__setattr__(nxt, "x2", x2n)
    object.__setattr__(nxt, "k", state.k + 1)
    return nxt, y1, y2, v1, v2


@dataclass
class ValidationReport:
    issues: list = field(default_factory=list)
    loop_condition: float | None = None
    open_loop_radius: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.issues

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "issues": list(self.issues),
            "loop_condition": self.loop_condition,
            "open_loop_radius": list(self.open_loop_radius),
        }


def validate_model(plant) -> ValidationReport:
    """Check a plant (or a raw plant document) and report problems.

    Open-loop instability of either ``A_s`` is reported but is not an issue.
    """
    report = ValidationReport()
    if isinstance(plant, CoupledPlant):
        subs = [plant.s1, plant.s2]
    else:
        raw = plant.get("subsystems", []) if isinstance(plant, Mapping) else []
        if len(raw) != 2:
            report.issues.append(f"expected 2 subsystems, found {len(raw)}")
            return report
        for i, data in enumerate(raw, start=1):
            report.issues.extend(dimension_issues(data, tag=str(i)))
        if report.issues:
            return report
        try:
            subs = [SubsystemModel.from_dict(d) for d in raw]
        except (DimensionError, NonFinite, KeyError) as exc:
            report.issues.append(str(exc))
            return report
    report.issues.extend(_wiring_issues(*subs))
    report.open_loop_radius = tuple(
        float(np.max(np.abs(np.linalg.eigvals(s.A)))) if s.n_x else 0.0 for s in subs
    )
    if report.issues:
        return report
    for i, s in enumerate(subs, start=1):
        if s.n_r != s.n_u:
            report.issues.append(
                f"subsystem {i}: {s.n_u} inputs but {s.n_r} tracked outputs (steady map not square)"
            )
    ev1 = _core_ev(subs[1], subs[0])
    ev2 = _core_ev(subs[0], subs[1])
    loop = np.eye(ev1.shape[0]) - ev1 @ ev2
    cond = float(np.linalg.cond(loop)) if loop.size else 1.0
    report.loop_condition = cond
    if not np.isfinite(cond) or cond > LOOP_COND_MAX:
        report.issues.append(f"coupling loop ill-conditioned (condition number {cond:.3g})")
    return report


def load_plant(path) -> CoupledPlant:
    """Read a plant JSON document, rejecting it if validation finds issues."""
    data = json.loads(Path(path).read_text())
    report = validate_model(data)
    if not report.ok:
        raise InvalidModel(report.issues)
    return CoupledPlant.from_dict(data)


def save_plant(plant: CoupledPlant, path) -> None:
    Path(path).write_text(json.dumps(plant.to_dict(), indent=1))


def with_subsystem(plant: CoupledPlant, index: int, model: SubsystemModel) -> CoupledPlant:
    """Copy of ``plant`` with subsystem ``index`` (1 or 2) replaced."""
    return replace(plant, **{f"s{index}": model})
