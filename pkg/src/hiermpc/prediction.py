"""Horizon lifting of a subsystem model into dense affine maps.

Profiles are ``(N, width)`` arrays; row ``i-1`` holds prediction stage ``i``
(``i = 1..N``).  Stage ``i`` uses move ``u_i`` (the control applied over
``[k+i-1, k+i]``, so ``u_1`` is the move applied in closed loop) and the
coupling input ``v_i`` acting over the same interval::

    x_i  = A x_{i-1} + B u_i + G v_i          (x_0 = x(k))
    y_i  = C x_i + D u_i + E v_i
    vo_i = Cv x_{i-1} + Dv u_i + Ev v_i

``vo_i`` is the coupling value the subsystem emits over ``[k+i-1, k+i]``,
i.e. exactly the ``v_i`` the partner subsystem needs at stage ``i``.  With
this alignment a coherent pair of profiles reproduces the plant's
instantaneous coupling equations sample by sample.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .model import SubsystemModel


def as_profile(data, N: int, width: int, name: str = "profile") -> np.ndarray:
    """Coerce ``data`` (flat or 2-D) to an ``(N, width)`` float array."""
    arr = np.asarray(data, dtype=float)
    if arr.size != N * width:
        raise DimensionError(f"{name}: {arr.size} entries, expected {N}x{width}")
    return arr.reshape(N, width)


@dataclass(frozen=True, eq=False)
class LiftedMaps:
    """Stacked affine maps ``(x0, U, V) -> (X, Y, Vout)`` over the horizon.

    Stacked vectors are stage-major: entry ``(i-1)*width + j`` is component
    ``j`` of stage ``i``.  The coupling-output blocks ``Vx, Vu, Vv`` are the
    ``M^(x), M^(u), M^(v)`` matrices used by the fixed-point analysis.
    """

    N: int
    n_x: int
    n_u: int
    n_v: int
    n_y: int
    n_vo: int
    Xx: np.ndarray
    Xu: np.ndarray
    Xv: np.ndarray
    Yx: np.ndarray
    Yu: np.ndarray
    Yv: np.ndarray
    Vx: np.ndarray
    Vu: np.ndarray
    Vv: np.ndarray

    @property
    def state_map(self):
        return self.Xx, self.Xu, self.Xv

    @property
    def output_map(self):
        return self.Yx, self.Yu, self.Yv

    @property
    def coupling_map(self):
        return self.Vx, self.Vu, self.Vv


def lift_subsystem(model: SubsystemModel, N: int) -> LiftedMaps:
    if N < 1:
        raise ValueError("horizon N must be >= 1")
    A, B, G = model.A, model.B, model.G
    nx, nu, nv = model.n_x, model.n_u, model.n_v_in
    ny, nvo = model.n_y, model.n_v_out

    powers = [np.eye(nx)]
    for _ in range(N):
        powers.append(A @ powers[-1])
    AB = [p @ B for p in powers]
    AG = [p @ G for p in powers]

    Xx = np.vstack(powers[1:]) if nx else np.zeros((0, 0))
    Xu = np.zeros((N * nx, N * nu))
    Xv = np.zeros((N * nx, N * nv))
    for i in range(N):
        for j in range(i + 1):
            Xu[i * nx:(i + 1) * nx, j * nu:(j + 1) * nu] = AB[i - j]
            Xv[i * nx:(i + 1) * nx, j * nv:(j + 1) * nv] = AG[i - j]

    Cbar = np.kron(np.eye(N), model.C)
    Yx = Cbar @ Xx
    Yu = Cbar @ Xu + np.kron(np.eye(N), model.D)
    Yv = Cbar @ Xv + np.kron(np.eye(N), model.E)

    # vo_i reads x_{i-1}: shift the state stack down by one stage, x_0 on top
    def shifted(M, top):
        out = np.zeros_like(M)
        out[:nx] = top
        out[nx:] = M[:-nx] if nx else M[:0]
        return out

    Cvbar = np.kron(np.eye(N), model.Cv)
    Vx = Cvbar @ shifted(Xx, np.eye(nx))
    Vu = Cvbar @ shifted(Xu, 0.0) + np.kron(np.eye(N), model.Dv)
    Vv = Cvbar @ shifted(Xv, 0.0) + np.kron(np.eye(N), model.Ev)

    mats = dict(Xx=Xx, Xu=Xu, Xv=Xv, Yx=Yx, Yu=Yu, Yv=Yv, Vx=Vx, Vu=Vu, Vv=Vv)
    for arr in mats.values():
        arr.setflags(write=False)
    return LiftedMaps(N=N, n_x=nx, n_u=nu, n_v=nv, n_y=ny, n_vo=nvo, **mats)


def _stack_inputs(lifted: LiftedMaps, x0, u_profile, v_profile):
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != lifted.n_x:
        raise DimensionError(f"x0: length {x0.size}, expected {lifted.n_x}")
    U = as_profile(u_profile, lifted.N, lifted.n_u, "u_profile").reshape(-1)
    V = as_profile(v_profile, lifted.N, lifted.n_v, "v_profile").reshape(-1)
    return x0, U, V


def predict_profiles(lifted: LiftedMaps, x0, u_profile, v_profile):
    """Nominal (disturbance-free) state and output profiles."""
    x0, U, V = _stack_inputs(lifted, x0, u_profile, v_profile)
    X = lifted.Xx @ x0 + lifted.Xu @ U + lifted.Xv @ V
    Y = lifted.Yx @ x0 + lifted.Yu @ U + lifted.Yv @ V
    return X.reshape(lifted.N, lifted.n_x), Y.reshape(lifted.N, lifted.n_y)


def coupling_profile_map(lifted: LiftedMaps, x0, u_profile, v_profile) -> np.ndarray:
    """Coupling profile this subsystem would emit to its partner."""
    x0, U, V = _stack_inputs(lifted, x0, u_profile, v_profile)
    Vo = lifted.Vx @ x0 + lifted.Vu @ U + lifted.Vv @ V
    return Vo.reshape(lifted.N, lifted.n_vo)


def simulate_subsystem(model: SubsystemModel, x0, u_profile, v_profile):
    """Step-by-step recursion of the one-step equations (reference path).

    Returns ``(states, outputs, emitted)`` profiles.
    """
    N = len(u_profile)
    x = np.asarray(x0, dtype=float).reshape(-1)
    states, outputs, emitted = [], [], []
    for i in range(N):
        u = np.asarray(u_profile[i], dtype=float).reshape(-1)
        v = np.asarray(v_profile[i], dtype=float).reshape(-1)
        emitted.append(model.Cv @ x + model.Dv @ u + model.Ev @ v)
        x = model.A @ x + model.B @ u + model.G @ v
        states.append(x)
        outputs.append(model.C @ x + model.D @ u + model.E @ v)
    return (
        np.array(states).reshape(N, model.n_x),
        np.array(outputs).reshape(N, model.n_y),
        np.array(emitted).reshape(N, model.n_v_out),
    )
