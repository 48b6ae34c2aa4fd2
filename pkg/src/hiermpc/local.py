"""Local (subsystem-side) unconstrained MPC and negotiation handler."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import DimensionError, IllConditionedHessian, SingularSteadyMap
from .model import SubsystemModel
from .prediction import LiftedMaps, as_profile, lift_subsystem, predict_profiles
from .protocol import ACK, COMMIT, ERROR, NEGOTIATE, REPLY, NegotiationRequest, NegotiationResponse

COND_MAX = 1e12


def _psd(M, name, strict=False):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, rtol=1e-12, atol=1e-12):
        raise ValueError(f"{name} must be a symmetric square matrix")
    if M.size:
        lo = np.linalg.eigvalsh(M).min()
        scale = max(1.0, np.abs(M).max())
        if strict and lo <= 0:
            raise ValueError(f"{name} must be positive definite")
        if lo < -1e-12 * scale:
            raise ValueError(f"{name} must be positive semidefinite")
    return M


@dataclass(frozen=True, eq=False)
class LocalMpcConfig:
    """Weights of the stabilising local tracking cost."""

    Q: np.ndarray
    R: np.ndarray
    N: int

    def __post_init__(self):
        object.__setattr__(self, "Q", _psd(self.Q, "Q"))
        object.__setattr__(self, "R", _psd(self.R, "R", strict=True))
        if self.N < 1:
            raise ValueError("N must be >= 1")


@dataclass(frozen=True, eq=False)
class CentralCostConfig:
    """One subsystem's share of the central (economic) cost.

    ``Qc`` weights the regulated outputs against ``r_d``; ``Rc`` weights the
    *total* input ``U0 + u``; stage ``i`` is scaled by ``(i/N)**q``.
    """

    Qc: np.ndarray
    Rc: np.ndarray
    q: int
    r_d: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Qc", _psd(self.Qc, "Qc"))
        object.__setattr__(self, "Rc", _psd(self.Rc, "Rc"))
        object.__setattr__(self, "r_d", np.atleast_1d(np.asarray(self.r_d, dtype=float)))
        if int(self.q) != self.q or self.q < 0:
            raise ValueError("q must be a non-negative integer")

    def with_target(self, r_d) -> "CentralCostConfig":
        return CentralCostConfig(self.Qc, self.Rc, self.q, r_d)


def steady_maps(model: SubsystemModel):
    """Matrices ``(Sx, Su)`` with ``x_d = Sx r`` and ``u_d = Su r``.

    Solves ``x = A x + B u`` and ``r = C_T x + D_T u`` (``T`` = tracked
    outputs) with zero coupling deviation.
    """
    nx, nu = model.n_x, model.n_u
    T = list(model.tracked)
    if len(T) != nu:
        raise SingularSteadyMap(f"{nu} inputs but {len(T)} tracked outputs")
    M = np.block([
        [np.eye(nx) - model.A, -model.B],
        [model.C[T], model.D[T]],
    ])
    if M.size:
        cond = np.linalg.cond(M)
        if not np.isfinite(cond) or cond > COND_MAX:
            raise SingularSteadyMap(f"steady-state block matrix condition number {cond:.3g}")
        rhs = np.vstack([np.zeros((nx, len(T))), np.eye(len(T))])
        S = np.linalg.solve(M, rhs)
    else:
        S = np.zeros((0, 0))
    return S[:nx], S[nx:]


def steady_pair(model: SubsystemModel, r_s):
    Sx, Su = steady_maps(model)
    r_s = np.atleast_1d(np.asarray(r_s, dtype=float))
    if r_s.size != Sx.shape[1]:
        raise DimensionError(f"set-point: length {r_s.size}, expected {Sx.shape[1]}")
    return Sx @ r_s, Su @ r_s


@dataclass(frozen=True, eq=False)
class GainSet:
    """Affine maps ``(x, r, V) -> U_opt`` and the composed coupling/output maps.

    ``Mx, Mr, Mv`` give the emitted coupling profile and ``Yx, Yr, Yv`` the
    predicted outputs, both evaluated at ``U_opt``.
    """

    Kx: np.ndarray
    Kr: np.ndarray
    Kv: np.ndarray
    Mx: np.ndarray
    Mr: np.ndarray
    Mv: np.ndarray
    Yx: np.ndarray
    Yr: np.ndarray
    Yv: np.ndarray
    N: int
    n_u: int
    n_v: int
    n_vo: int
    hessian_condition: float


def compute_mpc_gains(model: SubsystemModel, lifted: LiftedMaps, cfg: LocalMpcConfig) -> GainSet:
    N, nu = lifted.N, lifted.n_u
    Sx, Su = steady_maps(model)
    Qbar = np.kron(np.eye(N), cfg.Q)
    Rbar = np.kron(np.eye(N), cfg.R)
    Tx = np.tile(Sx, (N, 1))
    Tu = np.tile(Su, (N, 1))
    XuQ = lifted.Xu.T @ Qbar
    H = XuQ @ lifted.Xu + Rbar
    H = 0.5 * (H + H.T)
    if nu:
        cond = np.linalg.cond(H)
        if not np.isfinite(cond) or cond > COND_MAX:
            raise IllConditionedHessian(f"condensed Hessian condition number {cond:.3g}")
        factor = linalg.cho_factor(H)
        Kx = -linalg.cho_solve(factor, XuQ @ lifted.Xx)
        Kv = -linalg.cho_solve(factor, XuQ @ lifted.Xv)
        Kr = linalg.cho_solve(factor, XuQ @ Tx + Rbar @ Tu)
    else:
        cond = 1.0
        Kx = np.zeros((0, lifted.n_x))
        Kv = np.zeros((0, N * lifted.n_v))
        Kr = np.zeros((0, Sx.shape[1]))
    return GainSet(
        Kx=Kx, Kr=Kr, Kv=Kv,
        Mx=lifted.Vx + lifted.Vu @ Kx,
        Mr=lifted.Vu @ Kr,
        Mv=lifted.Vv + lifted.Vu @ Kv,
        Yx=lifted.Yx + lifted.Yu @ Kx,
        Yr=lifted.Yu @ Kr,
        Yv=lifted.Yv + lifted.Yu @ Kv,
        N=N, n_u=nu, n_v=lifted.n_v, n_vo=lifted.n_vo,
        hessian_condition=float(cond),
    )


def solve_local_mpc(gains: GainSet, x_s, r_s, v_profile) -> np.ndarray:
    """Optimal move profile ``(N, n_u)`` for the given state, set-point and coupling."""
    V = as_profile(v_profile, gains.N, gains.n_v, "v_profile").reshape(-1)
    x_s = np.asarray(x_s, dtype=float).reshape(-1)
    r_s = np.atleast_1d(np.asarray(r_s, dtype=float))
    if x_s.size != gains.Kx.shape[1] or r_s.size != gains.Kr.shape[1]:
        raise DimensionError("state or set-point width does not match the gains")
    U = gains.Kx @ x_s + gains.Kr @ r_s + gains.Kv @ V
    return U.reshape(gains.N, gains.n_u)


def local_cost(model: SubsystemModel, lifted: LiftedMaps, cfg: LocalMpcConfig,
               u_profile, x_s, r_s, v_profile) -> float:
    """Local tracking cost sum_i |x_i - x_d|_Q^2 + |u_i - u_d|_R^2."""
    x_d, u_d = steady_pair(model, r_s)
    X, _ = predict_profiles(lifted, x_s, u_profile, v_profile)
    U = as_profile(u_profile, lifted.N, lifted.n_u)
    dx = X - x_d
    du = U - u_d
    return float(np.einsum("ij,jk,ik->", dx, cfg.Q, dx) + np.einsum("ij,jk,ik->", du, cfg.R, du))


def tail_weights(N: int, q: int) -> np.ndarray:
    return (np.arange(1, N + 1) / N) ** q


def _central_from_outputs(Y, U, U0, cc: CentralCostConfig) -> float:
    w = tail_weights(len(Y), cc.q)
    dy = Y - cc.r_d
    ut = U + U0
    per_stage = np.einsum("ij,jk,ik->i", dy, cc.Qc, dy) + np.einsum("ij,jk,ik->i", ut, cc.Rc, ut)
    return float(w @ per_stage)


def evaluate_central_contribution(model: SubsystemModel, lifted: LiftedMaps, cc: CentralCostConfig,
                                  u_profile, x_s, v_profile) -> float:
    _, Y = predict_profiles(lifted, x_s, u_profile, v_profile)
    U = as_profile(u_profile, lifted.N, lifted.n_u)
    return _central_from_outputs(Y, U, model.U0, cc)


class SubsystemController:
    """One subsystem's side of the negotiation.

    Holds the private state ``x_s(k)`` (set via :meth:`measure`) and the
    last optimal profile.  Requests are served strictly in order.
    """

    def __init__(self, model: SubsystemModel, local_cfg: LocalMpcConfig,
                 central_cfg: CentralCostConfig, name: str = ""):
        self.model = model
        self.local_cfg = local_cfg
        self.central_cfg = central_cfg
        self.name = name
        self.lifted = lift_subsystem(model, local_cfg.N)
        self.gains = compute_mpc_gains(model, self.lifted, local_cfg)
        self.x = np.zeros(model.n_x)
        self.step = 0
        self.last_u = None
        self.committed = None
        self._w = tail_weights(local_cfg.N, central_cfg.q)

    @property
    def N(self) -> int:
        return self.local_cfg.N

    def measure(self, x_s, step: int | None = None) -> None:
        x_s = np.asarray(x_s, dtype=float).reshape(-1)
        if x_s.size != self.model.n_x:
            raise DimensionError(f"state: length {x_s.size}, expected {self.model.n_x}")
        self.x = x_s
        if step is not None:
            self.step = step

    def set_central(self, central_cfg: CentralCostConfig) -> None:
        self.central_cfg = central_cfg
        self._w = tail_weights(self.N, central_cfg.q)

    def describe(self) -> dict:
        """Signal widths the coordinator may know (no model data)."""
        m = self.model
        return {"N": self.N, "n_y": m.n_y, "n_v_core": m.n_v_in - m.n_ext,
                "n_ext": m.n_ext, "tracked": list(m.tracked)}

    def coupling_sensitivity(self) -> np.ndarray:
        """``Mv`` restricted to partner-produced input channels.

        This condensed matrix is the only static information the
        coordinator needs for convergence certification.
        """
        N, nv, n_ext = self.N, self.model.n_v_in, self.model.n_ext
        keep = [i * nv + j for i in range(N) for j in range(nv - n_ext)]
        return self.gains.Mv[:, keep]

    def _cost(self, U, Y) -> float:
        cc = self.central_cfg
        dy = Y - cc.r_d
        ut = U + self.model.U0
        per_stage = np.einsum("ij,jk,ik->i", dy, cc.Qc, dy)
        if ut.size:
            per_stage = per_stage + np.einsum("ij,jk,ik->i", ut, cc.Rc, ut)
        return float(self._w @ per_stage)

    def _solve(self, r, v):
        g = self.gains
        V = np.asarray(v, dtype=float).reshape(-1)
        U = (g.Kx @ self.x + g.Kr @ r + g.Kv @ V).reshape(self.N, g.n_u)
        Vo = (g.Mx @ self.x + g.Mr @ r + g.Mv @ V).reshape(self.N, g.n_vo)
        Y = (g.Yx @ self.x + g.Yr @ r + g.Yv @ V).reshape(self.N, self.model.n_y)
        return U, Vo, Y

    def serve(self, request: NegotiationRequest) -> NegotiationResponse:
        try:
            if request.type == NEGOTIATE:
                r = self._check(request.r, self.model.n_r, "r")
                if request.r_d is not None:
                    r_d = self._check(request.r_d, self.model.n_y, "r_d")
                    if not np.array_equal(r_d, self.central_cfg.r_d):
                        self.set_central(self.central_cfg.with_target(r_d))
                v = self._check(request.v, self.N * self.model.n_v_in, "v")
                U, Vo, Y = self._solve(r, v)
                self.last_u = U
                return NegotiationResponse(REPLY, request.step, request.sigma, v_hat=Vo,
                                           cost=self._cost(U, Y))
            if request.type == COMMIT:
                if request.r is not None:
                    r = self._check(request.r, self.model.n_r, "r")
                    v = self._check(request.v, self.N * self.model.n_v_in, "v")
                    self.last_u, _, _ = self._solve(r, v)
                if self.last_u is None:
                    return NegotiationResponse(ERROR, request.step, request.sigma,
                                               message="commit before any negotiation")
                self.committed = self.last_u[0].copy()
                return NegotiationResponse(ACK, request.step, request.sigma)
            return NegotiationResponse(ERROR, request.step, request.sigma,
                                       message=f"unknown message type {request.type!r}")
        except DimensionError as exc:
            return NegotiationResponse(ERROR, request.step, request.sigma, message=str(exc))

    @staticmethod
    def _check(value, size, name):
        if value is None:
            raise DimensionError(f"{name}: missing")
        arr = np.asarray(value, dtype=float).reshape(-1)
        if arr.size != size:
            raise DimensionError(f"{name}: {arr.size} entries, expected {size}")
        return arr
