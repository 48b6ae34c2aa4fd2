"""Coordinator: fixed-point negotiation, spectral certification and set-point choice.

The coordinator never sees subsystem states or models.  It exchanges
set-points, coupling profiles and scalar costs through ``serve`` calls on
subsystem handles, and, for certification only, the condensed coupling
sensitivity matrices the subsystems publish.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import GridTooSmall, NonFinite, NotPositiveDefinite, RankDeficient
from .protocol import ACK, COMMIT, ERROR, NEGOTIATE, REPLY, NegotiationRequest

DIVERGENCE_SENTINEL = 1e9


class ProtocolError(RuntimeError):
    """A subsystem answered with an error message or an unexpected reply."""


@dataclass
class CoordinatorConfig:
    beta: float = 0.5
    tol: float = 1e-5
    max_iter: int = 400
    delta: float = 1.0
    m: int = 3
    warm_start: bool = True
    random_init: bool = False
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass(frozen=True)
class SubsystemInterface:
    """Signal widths the coordinator needs to talk to one subsystem."""

    N: int
    n_y: int
    n_v_core: int
    n_ext: int = 0
    tracked: tuple = ()

    @property
    def n_r(self) -> int:
        return len(self.tracked)

    @property
    def n_v_in(self) -> int:
        return self.n_v_core + self.n_ext

    @classmethod
    def of(cls, handler) -> "SubsystemInterface":
        d = handler.describe()
        return cls(N=int(d["N"]), n_y=int(d["n_y"]), n_v_core=int(d["n_v_core"]),
                   n_ext=int(d["n_ext"]), tracked=tuple(int(i) for i in d["tracked"]))


@dataclass
class NegotiationOutcome:
    v: tuple
    J_parts: tuple
    error_trace: list
    converged: bool
    iterations: int
    status: str = "converged"
    iterates: list = field(default_factory=list, repr=False)

    @property
    def J(self) -> float:
        return float(sum(self.J_parts))

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    @property
    def final_error(self) -> float:
        return self.error_trace[-1] if self.error_trace else 0.0


def filter_update(v_prev, v_hat, beta: float):
    """Convex blend ``(1 - beta) v_prev + beta v_hat``, element-wise per profile.

    Evaluated as ``v_prev + beta (v_hat - v_prev)`` so that a profile at
    its own fixed point is returned unchanged bit for bit.
    """
    if isinstance(v_prev, np.ndarray):
        v_prev, v_hat = np.asarray(v_prev, float), np.asarray(v_hat, float)
        if v_prev.shape != v_hat.shape:
            raise ValueError(f"shape mismatch {v_prev.shape} vs {v_hat.shape}")
        if beta == 1.0:
            return v_hat.copy()
        return v_prev + beta * (v_hat - v_prev)
    if len(v_prev) != len(v_hat):
        raise ValueError("profile count mismatch")
    return tuple(filter_update(np.asarray(a, float), np.asarray(b, float), beta)
                 for a, b in zip(v_prev, v_hat))


def _split(r, interfaces):
    r = np.asarray(r, dtype=float).reshape(-1)
    sizes = [it.n_r for it in interfaces]
    if r.size != sum(sizes):
        raise ValueError(f"set-point length {r.size}, expected {sum(sizes)}")
    return np.split(r, np.cumsum(sizes)[:-1])


def _growth_rate(trace, window=100):
    """Geometric growth per iteration estimated from the tail of ``trace``."""
    n = len(trace)
    w = min(window, n // 2)
    if w < 5:
        return 0.0
    head = max(trace[n - w - 5:n - w])
    tail = max(trace[n - 5:])
    if head <= 0:
        return math.inf if tail > 0 else 0.0
    return (tail / head) ** (1.0 / w)


def _ask(handle, request):
    reply = handle.serve(request)
    if reply.type == ERROR:
        raise ProtocolError(reply.message)
    return reply


def fixed_point_solve(handles, r, v0, cfg: CoordinatorConfig, interfaces=None,
                      r_d=None, ext=None, step: int = 0, keep_iterates: bool = False):
    """Filtered fixed-point negotiation at auxiliary set-point ``r``.

    ``v0`` is the pair of initial presumed coupling profiles restricted to
    partner-produced channels (shapes ``(N, n_v_core)``); ``ext`` the
    operator-driven channels, held fixed.  Stops when the max-norm change
    between successive filtered iterates falls below ``cfg.tol``.
    """
    if interfaces is None:
        interfaces = [SubsystemInterface.of(h) for h in handles]
    r_parts = _split(r, interfaces)
    r_d = [None, None] if r_d is None else r_d
    ext = ext or [np.zeros((it.N, it.n_ext)) for it in interfaces]
    v = [np.asarray(p, dtype=float).reshape(it.N, it.n_v_core) for p, it in zip(v0, interfaces)]
    trace, iterates = [], []
    if keep_iterates:
        iterates.append(tuple(p.copy() for p in v))
    status = "stalled"
    J_parts = (0.0, 0.0)
    sigma = 0
    for sigma in range(cfg.max_iter):
        replies = [
            _ask(h, NegotiationRequest(NEGOTIATE, step, sigma, r=rs, r_d=rd,
                                       v=np.hstack([vs, es])))
            for h, rs, rd, vs, es in zip(handles, r_parts, r_d, v, ext)
        ]
        if any(rep.type != REPLY for rep in replies):
            raise ProtocolError("unexpected reply type")
        J_parts = tuple(rep.cost for rep in replies)
        # subsystem 1 emits subsystem 2's input and vice versa
        v_hat = (np.asarray(replies[1].v_hat).reshape(v[0].shape),
                 np.asarray(replies[0].v_hat).reshape(v[1].shape))
        v_new = filter_update(tuple(v), v_hat, cfg.beta)
        err = max(float(np.max(np.abs(a - b), initial=0.0)) for a, b in zip(v_new, v))
        v = list(v_new)
        trace.append(err)
        if keep_iterates:
            iterates.append(tuple(p.copy() for p in v))
        if not math.isfinite(err) or err > DIVERGENCE_SENTINEL:
            status = "diverged"
            break
        if err <= cfg.tol:
            status = "converged"
            break
    else:
        if _growth_rate(trace) >= 1.0:
            status = "diverged"
    return NegotiationOutcome(
        v=tuple(v), J_parts=J_parts, error_trace=trace,
        converged=status == "converged", iterations=sigma + 1, status=status,
        iterates=iterates,
    )


def assemble_iteration_matrix(Mv1, Mv2, beta: float) -> np.ndarray:
    """``Z(beta) = (1 - beta) I + beta [[0, Mv2], [Mv1, 0]]``.

    ``Mv1`` maps subsystem 1's presumed input to what it emits (subsystem
    2's input); ``Mv2`` the converse.
    """
    Mv1 = np.atleast_2d(np.asarray(Mv1, dtype=float))
    Mv2 = np.atleast_2d(np.asarray(Mv2, dtype=float))
    n1, n2 = Mv2.shape[0], Mv1.shape[0]
    if Mv1.shape != (n2, n1) or Mv2.shape != (n1, n2):
        raise ValueError(f"incompatible blocks {Mv1.shape} and {Mv2.shape}")
    Mbar = np.block([[np.zeros((n1, n1)), Mv2], [Mv1, np.zeros((n2, n2))]])
    return (1.0 - beta) * np.eye(n1 + n2) + beta * Mbar


def spectral_radius(Z) -> float:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[0] != Z.shape[1]:
        raise ValueError("matrix must be square")
    if not np.all(np.isfinite(Z)):
        raise NonFinite("matrix has non-finite entries")
    if Z.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(Z))))


@dataclass
class CertificationReport:
    betas: list
    rhos: list
    recommended_beta: float | None

    @property
    def certified(self) -> bool:
        return self.recommended_beta is not None

    def rho_at(self, beta: float) -> float:
        return self.rhos[self.betas.index(beta)]


def default_beta_grid(step: float = 0.05) -> list:
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(n + 1)]


def certify_convergence(Mv1, Mv2, betas=None, method: str = "spectrum") -> CertificationReport:
    """Spectral radius of ``Z(beta)`` over a grid of filter coefficients.

    ``method="spectrum"`` diagonalises the coupling operator once and maps
    its eigenvalues (``lambda(Z) = 1 - beta + beta lambda``); ``"direct"``
    assembles ``Z(beta)`` for every grid value.
    """
    betas = default_beta_grid() if betas is None else [float(b) for b in betas]
    if method == "spectrum":
        Mbar = assemble_iteration_matrix(Mv1, Mv2, 1.0)
        lam = np.linalg.eigvals(Mbar) if Mbar.size else np.zeros(0)
        rhos = [float(np.max(np.abs(1.0 - b + b * lam), initial=abs(1.0 - b))) for b in betas]
    elif method == "direct":
        rhos = [spectral_radius(assemble_iteration_matrix(Mv1, Mv2, b)) for b in betas]
    else:
        raise ValueError(f"unknown method {method!r}")
    candidates = [(rho, b) for b, rho in zip(betas, rhos) if b > 0 and rho < 1.0]
    recommended = min(candidates)[1] if candidates else None
    return CertificationReport(betas=betas, rhos=rhos, recommended_beta=recommended)


def min_grid_nodes(n_r: int) -> int:
    return (n_r + 1) * (n_r + 2) // 2


def grid_offsets(n_r: int, m: int) -> np.ndarray:
    """Cartesian product of ``m`` offsets per axis in [-1, 1].

    The axis is built from its non-negative half so that every node's
    mirror image is exactly representable: ``-offsets[j] == offsets[-1 - j]``.
    """
    if m < 3 or m % 2 == 0:
        raise GridTooSmall(f"m must be odd and >= 3 so the grid contains r_d (got {m})")
    if m ** n_r < min_grid_nodes(n_r):
        raise GridTooSmall(f"{m}^{n_r} nodes < {min_grid_nodes(n_r)} needed for a quadratic fit")
    half = np.linspace(0.0, 1.0, (m + 1) // 2)
    axis = np.concatenate([-half[:0:-1], half])
    return np.array(list(itertools.product(axis, repeat=n_r))).reshape(-1, n_r)


def build_setpoint_grid(r_d, delta: float, m: int) -> np.ndarray:
    """Full Cartesian grid ``r_d + g * delta`` with ``m`` offsets per axis in [-1, 1]."""
    r_d = np.atleast_1d(np.asarray(r_d, dtype=float))
    return r_d + delta * grid_offsets(r_d.size, m)


@dataclass
class QuadraticFit:
    """``J(r) ~ 0.5 r'Qr + f'r + c`` with RMS and relative residuals."""

    Q: np.ndarray
    f: np.ndarray
    c: float
    residual: float
    relative_residual: float

    def __call__(self, r) -> float:
        r = np.asarray(r, dtype=float)
        return float(0.5 * r @ self.Q @ r + self.f @ r + self.c)

    def scaled(self, s: float) -> "QuadraticFit":
        return QuadraticFit(s * self.Q, s * self.f, s * self.c, s * self.residual,
                            self.relative_residual)

    def in_absolute(self, center, delta: float) -> "QuadraticFit":
        """Re-express a fit in offsets ``g`` as a fit in ``r = center + delta * g``."""
        center = np.asarray(center, dtype=float)
        Q = self.Q / delta ** 2
        g = self.f / delta
        f = g - Q @ center
        c = self.c - g @ center + 0.5 * center @ Q @ center
        return QuadraticFit(Q, f, float(c), self.residual, self.relative_residual)


def _mirror_index(z):
    """Permutation mapping each row of ``z`` to the row equal to its negation, or None."""
    where = {tuple(row): i for i, row in enumerate(z)}
    perm = [where.get(tuple(-row)) for row in z]
    return None if any(p is None for p in perm) else np.array(perm)


def fit_quadratic(nodes, J_values) -> QuadraticFit:
    """Least-squares quadratic through the sampled costs.

    The regression runs in coordinates centred on the bounding box of the
    nodes.  When the node set is symmetric about that centre the odd
    (linear) and even columns are orthogonal, so the two parts are fitted
    separately; this is the same least-squares solution, and a cost that
    is exactly even yields linear terms that are exactly zero.
    """
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    J = np.asarray(J_values, dtype=float).reshape(-1)
    n, n_r = nodes.shape
    if n != J.size:
        raise ValueError("nodes and values differ in count")
    center = 0.5 * (nodes.min(axis=0) + nodes.max(axis=0))
    scale = float(np.max(np.abs(nodes - center))) or 1.0
    z = (nodes - center) / scale
    pairs = [(i, j) for i in range(n_r) for j in range(i, n_r)]
    even = np.column_stack([z[:, i] * z[:, j] for i, j in pairs] + [np.ones(n)])
    odd = z.copy()
    mirror = _mirror_index(z)
    if mirror is None:
        Phi = np.hstack([even, odd])
        coef, _, rank, _ = np.linalg.lstsq(Phi, J, rcond=None)
        if rank < Phi.shape[1]:
            raise RankDeficient(f"regression rank {rank} < {Phi.shape[1]} unknowns")
        a_even, a_odd = coef[:even.shape[1]], coef[even.shape[1]:]
    else:
        a_even, _, rank_e, _ = np.linalg.lstsq(even, 0.5 * (J + J[mirror]), rcond=None)
        a_odd, _, rank_o, _ = np.linalg.lstsq(odd, 0.5 * (J - J[mirror]), rcond=None)
        if rank_e + rank_o < even.shape[1] + odd.shape[1]:
            raise RankDeficient(f"regression rank {rank_e + rank_o} < "
                                f"{even.shape[1] + odd.shape[1]} unknowns")
    Qz = np.zeros((n_r, n_r))
    for (i, j), a in zip(pairs, a_even):
        if i == j:
            Qz[i, i] = 2.0 * a
        else:
            Qz[i, j] = Qz[j, i] = a
    resid = even @ a_even + odd @ a_odd - J
    rms = float(np.sqrt(np.mean(resid ** 2)))
    ref = float(np.max(np.abs(J))) if J.size else 0.0
    rel = rms / ref if ref > 0 else (0.0 if rms == 0 else math.inf)
    fit_z = QuadraticFit(Q=Qz, f=a_odd, c=float(a_even[-1]), residual=rms, relative_residual=rel)
    return fit_z.in_absolute(center, scale)


def optimal_setpoint(fit: QuadraticFit, fixed=None) -> np.ndarray:
    """Minimiser of the fitted quadratic, optionally with operator-fixed components.

    ``fixed`` is an iterable of ``(index, value)``; those components are
    returned exactly and the rest solve the reduced linear system.
    """
    Q, f = fit.Q, fit.f
    n = f.size
    fixed = dict(fixed or ())
    r = np.zeros(n)
    idx_fixed = sorted(fixed)
    for i in idx_fixed:
        r[i] = float(fixed[i])
    free = [i for i in range(n) if i not in fixed]
    if not free:
        return r
    Qff = Q[np.ix_(free, free)]
    Qsym = 0.5 * (Qff + Qff.T)
    eig = np.linalg.eigvalsh(Qsym)
    if eig.max() <= 0 or eig.min() <= 1e-10 * eig.max():
        raise NotPositiveDefinite(f"fitted Hessian eigenvalues {eig}")
    rhs = -(f[free] + Q[np.ix_(free, idx_fixed)] @ r[idx_fixed])
    r[free] = np.linalg.solve(Qsym, rhs)
    return r


@dataclass
class StepResult:
    r_opt: np.ndarray
    outcome: NegotiationOutcome
    fit: QuadraticFit | None
    nodes: np.ndarray
    node_costs: np.ndarray
    flags: list
    elapsed: float
    negotiations: int
    iterations: int

    @property
    def fallback(self) -> bool:
        return bool(self.flags)


class Coordinator:
    """Drives one coordination round per sampling instant.

    ``r_d`` holds the central desired outputs per subsystem (all regulated
    outputs); the auxiliary set-point covers each subsystem's tracked
    outputs only.  ``fixed`` holds operator-imposed set-point components as
    ``{index: value}`` into the concatenated auxiliary vector.
    """

    def __init__(self, handles, cfg: CoordinatorConfig, r_d, interfaces=None):
        self.handles = list(handles)
        self.cfg = cfg
        self.interfaces = interfaces or [SubsystemInterface.of(h) for h in self.handles]
        self.r_d = [np.atleast_1d(np.asarray(x, dtype=float)) for x in r_d]
        self.fixed: dict = {}
        self.ext = [np.zeros((it.N, it.n_ext)) for it in self.interfaces]
        self._warm: dict = {}
        self._rng = np.random.default_rng(cfg.seed)

    @property
    def n_r(self) -> int:
        return sum(it.n_r for it in self.interfaces)

    def center(self) -> np.ndarray:
        return np.concatenate([rd[list(it.tracked)] for rd, it in zip(self.r_d, self.interfaces)])

    def reset_warm_start(self) -> None:
        self._warm.clear()

    def initial_profiles(self, key):
        shapes = [(it.N, it.n_v_core) for it in self.interfaces]
        if self.cfg.random_init:
            return tuple(self.cfg.init_scale * self._rng.standard_normal(s) for s in shapes)
        if self.cfg.warm_start and key in self._warm:
            return self._warm[key]
        return tuple(np.zeros(s) for s in shapes)

    @staticmethod
    def _shift(profiles):
        return tuple(np.vstack([p[1:], p[-1:]]) if len(p) else p for p in profiles)

    def negotiate(self, r, key=None, step=0, keep_iterates=False) -> NegotiationOutcome:
        v0 = self.initial_profiles(key)
        out = fixed_point_solve(self.handles, r, v0, self.cfg, self.interfaces,
                                r_d=self.r_d, ext=self.ext, step=step,
                                keep_iterates=keep_iterates)
        if key is not None and out.converged:
            self._warm[key] = self._shift(out.v)
        return out

    def coordinate_step(self, step: int = 0) -> StepResult:
        t0 = time.perf_counter()
        center = self.center()
        delta = self.cfg.delta
        offsets = grid_offsets(center.size, self.cfg.m)
        nodes = center + delta * offsets
        costs = np.empty(len(nodes))
        flags = []
        iters = 0
        for j, node in enumerate(nodes):
            out = self.negotiate(node, key=j, step=step)
            iters += out.iterations
            costs[j] = out.J
            if not out.converged:
                flags.append(f"node {j} {out.status}")
        fit = None
        if flags:
            r_opt = self._fallback(center)
        else:
            # fitting in grid offsets keeps the node set exactly symmetric
            fit_g = fit_quadratic(offsets, costs)
            fit = fit_g.in_absolute(center, delta)
            try:
                g_fixed = {i: (v - center[i]) / delta for i, v in self.fixed.items()}
                r_opt = center + delta * optimal_setpoint(fit_g, g_fixed)
                for i, v in self.fixed.items():
                    r_opt[i] = v
            except NotPositiveDefinite:
                flags.append("fit not positive definite")
                r_opt = self._fallback(center)
        final = self.negotiate(r_opt, key="final", step=step)
        iters += final.iterations
        if not final.converged:
            flags.append(f"final negotiation {final.status}")
        r_parts = _split(r_opt, self.interfaces)
        for h, rs, vs, es in zip(self.handles, r_parts, final.v, self.ext):
            # the partner-produced channels of subsystem s are final.v[s]
            ack = _ask(h, NegotiationRequest(COMMIT, step, final.iterations, r=rs,
                                             v=np.hstack([vs, es])))
            if ack.type != ACK:
                raise ProtocolError("commit not acknowledged")
        return StepResult(
            r_opt=r_opt, outcome=final, fit=fit, nodes=nodes, node_costs=costs,
            flags=flags, elapsed=time.perf_counter() - t0,
            negotiations=len(nodes) + 1, iterations=iters,
        )

    def _fallback(self, center):
        r = center.copy()
        for i, val in self.fixed.items():
            r[i] = val
        return r
