"""Shared builders for small hand-checkable plants and controllers."""
from __future__ import annotations

import numpy as np
import pytest

from hiermpc.local import CentralCostConfig, LocalMpcConfig, SubsystemController
from hiermpc.model import CoupledPlant, SubsystemModel
from hiermpc.coordinator import CoordinatorConfig
from hiermpc.simulator import ControlSetup, HeatPulse
from hiermpc.surrogate import _fields, make_random_plant


def scalar_model(A=0.5, B=1.0, G=1.0, F=0.0, C=1.0, D=0.0, E=0.0,
                 Cv=1.0, Dv=0.0, Ev=0.0, **kw) -> SubsystemModel:
    """One state, one input, one output, one coupling channel each way."""
    m = {k: [[float(v)]] for k, v in dict(A=A, B=B, G=G, F=F, C=C, D=D, E=E,
                                         Cv=Cv, Dv=Dv, Ev=Ev).items()}
    return SubsystemModel(**m, **kw)


def scalar_plant(**kw) -> CoupledPlant:
    return CoupledPlant(scalar_model(**kw), scalar_model(**kw))


def controllers(plant, N=5, q=0, Q=None, R=None, Qc=None, Rc=None, r_d=None):
    """Identity-weighted controllers unless weights are given (per subsystem lists)."""
    out = []
    for i, m in enumerate(plant.subsystems):
        lc = LocalMpcConfig(np.eye(m.n_x) if Q is None else Q[i],
                            np.eye(m.n_u) if R is None else R[i], N)
        cc = CentralCostConfig(np.eye(m.n_y) if Qc is None else Qc[i],
                               np.zeros((m.n_u, m.n_u)) if Rc is None else Rc[i], q,
                               np.zeros(m.n_y) if r_d is None else r_d[i])
        out.append(SubsystemController(m, lc, cc, name=f"S{i + 1}"))
    return out


def random_plant(seed, gamma=0.5, n_x=(2, 2), n_u=(1, 1), n_v=(1, 1), feedthrough=True):
    return make_random_plant(np.random.default_rng(seed), n_x=n_x, n_u=n_u, n_v=n_v,
                             gamma=gamma, feedthrough=feedthrough)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sensitivities(handles):
    return handles[0].coupling_sensitivity(), handles[1].coupling_sensitivity()


def rho_of(handles, beta):
    from hiermpc.coordinator import certify_convergence

    return certify_convergence(*sensitivities(handles), [beta]).rhos[0]


def plant_with_rho(seed, target, beta=0.5, N=6, n_x=(3, 2), iters=40):
    """Random plant whose coupling strength is bisected until rho(Z(beta)) = target.

    rho is continuous in the coupling scale gamma and small at gamma = 0,
    so a bracket is found by doubling and then narrowed.
    """
    def build(g):
        p = random_plant(seed, g, n_x=n_x)
        return p, controllers(p, N=N)

    lo, hi = 0.0, 1.0
    while rho_of(build(hi)[1], beta) < target:
        lo, hi = hi, 2 * hi
        if hi > 1e3:
            raise RuntimeError("target spectral radius not reachable")
    if rho_of(build(lo)[1], beta) >= target:
        raise RuntimeError("target below the uncoupled spectral radius")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if rho_of(build(mid)[1], beta) < target:
            lo = mid
        else:
            hi = mid
    # stay on the requested side of the target
    g = lo if target < 1 else hi
    return build(g)


def assembled_recursion(handles, r_parts, x_parts, v0, beta, n_iter):
    """Iterates of v <- Z v + beta (Mr r + Mx x) built from the condensed gains."""
    from hiermpc.coordinator import assemble_iteration_matrix

    Mv1, Mv2 = sensitivities(handles)
    Z = assemble_iteration_matrix(Mv1, Mv2, beta)
    g1, g2 = handles[0].gains, handles[1].gains
    # subsystem 1's emission is subsystem 2's input, so it fills the second block
    drive = np.concatenate([g2.Mx @ x_parts[1] + g2.Mr @ r_parts[1],
                            g1.Mx @ x_parts[0] + g1.Mr @ r_parts[0]])
    v = np.concatenate([np.ravel(p) for p in v0])
    out = [v]
    for _ in range(n_iter):
        v = Z @ v + beta * drive
        out.append(v)
    return out


class AffineHandle:
    """Stand-in subsystem whose emitted profile is ``M v + c`` with zero cost."""

    def __init__(self, M, c, N=1, n_v=1):
        self.M = np.atleast_2d(np.asarray(M, dtype=float))
        self.c = np.asarray(c, dtype=float).reshape(-1)
        self.N, self.n_v = N, n_v
        self.committed = None

    def describe(self):
        return {"N": self.N, "n_y": 1, "n_v_core": self.n_v, "n_ext": 0, "tracked": [0]}

    def coupling_sensitivity(self):
        return self.M

    def serve(self, request):
        from hiermpc.protocol import ACK, COMMIT, REPLY, NegotiationResponse

        if request.type == COMMIT:
            self.committed = np.zeros(1)
            return NegotiationResponse(ACK, request.step, request.sigma)
        v = np.asarray(request.v, dtype=float).reshape(-1)
        return NegotiationResponse(REPLY, request.step, request.sigma,
                                   v_hat=self.M @ v + self.c, cost=0.0)


def setup_for(plant, N=6, q=0, r_d=None, Q=None, R=None, Qc=None, Rc=None, beta=None, tol=1e-10):
    local, central = [], []
    for i, m in enumerate(plant.subsystems):
        local.append(LocalMpcConfig(np.eye(m.n_x) if Q is None else Q[i],
                                    np.eye(m.n_u) if R is None else R[i], N))
        central.append(CentralCostConfig(np.eye(m.n_y) if Qc is None else Qc[i],
                                         0.01 * np.eye(m.n_u) if Rc is None else Rc[i], q,
                                         np.zeros(m.n_y) if r_d is None else r_d[i]))
    return ControlSetup(tuple(local), tuple(central),
                        CoordinatorConfig(tol=tol, max_iter=3000), beta=beta)


def decoupled(plant):
    """Same subsystems with every coupling path and feedthrough removed."""
    out = []
    for m in plant.subsystems:
        f = _fields(m)
        for name in ("G", "Cv", "Dv", "E", "D"):
            f[name] = np.zeros_like(f[name])
        out.append(type(m)(**f))
    return CoupledPlant(*out)


def pulses(amplitude=1.0, period=8, duty=0.25, stop=None):
    return [HeatPulse(subsystem=1, amplitude=amplitude, period=period, duty=duty, stop=stop),
            HeatPulse(subsystem=2, amplitude=-0.5 * amplitude, period=period + 3, duty=0.5,
                      stop=stop)]
