"""Synthetic plants, including a stand-in for the two-stage cryogenic refrigerator.

The real refrigerator matrices are not public; the surrogate reproduces
its dimensions (10 + 14 states, 2 + 1 actuators, 3 + 3 coupling channels)
and the qualitative feature that matters: a coupling strong enough to
destabilise a decentralized controller.  Operating-point offsets are
arbitrary placeholders.
"""
from __future__ import annotations

import numpy as np

from .model import CoupledPlant, SubsystemModel

EIG_RANGE = (0.5, 0.98)
EV_NORM = 0.5  # per-block spectral norm, so |Ev1| |Ev2| <= 0.25
MATCH_LEAK = 0.1  # unmatched share of the coupling into subsystem 1

CRYO_LABELS = (
    {
        "u": ["CV155", "NCR22_a"], "y": ["Ltb131", "Ttb108"],
        "v_in": ["Ph", "Th", "Pc"], "v_out": ["Mh", "Tc", "Mc"], "w": ["NCR22_w"],
    },
    {
        "u": ["CV156"], "y": ["Ttb130"],
        "v_in": ["Mh", "Tc", "Mc"], "v_out": ["Ph", "Th", "Pc"], "w": ["w2"],
    },
)
# placeholder operating point (not the refrigerator's values)
CRYO_U0 = ([40.0, 30.0], [50.0])
CRYO_Y0 = ([60.0, 5.0], [10.0])


def stable_matrix(rng, n, eig_range=EIG_RANGE):
    """Real matrix with eigenvalues drawn uniformly in ``eig_range``."""
    lam = rng.uniform(*eig_range, size=n)
    Qm, _ = np.linalg.qr(rng.standard_normal((n, n)))
    T = Qm @ np.diag(rng.uniform(0.7, 1.4, size=n))
    return T @ np.diag(lam) @ np.linalg.inv(T)


def _scaled_norm(rng, rows, cols, norm):
    M = rng.standard_normal((rows, cols))
    s = np.linalg.norm(M, 2)
    return M * (norm / s) if s > 0 else M


def random_subsystem(rng, n_x, n_u, n_v_in, n_v_out, gamma=1.0, n_w=1,
                     feedthrough=False, ev_norm=EV_NORM, eig_range=EIG_RANGE,
                     U0=None, Y0=None, labels=None):
    """Random Schur-stable subsystem with square steady-state map (n_y = n_u)."""
    n_y = n_u
    A = stable_matrix(rng, n_x, eig_range)
    B = rng.standard_normal((n_x, n_u)) / np.sqrt(n_x)
    C = rng.standard_normal((n_y, n_x)) / np.sqrt(n_x)
    F = rng.standard_normal((n_x, n_w)) / np.sqrt(n_x)
    G = gamma * rng.standard_normal((n_x, n_v_in)) / np.sqrt(n_x)
    Cv = gamma * rng.standard_normal((n_v_out, n_x)) / np.sqrt(n_x)
    Dv = gamma * 0.1 * rng.standard_normal((n_v_out, n_u))
    Ev = _scaled_norm(rng, n_v_out, n_v_in, ev_norm)
    if feedthrough:
        D = 0.1 * rng.standard_normal((n_y, n_u))
        E = 0.1 * gamma * rng.standard_normal((n_y, n_v_in))
    else:
        D = np.zeros((n_y, n_u))
        E = np.zeros((n_y, n_v_in))
    return SubsystemModel(A=A, B=B, G=G, F=F, C=C, D=D, E=E, Cv=Cv, Dv=Dv, Ev=Ev,
                          U0=U0, Y0=Y0, labels=labels or {})


def make_surrogate_plant(seed: int, coupling_strength: float) -> CoupledPlant:
    """Cryo-surrogate preset: dimensions of the refrigerator's cold zone.

    ``coupling_strength`` (gamma) scales ``G``, ``Cv`` and ``Dv`` of both
    subsystems; ``gamma = 0`` decouples them entirely.

    Subsystem 1's coupling input enters mostly through its actuator
    directions (``G1 = gamma * B1 H``), so its local controller can
    compensate a coupling profile it knows about.  A decentralized
    controller that assumes zero coupling cannot, and for large enough
    gamma the decentralized loop diverges while the negotiation still
    contracts.  The base matrices do not depend on gamma.
    """
    gamma = float(coupling_strength)
    if not np.isfinite(gamma) or gamma < 0:
        raise ValueError("coupling strength must be finite and >= 0")
    rng = np.random.default_rng(seed)
    s1 = random_subsystem(rng, 10, 2, 3, 3, 1.0, U0=CRYO_U0[0], Y0=CRYO_Y0[0],
                          labels=CRYO_LABELS[0])
    s2 = random_subsystem(rng, 14, 1, 3, 3, 1.0, U0=CRYO_U0[1], Y0=CRYO_Y0[1],
                          labels=CRYO_LABELS[1])
    rng = np.random.default_rng([seed, 1])
    models = []
    for index, model in enumerate((s1, s2)):
        fields = _fields(model)
        H = rng.standard_normal((model.n_u, model.n_v_in))
        K = rng.standard_normal((model.n_x, model.n_v_in)) / np.sqrt(model.n_x)
        fields["G"] = gamma * (model.B @ H + MATCH_LEAK * K if index == 0 else K)
        fields["Cv"] = gamma * rng.standard_normal((model.n_v_out, model.n_x)) / np.sqrt(model.n_x)
        fields["Dv"] = gamma * model.Dv
        if index == 1:
            # the heat load only reaches the helium bath (subsystem 1)
            fields["F"] = np.zeros_like(model.F)
        models.append(SubsystemModel(**fields))
    return CoupledPlant(*models, tau=5.0)


def make_random_plant(rng, n_x=(2, 2), n_u=(1, 1), n_v=(1, 1), gamma=1.0,
                      feedthrough=True, ev_norm=EV_NORM) -> CoupledPlant:
    """Small random plant for property tests; ``n_v[s]`` is subsystem s's input width."""
    s1 = random_subsystem(rng, n_x[0], n_u[0], n_v[0], n_v[1], gamma,
                          feedthrough=feedthrough, ev_norm=ev_norm)
    s2 = random_subsystem(rng, n_x[1], n_u[1], n_v[1], n_v[0], gamma,
                          feedthrough=feedthrough, ev_norm=ev_norm)
    return CoupledPlant(s1, s2)


def _fields(model: SubsystemModel) -> dict:
    return {
        name: getattr(model, name)
        for name in ("A", "B", "G", "F", "C", "D", "E", "Cv", "Dv", "Ev",
                     "U0", "Y0", "labels", "tracked", "n_ext")
    }
