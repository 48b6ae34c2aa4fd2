"""Acceptance criteria 1 to 10.

Each test prints one line ``criterion N: PASS|FAIL  <measured values>``
straight to the terminal (bypassing output capture) and then asserts the
same condition, so ``pytest tests/test_acceptance.py -v`` shows both.
"""
import functools
import time

import numpy as np
import pytest

from conftest import (
    assembled_recursion, controllers, decoupled, plant_with_rho, random_plant, sensitivities,
)
from hiermpc.config import RunConfig
from hiermpc.coordinator import (
    Coordinator, CoordinatorConfig, certify_convergence, fit_quadratic, fixed_point_solve,
)
from hiermpc.local import local_cost, solve_local_mpc, steady_pair, tail_weights
from hiermpc.model import validate_model
from hiermpc.prediction import coupling_profile_map, predict_profiles
from hiermpc.simulator import (
    Event, HeatPulse, ScenarioScript, apply_handover, run_scenario,
)

TOL = 1e-5


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"
    return emit


@functools.lru_cache(maxsize=None)
def surrogate():
    cfg = RunConfig()
    plant = cfg.build_plant()
    setup = cfg.control_setup(plant)
    handles = controllers_from(plant, setup)
    cert = certify_convergence(*sensitivities(handles), cfg.beta_grid())
    return cfg, plant, setup, cert


def controllers_from(plant, setup):
    from hiermpc.local import SubsystemController

    return [SubsystemController(m, lc, cc, name=f"S{i + 1}")
            for i, (m, lc, cc) in enumerate(zip(plant.subsystems, setup.local, setup.central))]


def coherence_residual(handles, r_parts, outcome):
    gaps = []
    for s, (h, rs) in enumerate(zip(handles, r_parts)):
        g = h.gains
        U = (g.Kx @ h.x + g.Kr @ rs + g.Kv @ outcome.v[s].ravel()).reshape(h.N, g.n_u)
        emitted = coupling_profile_map(h.lifted, h.x, U, outcome.v[s])
        gaps.append(np.max(np.abs(emitted - outcome.v[1 - s])))
    return max(gaps)


# -- 1 --------------------------------------------------------------------------------

def test_criterion_1_rho_at_zero_beta(report):
    cases = [sensitivities(controllers(random_plant(s, g, n_x=(3, 2)), N=6))
             for s, g in zip(range(10), np.linspace(0.0, 3.0, 10))]
    _, plant, setup, _ = surrogate()
    cases.append(sensitivities(controllers_from(plant, setup)))
    t0 = time.perf_counter()
    rhos = [certify_convergence(M1, M2, [0.0], method=m).rhos[0]
            for M1, M2 in cases for m in ("spectrum", "direct")]
    elapsed = time.perf_counter() - t0
    worst = max(abs(r - 1.0) for r in rhos)
    report(1, worst <= 1e-12 and elapsed < 1.0,
           f"max |rho(Z(0)) - 1| = {worst:.1e} over {len(cases)} plants (incl. surrogate), "
           f"{elapsed:.2f} s")


# -- 2 --------------------------------------------------------------------------------

def test_criterion_2_affine_recursion(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, rhos = 0.0, []
    for case in range(20):
        n_x = tuple(int(v) for v in rng.integers(1, 5, size=2))
        n_v = tuple(int(v) for v in rng.integers(1, 3, size=2))
        N = int(rng.integers(2, 9))
        plant = random_plant(case, float(rng.uniform(0.1, 0.8)), n_x=n_x, n_v=n_v)
        handles = controllers(plant, N=N)
        xs = [rng.standard_normal(m.n_x) for m in plant.subsystems]
        for h, x in zip(handles, xs):
            h.measure(x)
        r_parts = [rng.standard_normal(1), rng.standard_normal(1)]
        v0 = tuple(rng.standard_normal((N, m.n_v_in)) for m in plant.subsystems)
        beta = float(rng.uniform(0.2, 1.0))
        rho = certify_convergence(*sensitivities(handles), [beta]).rhos[0]
        if rho > 1.0:
            # keep the 50 iterates bounded so absolute errors stay meaningful
            beta = certify_convergence(*sensitivities(handles)).recommended_beta
            rho = certify_convergence(*sensitivities(handles), [beta]).rhos[0]
        rhos.append(rho)
        out = fixed_point_solve(handles, np.concatenate(r_parts), v0,
                                CoordinatorConfig(beta=beta, tol=1e-300, max_iter=50),
                                keep_iterates=True)
        ref = assembled_recursion(handles, r_parts, xs, v0, beta, 50)
        got = [np.concatenate([np.ravel(p) for p in it]) for it in out.iterates]
        if len(got) < 51:
            # an exact fixed point (zero update) ends the loop early; later iterates repeat it
            assert out.status == "converged" and out.error_trace[-1] == 0.0
            got += [got[-1]] * (51 - len(got))
        assert len(got) == 51
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(got, ref)))
    elapsed = time.perf_counter() - t0
    report(2, worst <= 1e-9 and elapsed < 10.0,
           f"max iterate error {worst:.1e} over 20 plants x 50 iterations "
           f"(rho {min(rhos):.2f} to {max(rhos):.2f}), {elapsed:.2f} s")


# -- 3 and 4 ------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def dichotomy():
    """20 convergent and 10 divergent negotiations on plants with prescribed rho."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(33)
    rows = []
    targets = [("convergent", t) for t in rng.uniform(0.80, 0.95, 20)]
    targets += [("divergent", t) for t in rng.uniform(1.05, 1.5, 10)]
    for seed, (kind, target) in enumerate(targets):
        plant, handles = plant_with_rho(seed, float(target))
        rho = certify_convergence(*sensitivities(handles), [0.5]).rhos[0]
        for h in handles:
            h.measure(rng.standard_normal(h.model.n_x))
        r = rng.standard_normal(2)
        v0 = tuple(rng.standard_normal((6, 1)) for _ in range(2))
        out = fixed_point_solve(handles, r, v0, CoordinatorConfig(beta=0.5, tol=TOL, max_iter=400))
        coherence = coherence_residual(handles, [r[:1], r[1:]], out) if out.converged else None
        rows.append((kind, rho, out, coherence))
    return rows, time.perf_counter() - t0


def test_criterion_3_convergence_dichotomy(report):
    rows, elapsed = dichotomy()
    wrong = [(k, round(rho, 4), o.status) for k, rho, o, _ in rows
             if (k == "convergent") != (o.converged and o.iterations <= 400)
             or (k == "divergent") != (o.status == "diverged")]
    conv = [rho for k, rho, _, _ in rows if k == "convergent"]
    div = [rho for k, rho, _, _ in rows if k == "divergent"]
    ok = (len(rows) >= 30 and not wrong and elapsed < 30.0
          and max(conv) < 0.99 and min(div) > 1.01)
    report(3, ok, f"{len(conv)} plants with rho in [{min(conv):.3f}, {max(conv):.3f}] and "
                  f"{len(div)} with rho in [{min(div):.3f}, {max(div):.3f}]; "
                  f"{len(wrong)} misclassified {wrong}; {elapsed:.1f} s")


def test_criterion_4_coherence(report):
    rows, _ = dichotomy()
    residuals = [c for k, _, o, c in rows if o.converged]
    worst = max(residuals)
    report(4, len(residuals) >= 20 and worst <= 10 * TOL,
           f"max coherence residual {worst:.1e} over {len(residuals)} converged negotiations "
           f"(bound {10 * TOL:.0e})")


# -- 5 --------------------------------------------------------------------------------

def test_criterion_5_quadratic_exactness(report):
    cfg, plant, setup, cert = surrogate()
    beta = cert.recommended_beta
    handles = controllers_from(plant, setup)
    rng = np.random.default_rng(5)
    for h in handles:
        h.measure(0.1 * rng.standard_normal(h.model.n_x))
    r_d = cfg.targets(plant)
    # tight negotiation tolerance so iteration error does not mask the shape of J
    ccfg = CoordinatorConfig(beta=beta, tol=1e-11, max_iter=5000)
    coord = Coordinator(handles, ccfg, r_d)
    res3 = coord.coordinate_step()
    off_grid = coord.center() + rng.uniform(-1.0, 1.0, size=(20, coord.n_r))
    J_off = [coord.negotiate(r).J for r in off_grid]
    joint = fit_quadratic(np.vstack([res3.nodes, off_grid]),
                          np.concatenate([res3.node_costs, J_off]))
    coord5 = Coordinator(handles, CoordinatorConfig(beta=beta, tol=1e-11, max_iter=5000, m=5), r_d)
    res5 = coord5.coordinate_step()
    gap = float(np.max(np.abs(res3.r_opt - res5.r_opt)))
    ok = joint.relative_residual <= 1e-6 and gap <= 1e-6 and not res3.flags and not res5.flags
    report(5, ok, f"27 grid + 20 off-grid points: relative residual {joint.relative_residual:.1e}; "
                  f"|r_opt(m=3) - r_opt(m=5)| = {gap:.1e} (beta {beta:g})")


# -- 6 --------------------------------------------------------------------------------

def centralized_optimum(plant, xs, central, N):
    """Dense least-squares minimum of the summed central cost over both move profiles.

    Built directly from the per-stage plant equations with the coupling
    loop solved exactly at every stage, so every candidate is coherent.
    """
    s1, s2 = plant.subsystems
    nu = (s1.n_u, s2.n_u)
    n_U = N * sum(nu)

    def residual(Uflat):
        U = [Uflat[:N * nu[0]].reshape(N, nu[0]), Uflat[N * nu[0]:].reshape(N, nu[1])]
        x = [np.array(xs[0], float), np.array(xs[1], float)]
        w = tail_weights(N, central[0].q)
        res = []
        for i in range(N):
            # v1 = Cv2 x2 + Dv2 u2 + Ev2 v2 and v2 = Cv1 x1 + Dv1 u1 + Ev1 v1
            c1 = s2.Cv @ x[1] + s2.Dv @ U[1][i]
            c2 = s1.Cv @ x[0] + s1.Dv @ U[0][i]
            n1, n2 = s1.n_v_in, s2.n_v_in
            K = np.block([[np.eye(n1), -s2.Ev], [-s1.Ev, np.eye(n2)]])
            v = np.linalg.solve(K, np.concatenate([c1, c2]))
            v_in = (v[:n1], v[n1:])
            for s, m in enumerate((s1, s2)):
                x[s] = m.A @ x[s] + m.B @ U[s][i] + m.G @ v_in[s]
                y = m.C @ x[s] + m.D @ U[s][i] + m.E @ v_in[s]
                cc = central[s]
                Lq = np.linalg.cholesky(cc.Qc + 1e-300 * np.eye(len(cc.Qc))).T
                res.append(np.sqrt(w[i]) * Lq @ (y - cc.r_d))
                if np.any(cc.Rc):
                    Lr = np.linalg.cholesky(cc.Rc).T
                    res.append(np.sqrt(w[i]) * Lr @ (m.U0 + U[s][i]))
        return np.concatenate(res)

    r0 = residual(np.zeros(n_U))
    L = np.column_stack([residual(e) - r0 for e in np.eye(n_U)])
    U_star, *_ = np.linalg.lstsq(L, -r0, rcond=None)
    J_star = float(np.sum((L @ U_star + r0) ** 2))
    return J_star, lambda U: float(np.sum(residual(U) ** 2))


def hierarchical_cost(plant, handles, r_d, xs):
    for h, x in zip(handles, xs):
        h.measure(x)
    coord = Coordinator(handles, CoordinatorConfig(beta=0.5, tol=1e-13, max_iter=20000), r_d)
    res = coord.coordinate_step()
    assert not res.flags, res.flags
    U = []
    for h, rs, vs in zip(handles, np.split(res.r_opt, [1]), res.outcome.v):
        U.append(solve_local_mpc(h.gains, h.x, rs, vs).ravel())
    return res.outcome.J, np.concatenate(U)


def test_criterion_6_hierarchical_vs_centralized(report):
    N = 5
    rng = np.random.default_rng(6)
    lines, ok = [], True
    for seed in range(3):
        plant = random_plant(seed, 0.5, n_x=(2, 2))
        Qc = [np.eye(1), 2.0 * np.eye(1)]
        Rc = [0.1 * np.eye(1), 0.2 * np.eye(1)]
        r_d = [np.array([0.5]), np.array([-0.4])]
        handles = controllers(plant, N=N, q=2, Qc=Qc, Rc=Rc, r_d=r_d)
        xs = [rng.standard_normal(2), rng.standard_normal(2)]
        J_h, U_h = hierarchical_cost(plant, handles, r_d, xs)
        J_star, J_of = centralized_optimum(plant, xs, [h.central_cfg for h in handles], N)
        ok &= J_h >= J_star - 1e-8 and abs(J_of(U_h) - J_h) <= 1e-8
        lines.append(f"coupled seed {seed}: J(r_opt) {J_h:.6f} >= J* {J_star:.6f}")
    for seed in range(3):
        # decoupled plant with local costs aligned to the central cost at r_d = 0
        plant = decoupled(random_plant(seed, 0.5, n_x=(2, 2)))
        Q = [m.C.T @ m.C for m in plant.subsystems]
        R = [0.3 * np.eye(1), 0.3 * np.eye(1)]
        handles = controllers(plant, N=N, q=0, Q=Q, R=R, Rc=R)
        xs = [rng.standard_normal(2), rng.standard_normal(2)]
        J_h, _ = hierarchical_cost(plant, handles, [np.zeros(1), np.zeros(1)], xs)
        J_star, _ = centralized_optimum(plant, xs, [h.central_cfg for h in handles], N)
        ok &= abs(J_h - J_star) <= 1e-6
        lines.append(f"decoupled seed {seed}: |J(r_opt) - J*| = {abs(J_h - J_star):.1e}")
    report(6, ok, "; ".join(lines))


# -- 7 --------------------------------------------------------------------------------

def test_criterion_7_local_optimality(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for case in range(200):
        n_x = tuple(int(v) for v in rng.integers(1, 5, size=2))
        n_u = tuple(int(v) for v in rng.integers(1, 3, size=2))
        N = int(rng.integers(1, 9))
        plant = random_plant(case, float(rng.uniform(0, 1)), n_x=n_x, n_u=n_u)
        m = plant.s1
        Q = np.diag(rng.uniform(0.1, 10.0, m.n_x))
        R = np.diag(rng.uniform(0.1, 10.0, m.n_u))
        h = controllers(plant, N=N, Q=[Q, np.eye(plant.s2.n_x)], R=[R, np.eye(plant.s2.n_u)])[0]
        x = rng.standard_normal(m.n_x)
        r = rng.standard_normal(m.n_r)
        v = rng.standard_normal((N, m.n_v_in))
        U = solve_local_mpc(h.gains, x, r, v).ravel()

        def J(u, part):
            if part == "all":
                return local_cost(m, h.lifted, h.local_cfg, u.reshape(N, m.n_u), x, r, v)
            x_d, u_d = steady_pair(m, r)
            X, _ = predict_profiles(h.lifted, x, u.reshape(N, m.n_u), v)
            if part == "x":
                return float(np.einsum("ij,jk,ik->", X - x_d, Q, X - x_d))
            du = u.reshape(N, m.n_u) - u_d
            return float(np.einsum("ij,jk,ik->", du, R, du))

        step = 1e-3 * max(1.0, float(np.max(np.abs(U))))
        grads = {}
        for part in ("all", "x", "u"):
            g = np.empty(U.size)
            for i in range(U.size):
                e = np.zeros(U.size)
                e[i] = step
                g[i] = (J(U + e, part) - J(U - e, part)) / (2 * step)
            grads[part] = g
        scale = max(np.max(np.abs(grads["x"])), np.max(np.abs(grads["u"])), 1e-300)
        worst = max(worst, float(np.max(np.abs(grads["all"]))) / scale)
    report(7, worst <= 1e-8,
           f"max |grad J(u_opt)| relative to its state and input parts: {worst:.1e} over 200 cases")


# -- 8 --------------------------------------------------------------------------------

HEAT_PULSES = [HeatPulse(subsystem=1, amplitude=1.0, period=40, duty=0.2, stop=100)]


@pytest.mark.slow
def test_criterion_8_surrogate_closed_loop(report):
    _, plant, setup, _ = surrogate()
    hier = run_scenario(ScenarioScript(duration=200, disturbance=HEAT_PULSES), plant, setup)
    dec = run_scenario(ScenarioScript(duration=200, mode="decentralized", disturbance=HEAT_PULSES),
                       plant, setup)
    y = np.abs(hier.array("y"))
    q = len(y) // 4
    first, last = float(y[:q].max()), float(y[-q:].max())
    times = [rec.negotiation_time for rec in hier.records]
    s1, s2 = plant.subsystems
    shape = (s1.n_x, s2.n_x, s1.n_v_in, s2.n_v_in, setup.local[0].N)
    ok = (hier.verdict == "stable" and len(hier) == 200 and np.isfinite(y).all()
          and last < first and dec.verdict == "diverged" and max(times) < 5.0
          and shape == (10, 14, 3, 3, 100))
    report(8, ok, f"hierarchical {hier.verdict}: max|y| first quarter {first:.3f}, last quarter "
                  f"{last:.3f}; decentralized {dec.verdict} at step {dec.halted_at}; "
                  f"coordination time per step p50 {np.median(times):.2f} s, max {max(times):.2f} s "
                  f"(beta {hier.certification['beta']:g})")


# -- 9 --------------------------------------------------------------------------------

def test_criterion_9_random_initial_profiles(report):
    cfg, plant, setup, cert = surrogate()
    handles = controllers_from(plant, setup)
    rng = np.random.default_rng(9)
    for h in handles:
        h.measure(0.1 * rng.standard_normal(h.model.n_x))
    ccfg = CoordinatorConfig(beta=cert.recommended_beta, tol=TOL, max_iter=400)
    coord = Coordinator(handles, ccfg, cfg.targets(plant))
    iters = []
    for _ in range(50):
        v0 = tuple(rng.standard_normal((h.N, h.model.n_v_in)) for h in handles)
        out = fixed_point_solve(handles, coord.center(), v0, ccfg, r_d=coord.r_d)
        iters.append(out.iterations if out.converged and out.final_error < TOL else None)
    ok = all(i is not None for i in iters)
    done = [i for i in iters if i is not None]
    report(9, ok, f"{len(done)}/50 reached error < 1e-5 within 400 iterations "
                  f"(iterations {min(done)} to {max(done)}, beta {cert.recommended_beta:g})")


# -- 10 -------------------------------------------------------------------------------

def test_criterion_10_handover(report):
    _, plant, setup, _ = surrogate()
    # level 1: fixed set-point component on the hierarchical loop
    fixed_value = 0.123456789
    sc = ScenarioScript(duration=3, disturbance=HEAT_PULSES, events=[
        Event(step=1, kind="fix_setpoint", subsystem=1, index=0, value=fixed_value)])
    log = run_scenario(sc, plant, setup)
    level1 = all(rec.r_opt[0][0] == fixed_value for rec in log.records[1:])
    # level 2: restructure, validate and re-certify
    configs = list(zip(setup.local, setup.central))
    new_plant, handlers, kept, dropped = apply_handover(plant, configs, [(1, 0)])
    valid = validate_model(new_plant).ok
    recert = certify_convergence(*sensitivities(handlers))
    rho_min = min(recert.rhos[1:])
    # twin run: the operator replays what the controller applied
    base = ScenarioScript(duration=60, mode="decentralized", initial_upset=0.05, seed=10)
    ref = run_scenario(base, plant, setup)
    stream = ref.array("u")[15:45, 2].tolist()
    twin = run_scenario(base.model_copy(update={"events": [
        Event(step=15, kind="take_actuator", subsystem=2, index=0, stream=stream),
        Event(step=45, kind="release_actuator", subsystem=2, index=0)]}), plant, setup)
    diff = max(float(np.max(np.abs(ref.array(n) - twin.array(n)))) for n in ("u", "y"))
    handed = any("handover" in n for n in twin.notes)
    ok = level1 and valid and np.isfinite(recert.rhos).all() and diff <= 1e-8 and handed
    report(10, ok, f"level-1 fixed component exact: {level1}; handover plant valid: {valid}, "
                   f"re-certified min rho {rho_min:.4f} (recommended beta "
                   f"{recert.recommended_beta}); twin-run max difference {diff:.1e}")
