import numpy as np
import pytest

from mfmpc import dynamics as dyn
from mfmpc.obstacles import sphere
from mfmpc.ocp import (HfWeights, LfWeights, PhaseConfig, SmoothingConfig,
                       build_pointmass, build_unified)
from mfmpc.solver import QpSolution, SolverOptions, SqpSolver
from conftest import make_quad_params, make_set_params

HF_W = np.array([0, 0.01, 1.0, 30, 30, 30, 10, 0, 0, 10, 10, 10,
                 3, 3, 3, 3, 3e-5, 3e-5, 3e-5, 3e-5], dtype=float)
LF_W = np.array([0, 0.01, 1, 10, 1e-4, 1e-4, 1.08, 1.08, 1.08, 0.1, 0.1, 0.1])


def hf_weights(quad, v_ref=0.0):
    y_ref = np.zeros(20)
    y_ref[6] = v_ref
    y_ref[12:16] = quad.hover_thrust
    return HfWeights(w=HF_W.copy(), y_ref=y_ref)


def lf_weights():
    return LfWeights(w=LF_W.copy(), q_T=np.array([0.0, 0.01, 1.0]))


def pointmass_cfg(N=6, t_lf=0.4, **kw):
    base = dict(M=4, N=N, t_hf=0.04, t_lf=t_lf, variant_f="box",
                variant_omega="box", smoothing=SmoothingConfig(enabled=True))
    base.update(kw)
    return PhaseConfig(**base)


def make_pm_solver(N=6, obstacles=(), opts=None, **cfg_kw):
    quad = make_quad_params()
    sets = make_set_params()
    cfg = pointmass_cfg(N=N, **cfg_kw)
    ocp = build_pointmass(cfg, quad, sets, lf_weights(), list(obstacles))
    return SqpSolver(ocp, opts or SolverOptions())


# ---------------------------------------------------------------------------
# Riccati oracle (independent affine-quadratic LQR recursion)
# ---------------------------------------------------------------------------

def riccati_solve(A, B, c, Qs, qs, Rs, rs, P_T, p_T, x0, N):
    P, p = P_T.copy(), p_T.copy()
    Ks, ks = [None] * N, [None] * N
    for k in reversed(range(N)):
        Qxx = Qs[k] + A.T @ P @ A
        Quu = Rs[k] + B.T @ P @ B
        Qux = B.T @ P @ A
        qx = qs[k] + A.T @ (P @ c + p)
        qu = rs[k] + B.T @ (P @ c + p)
        K = -np.linalg.solve(Quu, Qux)
        kff = -np.linalg.solve(Quu, qu)
        P = Qxx + Qux.T @ K
        p = qx + Qux.T @ kff
        P = 0.5 * (P + P.T)
        Ks[k], ks[k] = K, kff
    xs, us = [x0.copy()], []
    for k in range(N):
        u = Ks[k] @ xs[k] + ks[k]
        us.append(u)
        xs.append(A @ xs[k] + B @ u + c)
    return xs, us


def lqr_oracle(solver, x0):
    """Solve the unconstrained point-mass tracking problem by Riccati."""
    ocp = solver.ocp
    N = ocp.cfg.N
    dt = ocp.cfg.t_lf
    A, B = dyn.lf_discrete_matrices(dt)
    w = ocp.lf_w.w
    Qs, qs, Rs, rs = [], [], [], []
    for k in range(N):
        step = dt * (1 + ocp.cfg.spacing) ** k
        Ak, Bk = dyn.lf_discrete_matrices(step)
        assert ocp.cfg.spacing == 0.0, "oracle assumes uniform steps"
        y_ref = ocp.lf_yref[k]
        Qs.append(2 * step * np.diag(w[:9]))
        qs.append(-2 * step * w[:9] * y_ref[:9])
        Rs.append(2 * step * np.diag(w[9:]))
        rs.append(-2 * step * w[9:] * y_ref[9:])
    P_T = np.zeros((9, 9))
    P_T[:3, :3] = 2 * np.diag(ocp.lf_w.q_T)
    p_T = np.zeros(9)
    p_T[:3] = -2 * ocp.lf_w.q_T * ocp.p_T
    return riccati_solve(A, B, np.zeros(9), Qs, qs, Rs, rs, P_T, p_T, x0, N)


def test_unconstrained_lqr_matches_riccati():
    opts = SolverOptions(levenberg=0.0)
    solver = make_pm_solver(N=10, opts=opts, variant_f="none",
                            variant_omega="none", lf_terminal="none")
    ocp = solver.ocp
    ocp.lf_yref[:, 3] = 4.0          # track 4 m/s in x
    ocp.p_T[:] = np.array([10.0, 1.0, -0.5])
    x0 = dyn.lf_state([1.0, -2.0, 0.5], [0.5, 0.0, -0.2], [0.1, 0.2, 0.0])

    it = solver.cold_start(x0)
    it_new, _, report = solver.rti_step(it, x0)
    xs, us = lqr_oracle(solver, x0)
    for k in range(ocp.cfg.N + 1):
        np.testing.assert_allclose(it_new.states[k], xs[k], atol=1e-8)
    for k in range(ocp.cfg.N):
        np.testing.assert_allclose(it_new.inputs[k], us[k], atol=1e-8)
    assert report.qp_status in ("ok", "regularized")


def test_lqr_single_rti_is_exact_fixed_point():
    opts = SolverOptions(levenberg=0.0)
    solver = make_pm_solver(N=8, opts=opts, variant_f="none",
                            variant_omega="none", lf_terminal="none")
    x0 = dyn.lf_state([0.5, 0.5, 0.0], [1.0, 0.0, 0.0], np.zeros(3))
    it = solver.cold_start(x0)
    it, _, _ = solver.rti_step(it, x0)
    it2, _, report = solver.rti_step(it, x0)
    assert report.step_norm < 1e-6


def test_solve_converged_lqr_single_iteration():
    opts = SolverOptions(levenberg=0.0)
    solver = make_pm_solver(N=8, opts=opts, variant_f="none",
                            variant_omega="none", lf_terminal="none")
    solver.ocp.p_T[:] = np.array([4.0, -2.0, 1.0])
    solver.ocp.lf_w.q_T[:] = np.array([3.0, 3.0, 3.0])
    x0 = dyn.lf_state([2.0, 0.0, 0.0], np.zeros(3), np.zeros(3))
    it = solver.cold_start(x0)
    it, report = solver.solve_converged(it, x0)
    assert report.iterations == 1
    assert report.qp_status == "ok"


# ---------------------------------------------------------------------------
# dense QP oracle (cvxpy) for the constrained point-mass problem
# ---------------------------------------------------------------------------

def dense_pointmass_oracle(solver, x0):
    """Independent dense statement of the box-variant point-mass QP."""
    import cvxpy as cp

    from mfmpc.feasible_sets import accel_box, jerk_box

    ocp = solver.ocp
    opts = solver.opts
    N = ocp.cfg.N
    lower, upper = accel_box(ocp.sets)
    jb = jerk_box(ocp.sets)
    g = dyn.GRAVITY_VEC

    X = cp.Variable((N + 1, 9))
    U = cp.Variable((N, 3))
    S = cp.Variable((N, 12), nonneg=True)   # 6 accel rows + 6 jerk rows
    cost = 0
    cons = [X[0] == x0]
    for k in range(N):
        step = ocp.cfg.t_lf
        A, B = dyn.lf_discrete_matrices(step)
        cons.append(X[k + 1] == A @ X[k] + B @ U[k])
        y = cp.hstack([X[k], U[k]])
        e = y - ocp.lf_yref[k]
        cost += step * cp.sum(cp.multiply(ocp.lf_w.w, cp.square(e)))
        ag = X[k][6:9] + g
        cons += [ag <= upper + S[k][0:3], -ag <= -lower + S[k][3:6]]
        cons += [U[k] <= jb + S[k][6:9], -U[k] <= jb + S[k][9:12]]
        cost += opts.slack_l1 * cp.sum(S[k]) + opts.slack_l2 * cp.sum_squares(S[k])
    cons += [X[N][3:9] == 0]
    e = X[N][0:3] - ocp.p_T
    cost += cp.sum(cp.multiply(ocp.lf_w.q_T, cp.square(e)))
    prob = cp.Problem(cp.Minimize(cost), cons)
    try:
        prob.solve(solver=cp.CLARABEL)
    except (cp.SolverError, Exception):
        prob.solve(solver=cp.ECOS, abstol=1e-10, reltol=1e-10)
    return prob.value, X.value, U.value


def test_constrained_pointmass_matches_dense_qp():
    solver = make_pm_solver(N=3, variant_f="box", variant_omega="box")
    ocp = solver.ocp
    ocp.p_T[:] = np.array([3.0, -1.0, 0.4])
    ocp.lf_w.q_T[:] = np.array([5.0, 5.0, 5.0])
    x0 = dyn.lf_state([0.0, 0.0, 0.0], [6.0, 0.0, 0.0], [0.0, 0.0, 0.0])
    it = solver.cold_start(x0)
    it, report = solver.solve_converged(it, x0, tol=1e-9)
    assert report.qp_status == "ok"
    my_cost = ocp.lf_cost(it.states, it.inputs) + sum(
        solver.opts.slack_l1 * np.sum(s) + solver.opts.slack_l2 * np.sum(s ** 2)
        for s in it.slacks)
    ref_cost, X_ref, _ = dense_pointmass_oracle(solver, x0)
    assert my_cost == pytest.approx(ref_cost, abs=1e-6, rel=1e-6)
    for k in range(ocp.cfg.N + 1):
        np.testing.assert_allclose(it.states[k], X_ref[k], atol=1e-5)


def test_zero_obstacle_zero_reference_from_rest_is_zero():
    solver = make_pm_solver(N=5)
    ocp = solver.ocp
    ocp.p_T[:] = 0.0
    x0 = np.zeros(9)
    it = solver.cold_start(x0)
    it, report = solver.solve_converged(it, x0)
    assert ocp.lf_cost(it.states, it.inputs) == pytest.approx(0.0, abs=1e-10)


# ---------------------------------------------------------------------------
# QP kernel properties
# ---------------------------------------------------------------------------

def test_qp_residuals_on_randomized_structured_suite(rng):
    solver = make_pm_solver(N=12)
    ocp = solver.ocp
    for trial in range(25):
        x0 = dyn.lf_state(rng.normal(scale=2.0, size=3),
                          rng.normal(scale=2.0, size=3),
                          rng.normal(scale=1.0, size=3))
        ocp.p_T[:] = rng.normal(scale=5.0, size=3)
        ocp.set_initial_state(x0)
        it = solver.cold_start(x0)
        for i in range(len(it.states)):
            it.states[i] = it.states[i] + rng.normal(scale=0.5, size=9)
        qp = solver.linearize(it)
        sol = solver.qp_solve(qp)
        assert sol.status == "ok", f"trial {trial}: {sol.status}"
        assert sol.residual <= solver.opts.qp_tol


def test_gauss_newton_blocks_are_psd(rng):
    quad = make_quad_params()
    sets = make_set_params()
    cfg = PhaseConfig(M=4, N=5, t_hf=0.04, t_lf=0.4)
    ocp = build_unified(cfg, quad, sets, hf_weights(quad), lf_weights(),
                        [sphere([2.0, 0.0, 0.0], 0.7)])
    solver = SqpSolver(ocp)
    x0 = dyn.hover_state(quad)
    it = solver.cold_start(x0)
    for i in range(len(it.states)):
        it.states[i] = it.states[i] + rng.normal(scale=0.1, size=it.states[i].shape)
        if ocp.kinds[i] == "hf":
            it.states[i][dyn.HF_Q] = dyn.quat_normalize(it.states[i][dyn.HF_Q])
    qp = solver.linearize(it)
    for Hi in qp.H:
        eig = np.linalg.eigvalsh(0.5 * (Hi + Hi.T))
        assert eig.min() > -1e-10


def test_linear_rows_pass_through_verbatim():
    solver = make_pm_solver(N=4, variant_f="box", variant_omega="polyhedral")
    ocp = solver.ocp
    x0 = np.zeros(9)
    it = solver.cold_start(x0)
    qp = solver.linearize(it)
    from mfmpc.feasible_sets import dodecahedron_halfspaces
    poly = dodecahedron_halfspaces(ocp.sets.jerk_radius)
    r = ocp.rows[0]
    jerk_rows = [i for i, k in enumerate(r.lin_kinds) if k == "lf_set"][6:]
    np.testing.assert_allclose(r.lin_Cu[jerk_rows][:, :3], poly.A)
    np.testing.assert_allclose(r.lin_d[jerk_rows], poly.b)


def test_qp_gradient_matches_fd_of_objective(rng):
    # the assembled QP gradient must be the exact objective gradient
    quad = make_quad_params()
    sets = make_set_params()
    cfg = PhaseConfig(M=3, N=4, t_hf=0.04, t_lf=0.4)
    ocp = build_unified(cfg, quad, sets, hf_weights(quad, v_ref=3.0),
                        lf_weights(), [])
    solver = SqpSolver(ocp, SolverOptions(levenberg=0.0))
    x0 = dyn.hover_state(quad)
    it = solver.cold_start(x0)
    for i in range(len(it.states)):
        noise = rng.normal(scale=0.05, size=it.states[i].shape)
        it.states[i] = it.states[i] + noise
        if ocp.kinds[i] == "hf":
            it.states[i][dyn.HF_Q] = dyn.quat_normalize(it.states[i][dyn.HF_Q])
        if it.inputs[i].size:
            it.inputs[i] = it.inputs[i] + rng.normal(scale=0.05,
                                                     size=it.inputs[i].size)
    qp = solver.linearize(it)

    def objective(states, inputs):
        return ocp.total_cost(states, inputs)

    h = 1e-6
    for node in (0, 2, cfg.M + 1):
        gi = qp.g[node]
        for ci in range(min(4, ocp.nx[node])):
            sp = [s.copy() for s in it.states]
            sm = [s.copy() for s in it.states]
            sp[node][ci] += h
            sm[node][ci] -= h
            fd = (objective(sp, it.inputs) - objective(sm, it.inputs)) / (2 * h)
            assert gi[ci] == pytest.approx(fd, rel=2e-5, abs=2e-5)


def test_infeasible_terminal_is_flagged_not_crashed():
    # one step cannot reach rest from a moving state: contradictory rows
    solver = make_pm_solver(N=1, variant_f="none", variant_omega="none")
    x0 = dyn.lf_state(np.zeros(3), [5.0, 0.0, 0.0], [2.0, 0.0, 0.0])
    it = solver.cold_start(x0)
    it, _, report = solver.rti_step(it, x0)
    assert report.qp_status in ("degraded", "regularized", "failed", "ok")
    it2, report2 = solver.solve_converged(it, x0, max_iter=10)
    assert report2.qp_status in ("degraded", "max_iter", "failed")


def test_rti_failure_reapplies_previous_control(monkeypatch):
    solver = make_pm_solver(N=4)
    x0 = np.zeros(9)
    it = solver.cold_start(x0)
    it.inputs[0][:] = np.array([0.3, -0.1, 0.2])
    prev = it.inputs[0].copy()

    def fake_qp_solve(qp, warm=None):
        n = solver.st.n_z
        return QpSolution(np.full(n, np.nan), np.zeros(solver.st.n_eq),
                          np.zeros(solver.st.n_in), "failed", 1, np.inf)

    monkeypatch.setattr(solver, "qp_solve", fake_qp_solve)
    it_new, u, report = solver.rti_step(it, x0)
    assert report.qp_status == "failed"
    np.testing.assert_array_equal(u, prev)
    assert np.all(np.isfinite(u))


# ---------------------------------------------------------------------------
# shifting
# ---------------------------------------------------------------------------

def test_shift_hover_trajectory_unchanged():
    quad = make_quad_params()
    sets = make_set_params()
    cfg = PhaseConfig(M=4, N=5, t_hf=0.04, t_lf=0.4)
    ocp = build_unified(cfg, quad, sets, hf_weights(quad), lf_weights(), [])
    solver = SqpSolver(ocp)
    it = solver.cold_start(dyn.hover_state(quad, p=(1.0, 2.0, 3.0)))
    shifted = solver.shift(it)
    for a, b in zip(it.states, shifted.states):
        np.testing.assert_array_equal(a, b)


def test_shift_moves_interior_nodes_by_one():
    solver = make_pm_solver(N=5)
    x0 = np.zeros(9)
    it = solver.cold_start(x0)
    for i, s in enumerate(it.states):
        it.states[i] = np.full(9, float(i))
    for i in range(len(it.inputs) - 1):
        it.inputs[i] = np.full(3, float(i))
    shifted = solver.shift(it)
    for i in range(len(it.states) - 1):
        np.testing.assert_array_equal(shifted.states[i], it.states[i + 1])
    np.testing.assert_array_equal(shifted.states[-1], it.states[-1])


def test_warm_start_beats_cold_start_after_shift():
    # constant-velocity tracking: the shifted converged plan stays nearly
    # optimal for the next cycle, so its first QP moves far less than a
    # cold start's (no terminal set, which would move the braking tail
    # every cycle and blur the comparison)
    solver = make_pm_solver(N=8, lf_terminal="none")
    ocp = solver.ocp
    v_ref = 2.0
    horizon = ocp.times[-1] - ocp.times[0]

    def set_refs(t):
        ocp.lf_yref[:, 3] = v_ref
        ocp.p_T[:] = np.array([v_ref * (t + horizon), 0.0, 0.0])

    x = np.zeros(9)
    t = 0.0
    set_refs(t)
    warm = solver.cold_start(x)
    for _ in range(10):
        warm, _, _ = solver.rti_step(warm, x)
    x1 = dyn.lf_step(x, warm.inputs[0], ocp.cfg.t_lf)
    t += ocp.cfg.t_lf
    set_refs(t)
    warm = solver.shift(warm)
    _, _, rep_warm = solver.rti_step(warm, x1)
    cold = solver.cold_start(x1)
    _, _, rep_cold = solver.rti_step(cold, x1)
    assert rep_warm.step_norm < rep_cold.step_norm
