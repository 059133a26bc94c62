import json
import math

import numpy as np
import pytest

from mfmpc import dynamics as dyn
from mfmpc.obstacles import SmoothingSchedule, box_obstacle, sphere
from mfmpc.ocp import (HfWeights, LfWeights, PhaseConfig, SmoothingConfig,
                       build_pointmass, build_unified, hf_tracking_vector,
                       transition_map, transition_residual)
from mfmpc.solver import SolverOptions, SqpSolver
from conftest import make_quad_params, make_set_params
from test_solver import HF_W, LF_W, hf_weights, lf_weights


def unified(M=4, N=5, obstacles=(), v_ref=0.0, **kw):
    quad = make_quad_params()
    base = dict(M=M, N=N, t_hf=0.04, t_lf=0.4)
    base.update(kw)
    cfg = PhaseConfig(**base)
    return build_unified(cfg, quad, make_set_params(), hf_weights(quad, v_ref),
                         lf_weights(), list(obstacles))


# ---------------------------------------------------------------------------
# stage costs
# ---------------------------------------------------------------------------

def test_hf_stage_cost_zero_at_reference(quad_params):
    ocp = unified()
    x = dyn.hover_state(quad_params)
    u = np.zeros(4)
    ocp.hf_yref[0] = hf_tracking_vector(x, u, ocp.q_ref)
    assert ocp.hf_stage_cost(0, x, u) == pytest.approx(0.0, abs=1e-14)


def test_hf_stage_cost_single_coordinate(quad_params):
    ocp = unified()
    x = dyn.hover_state(quad_params)
    u = np.zeros(4)
    ocp.hf_yref[0] = hf_tracking_vector(x, u, ocp.q_ref)
    x[2] += 0.7    # z position deviation, weight 1.0
    dt = ocp.cfg.t_hf
    assert ocp.hf_stage_cost(0, x, u) == pytest.approx(dt * 1.0 * 0.7 ** 2)


def test_hf_stage_cost_against_quadratic_oracle(quad_params, rng):
    # independent evaluation of dt*(y-ref)' diag(w) (y-ref) with the
    # constant-velocity weight table
    ocp = unified(v_ref=15.0)
    x = dyn.hover_state(quad_params)
    u = rng.normal(scale=2.0, size=4)
    y = hf_tracking_vector(x, u, ocp.q_ref)
    ref = ocp.hf_yref[1]
    expected = ocp.cfg.t_hf * float(np.sum(HF_W * (y - ref) ** 2))
    assert ocp.hf_stage_cost(1, x, u) == pytest.approx(expected, rel=1e-12)


def test_lf_stage_cost_zero_and_oracle(rng):
    ocp = unified()
    i = ocp.stage_indices("lf")[0]
    assert ocp.lf_stage_cost(i, np.zeros(9), np.zeros(3)) == 0.0
    x = rng.normal(size=9)
    u = rng.normal(size=3)
    y = np.concatenate([x, u])
    expected = ocp.cfg.t_lf * float(np.sum(LF_W * y ** 2))
    assert ocp.lf_stage_cost(i, x, u) == pytest.approx(expected, rel=1e-12)


def test_acceleration_weight_alignment():
    quad = make_quad_params()
    w = LfWeights.aligned(hf_weights(quad), m=0.6)
    np.testing.assert_allclose(w.w[6:9], 1.08)     # m^2 * w_f with the table
    np.testing.assert_allclose(w.w[0:3], HF_W[0:3])
    np.testing.assert_allclose(w.w[3:6], HF_W[6:9])
    # the alignment convention equates the squared total-force magnitude
    # penalty with the acceleration penalty
    a = np.array([3.0, -1.0, 2.0])
    w_f = HF_W[12]
    assert np.sum(w.w[6:9] * a * a) == pytest.approx(w_f * 0.6 ** 2 * a @ a)


def test_lf_terminal_cost_and_residual():
    ocp = unified()
    p_T = np.array([1.0, 2.0, 3.0])
    ocp.p_T[:] = p_T
    x = dyn.lf_state(p_T, np.zeros(3), np.zeros(3))
    assert ocp.terminal_cost(x) == pytest.approx(0.0)
    H, e = ocp.terminal_rows()
    np.testing.assert_allclose(H @ x, e)
    x2 = dyn.lf_state(p_T, [1.0, 0.0, 0.0], np.zeros(3))
    assert (H @ x2 - e)[0] == pytest.approx(1.0)
    ocp.lf_w.q_T[:] = np.array([2.0, 3.0, 4.0])
    x3 = dyn.lf_state(p_T + np.array([0.1, -0.2, 0.3]), np.zeros(3), np.zeros(3))
    expected = 2 * 0.1 ** 2 + 3 * 0.2 ** 2 + 4 * 0.3 ** 2
    assert ocp.terminal_cost(x3) == pytest.approx(expected)


# ---------------------------------------------------------------------------
# transition coupling
# ---------------------------------------------------------------------------

def test_transition_zero_for_hover_pair(quad_params, rng):
    for _ in range(100):
        p = rng.normal(scale=5.0, size=3)
        v = rng.normal(scale=3.0, size=3)
        x_hf = dyn.hover_state(quad_params, p)
        x_hf[dyn.HF_V] = v
        x_lf = dyn.lf_state(p, v, np.zeros(3))
        pi = transition_residual(x_hf, x_lf, np.zeros(3), quad_params)
        assert np.max(np.abs(pi)) < 1e-12


def test_transition_acceleration_from_thrust(quad_params):
    T = 9.0
    x_hf = dyn.hover_state(quad_params)
    x_hf[dyn.HF_F] = T / 4.0
    a = np.array([0.0, 0.0, T / quad_params.m - dyn.GRAVITY])
    x_lf = dyn.lf_state(np.zeros(3), np.zeros(3), a)
    pi = transition_residual(x_hf, x_lf, np.zeros(3), quad_params)
    np.testing.assert_allclose(pi, 0.0, atol=1e-12)


def test_transition_velocity_mismatch(quad_params):
    x_hf = dyn.hover_state(quad_params)
    delta = np.array([0.3, -0.1, 0.2])
    x_lf = dyn.lf_state(np.zeros(3), -delta, np.zeros(3))
    pi = transition_residual(x_hf, x_lf, np.zeros(3), quad_params)
    np.testing.assert_allclose(pi[3:6], delta, atol=1e-12)


def test_transition_omega_rows(quad_params):
    x_hf = dyn.hover_state(quad_params)
    x_lf = dyn.lf_state(np.zeros(3), np.zeros(3), np.zeros(3))
    pi = transition_residual(x_hf, x_lf, np.zeros(3), quad_params,
                             include_omega=True)
    assert pi.shape == (12,)
    np.testing.assert_allclose(pi, 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        transition_residual(x_hf, dyn.lf_state(np.zeros(3), np.zeros(3),
                                               -dyn.GRAVITY_VEC),
                            np.zeros(3), quad_params, include_omega=True)


# ---------------------------------------------------------------------------
# structure goldens
# ---------------------------------------------------------------------------

def test_unified_node_arithmetic_flagship_row():
    # 13 quadrotor nodes at 40 ms plus 22 point-mass nodes at 0.8 s
    ocp = unified(M=13, N=22, t_lf=0.8, spacing=0.1)
    d = ocp.describe()
    assert d["n_states"] == 14 * 17 + 23 * 9
    assert d["n_inputs"] == 13 * 4 + 22 * 3
    assert len(d["nodes"]) == 14 + 23
    assert d["nodes"][0]["time"] == pytest.approx(0.0)
    assert d["nodes"][13]["time"] == pytest.approx(0.52)
    # geometric spacing: last point-mass step is 0.8 * 1.1^21
    steps = np.diff([n["time"] for n in d["nodes"][14:]])
    assert steps[-1] == pytest.approx(0.8 * 1.1 ** 21, rel=1e-9)
    assert json.dumps(d)


def test_unified_nominal_reduction():
    ocp = unified(M=6, N=0)
    d = ocp.describe()
    assert len(d["nodes"]) == 7
    assert all(n["kind"] == "hf" for n in d["nodes"])
    H, e = ocp.terminal_rows()
    assert H.shape == (6, 17)      # terminal rest on v and omega


def test_constraint_row_counts_with_obstacles():
    obs = [sphere([3.0, 0.0, 0.0], 1.0), box_obstacle([5.0, 1.0, 0.0], [1.0] * 3)]
    ocp = unified(M=4, N=3, obstacles=obs, variant_f="box", variant_omega="box")
    d = ocp.describe()
    # quadrotor stage nodes: obstacles + 2 thrust rows + 6 rate rows
    for n in d["nodes"][:4]:
        assert n["rows"]["obstacle"] == 2
        assert n["rows"]["hf_set"] == 8
    # junction node: no obstacle rows, but it keeps the vehicle set rows so
    # the linearized transition cannot float it into infeasible thrusts
    assert d["nodes"][4]["rows"] == {"hf_set": 8}
    # point-mass stage nodes: obstacles + 6 accel box + 6 jerk box rows
    for n in d["nodes"][5:8]:
        assert n["rows"]["obstacle"] == 2
        assert n["rows"]["lf_set"] == 12
    # terminal keeps only obstacle rows
    assert d["nodes"][8]["rows"] == {"obstacle": 2}


def test_obstacle_exponent_monotone_across_junction():
    obs = [box_obstacle([3.0, 0.0, 0.0], [1.0] * 3, alpha0=10.0)]
    ocp = unified(M=4, N=5, obstacles=obs,
                  smoothing=SmoothingConfig(enabled=True))
    alphas = ocp.alphas[:, 0]
    assert np.all(np.diff(alphas) <= 1e-12)
    assert alphas[0] == pytest.approx(10.0)
    assert alphas[-1] == pytest.approx(2.0)
    hf_max = alphas[: ocp.hf_nodes].min()
    lf_max = alphas[ocp.hf_nodes:].max()
    assert lf_max <= hf_max + 1e-12


def test_pointmass_shares_second_phase_cost():
    obs = [sphere([3.0, 0.0, 0.0], 1.0)]
    uni = unified(M=4, N=5, obstacles=obs)
    quad = make_quad_params()
    pm = build_pointmass(uni.cfg, quad, make_set_params(), lf_weights(), obs)
    np.testing.assert_allclose(pm.times, uni.times[uni.hf_nodes:])
    np.testing.assert_allclose(pm.alphas, uni.alphas[uni.hf_nodes:])

    rng = np.random.default_rng(0)
    states = [rng.normal(size=9) for _ in range(6)]
    inputs = [rng.normal(size=3) for _ in range(5)] + [np.zeros(0)]
    refs = rng.normal(size=(5, 12))
    p_T = rng.normal(size=3)
    uni.lf_yref[:] = refs
    pm.lf_yref[:] = refs
    uni.p_T[:] = p_T
    pm.p_T[:] = p_T
    uni_states = [np.zeros(17)] * uni.hf_nodes + states
    uni_inputs = [np.zeros(4)] * uni.hf_nodes + inputs
    assert pm.lf_cost(states, inputs) == pytest.approx(
        uni.lf_cost(uni_states, uni_inputs), rel=1e-12)


# ---------------------------------------------------------------------------
# solving through the junction
# ---------------------------------------------------------------------------

def test_unified_solve_hover_stays_put(quad_params):
    ocp = unified(M=4, N=4)
    solver = SqpSolver(ocp)
    x0 = dyn.hover_state(quad_params)
    ocp.p_T[:] = 0.0
    it = solver.cold_start(x0)
    it, report = solver.solve_converged(it, x0, tol=1e-6, max_iter=30)
    assert report.qp_status == "ok"
    for i, s in enumerate(it.states):
        np.testing.assert_allclose(s[:3], 0.0, atol=1e-6)


def test_unified_solve_satisfies_transition(quad_params):
    ocp = unified(M=4, N=4, v_ref=2.0)
    solver = SqpSolver(ocp)
    x0 = dyn.hover_state(quad_params)
    ocp.lf_yref[:, 3] = 2.0
    horizon = ocp.times[-1]
    ocp.p_T[:] = np.array([2.0 * horizon, 0.0, 0.0])
    it = solver.cold_start(x0)
    it, report = solver.solve_converged(it, x0, tol=1e-6, max_iter=50)
    assert report.qp_status == "ok"
    junction = ocp.hf_nodes - 1
    pi = transition_residual(it.states[junction], it.states[junction + 1],
                             it.inputs[junction + 1], quad_params)
    assert np.max(np.abs(pi)) < 1e-6
    # the plan accelerates through the point-mass phase and comes back to
    # rest at the terminal node
    assert it.states[-1][0] > 0.5
    assert max(s[3] for s in it.states[ocp.hf_nodes:]) > 0.5
    np.testing.assert_allclose(it.states[-1][3:9], 0.0, atol=1e-6)


def test_unified_obstacle_is_respected(quad_params):
    from mfmpc.obstacles import obstacle_value
    obs = [sphere([1.5, 0.0, 0.0], 0.8, margin=0.0)]
    ocp = unified(M=4, N=6, obstacles=obs, v_ref=1.5)
    solver = SqpSolver(ocp)
    x0 = dyn.hover_state(quad_params)
    ocp.lf_yref[:, 3] = 1.5
    ocp.p_T[:] = np.array([6.0, 0.0, 0.0])
    it = solver.cold_start(x0)
    it, report = solver.solve_converged(it, x0, tol=1e-5, max_iter=60)
    for i in ocp._obstacle_nodes():
        val = obstacle_value(it.states[i][:3], ocp.obstacles[0],
                             float(ocp.alphas[i, 0]))
        assert val >= 1.0 - 2e-3
