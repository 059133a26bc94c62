"""Structured SQP solver with Gauss-Newton Hessians and an interior-point QP.

Each SQP iteration linearizes the trajectory problem into a block-banded
convex QP: per-node Hessian blocks (least-squares Gauss-Newton plus slack
penalties and a Levenberg shift), dynamics equality chains, and per-node
inequality rows whose soft members carry L1/L2-penalized slack variables.
Slack variables enter the QP as absolute values, so the exact-penalty
objective is rebuilt from scratch every solve.

The QP kernel is a Mehrotra-style primal-dual interior point.  Every Newton
system is the node-ordered block-banded KKT matrix; its sparsity pattern is
built once per problem structure and refilled in place, so one iteration
costs a handful of small dense per-node products plus a sparse factorization
whose elimination proceeds node by node.  Equality-only problems collapse to
a single exact KKT solve.

`rti_step` performs one linearize/solve/update cycle with unit step;
`solve_converged` repeats cycles, guarding against divergence by halving the
step whenever the post-step KKT residual would grow more than tenfold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg.lapack import dgbtrf as _gbtrf
from scipy.linalg.lapack import dgbtrs as _gbtrs
from scipy.sparse.linalg import splu

from . import dynamics as dyn
from .dynamics import GRAVITY_VEC, HF_Q, LF_A
from .obstacles import obstacle_gradient, obstacle_value
from .ocp import (TrajectoryOcp, hf_tracking_vector, transition_jacobian,
                  transition_map, transition_residual)

_TINY = 1e-9


class LinearizationError(RuntimeError):
    pass


@dataclass
class SolverOptions:
    qp_tol: float = 1e-8
    qp_max_iter: int = 100
    levenberg: float = 1e-8
    slack_l1: float = 1e4
    slack_l2: float = 1e3
    kkt_tol: float = 1e-6
    max_sqp_iter: int = 200
    eq_reg: float = 1e-12
    kkt_solver: str = "banded"      # "banded" (LAPACK gbtrf) or "splu"


@dataclass
class KktResiduals:
    stationarity: float = np.inf
    eq: float = np.inf
    ineq: float = np.inf
    comp: float = np.inf

    @property
    def total(self) -> float:
        return max(self.stationarity, self.eq, self.ineq, self.comp)


@dataclass
class SolveReport:
    iterations: int = 0
    qp_iters: int = 0
    qp_status: str = "ok"
    kkt: KktResiduals = field(default_factory=KktResiduals)
    step_norm: float = 0.0
    max_slack: float = 0.0
    cost: float = 0.0
    time: float = 0.0


@dataclass
class SqpIterate:
    """Primal/dual trajectory iterate of one trajectory problem."""

    states: list[np.ndarray]
    inputs: list[np.ndarray]
    slacks: list[np.ndarray]
    lam: np.ndarray
    mu: np.ndarray

    def copy(self) -> "SqpIterate":
        return SqpIterate([x.copy() for x in self.states],
                          [u.copy() for u in self.inputs],
                          [s.copy() for s in self.slacks],
                          self.lam.copy(), self.mu.copy())


@dataclass
class QpProblem:
    """Linearized block data consumed by the interior-point kernel.

    Rows follow  E dz = b  (initial state, dynamics edges, terminal set) and
    C dz <= d  per node over [dx, du, s]; H blocks are symmetric PSD by the
    Gauss-Newton construction plus the Levenberg shift.
    """

    H: list[np.ndarray]
    g: list[np.ndarray]
    A: list[np.ndarray]
    B: list[np.ndarray]
    b_edge: list[np.ndarray]
    b_x0: np.ndarray
    H_T: np.ndarray
    b_T: np.ndarray
    C: list[np.ndarray]
    d: list[np.ndarray]
    cost: float


@dataclass
class QpSolution:
    dz: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    status: str
    iterations: int
    residual: float


class _Structure:
    """Offsets and cached KKT layout for one problem's dimensions.

    The KKT matrix interleaves each node's variables with the equality rows
    that follow it ([lam_x0, z_0, lam_1, z_1, ...]), which makes the matrix
    banded and lets a banded LU eliminate it node by node.  The sparsity
    pattern, the banded-storage scatter indices, and a CSC permutation for
    the SuperLU fallback are all built once.
    """

    def __init__(self, ocp: TrajectoryOcp):
        self.nx = list(ocp.nx)
        self.nu = list(ocp.nu)
        self.ns = list(ocp.ns)
        self.T = ocp.T
        n_nodes = ocp.T + 1
        self.nz_node = [self.nx[i] + self.nu[i] + self.ns[i] for i in range(n_nodes)]
        self.zoff = np.concatenate([[0], np.cumsum(self.nz_node)]).astype(int)
        self.n_z = int(self.zoff[-1])

        HT, _ = ocp.terminal_rows()
        self.m_T = HT.shape[0]
        eq_sizes = [self.nx[0]] + [self.nx[i + 1] for i in range(self.T)] + [self.m_T]
        self.eqoff = np.concatenate([[0], np.cumsum(eq_sizes)]).astype(int)
        self.n_eq = int(self.eqoff[-1])

        # inequality rows per node: constraint rows then slack nonnegativity
        self.m_node = [ocp.rows[i].n_rows + self.ns[i] for i in range(n_nodes)]
        self.inoff = np.concatenate([[0], np.cumsum(self.m_node)]).astype(int)
        self.n_in = int(self.inoff[-1])

        self._build_layout()
        self._build_pattern()

    def _build_layout(self):
        """Interleaved global positions of variables and equality rows."""
        n = self.n_z + self.n_eq
        self.var_pos = np.empty(self.n_z, dtype=np.int64)
        self.eq_pos = np.empty(self.n_eq, dtype=np.int64)
        pos = 0
        self.eq_pos[self.eqoff[0]:self.eqoff[1]] = np.arange(pos, pos + self.nx[0])
        pos += self.nx[0]
        for i in range(self.T + 1):
            nz = self.nz_node[i]
            self.var_pos[self.zoff[i]:self.zoff[i + 1]] = np.arange(pos, pos + nz)
            pos += nz
            if i < self.T:
                m = self.nx[i + 1]
                self.eq_pos[self.eqoff[i + 1]:self.eqoff[i + 2]] = \
                    np.arange(pos, pos + m)
                pos += m
        if self.m_T:
            self.eq_pos[self.eqoff[self.T + 1]:self.eqoff[self.T + 2]] = \
                np.arange(pos, pos + self.m_T)
            pos += self.m_T
        assert pos == n
        self.n_kkt = n

    def _build_pattern(self):
        rows, cols = [], []
        self._slots: dict[tuple, int] = {}
        count = 0

        def vs(i):
            return self.var_pos[self.zoff[i]]

        def es(k):
            return self.eq_pos[self.eqoff[k]]

        def add_block(tag, r0, c0, nr, nc):
            nonlocal count
            if nr == 0 or nc == 0:
                return
            self._slots[tag] = count
            rows.append(np.repeat(np.arange(r0, r0 + nr), nc))
            cols.append(np.tile(np.arange(c0, c0 + nc), nr))
            count += nr * nc

        for i in range(self.T + 1):
            add_block(("H", i), vs(i), vs(i), self.nz_node[i], self.nz_node[i])
        add_block(("x0",), es(0), vs(0), self.nx[0], self.nx[0])
        add_block(("x0T",), vs(0), es(0), self.nx[0], self.nx[0])
        for k in range(self.T):
            r0 = es(k + 1)
            ncols = self.nx[k] + self.nu[k]
            add_block(("AB", k), r0, vs(k), self.nx[k + 1], ncols)
            add_block(("ABT", k), vs(k), r0, ncols, self.nx[k + 1])
            add_block(("I1", k), r0, vs(k + 1), self.nx[k + 1], self.nx[k + 1])
            add_block(("I1T", k), vs(k + 1), r0, self.nx[k + 1], self.nx[k + 1])
        if self.m_T:
            add_block(("term",), es(self.T + 1), vs(self.T), self.m_T,
                      self.nx[self.T])
            add_block(("termT",), vs(self.T), es(self.T + 1), self.nx[self.T],
                      self.m_T)
        self._slots[("dreg",)] = count
        rows.append(self.eq_pos.copy())
        cols.append(self.eq_pos.copy())
        count += self.n_eq

        r = np.concatenate(rows)
        c = np.concatenate(cols)
        self.n_entries = count
        n = self.n_kkt
        probe = sp.csc_matrix((np.arange(count, dtype=float), (r, c)),
                              shape=(n, n))
        if probe.nnz != count:
            raise AssertionError("duplicate KKT pattern entries")
        self.perm = probe.data.astype(np.int64)
        self.K = probe

        # banded storage scatter: LAPACK gbtrf layout with kl extra rows
        self.kl = int(np.max(r - c))
        self.ku = int(np.max(c - r))
        ldab = 2 * self.kl + self.ku + 1
        self.ldab = ldab
        self.band_dest = (c * ldab + (self.kl + self.ku + r - c)).astype(np.int64)

    def slot(self, tag) -> int:
        return self._slots[tag]


def _transposed_vals(block: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(block.T).ravel()


class SqpSolver:
    """Owns the mutable workspace for repeatedly solving one problem.

    Instances are independent: the parallel restart branches each hold one.
    """

    def __init__(self, ocp: TrajectoryOcp, opts: SolverOptions | None = None):
        self.ocp = ocp
        self.opts = opts or SolverOptions()
        self.st = _Structure(ocp)
        self._kvals = np.zeros(self.st.n_entries)
        self._ab_flat = np.zeros(self.st.ldab * self.st.n_kkt)
        self._ab_view = self._ab_flat.reshape((self.st.ldab, self.st.n_kkt),
                                              order="F")
        self._hf_groups = self._group_edges("hf")

    def _group_edges(self, kind: str) -> dict[float, list[int]]:
        groups: dict[float, list[int]] = {}
        for k, (ek, dt) in enumerate(zip(self.ocp.edge_kinds, self.ocp.edge_dts)):
            if ek == kind:
                groups.setdefault(dt, []).append(k)
        return groups

    # ------------------------------------------------------------------
    # iterate management
    # ------------------------------------------------------------------

    def cold_start(self, x0: np.ndarray) -> SqpIterate:
        """Hover-replicated quadrotor phase, resting point-mass phase."""
        ocp, st = self.ocp, self.st
        pos = np.asarray(x0, dtype=float)[:3]
        states, inputs, slacks = [], [], []
        for i in range(st.T + 1):
            if ocp.kinds[i] == "hf":
                states.append(dyn.hover_state(ocp.quad, pos))
            else:
                states.append(dyn.lf_state(pos, np.zeros(3), np.zeros(3)))
            inputs.append(np.zeros(st.nu[i]))
            slacks.append(np.zeros(st.ns[i]))
        return SqpIterate(states, inputs, slacks,
                          np.zeros(st.n_eq), np.zeros(st.n_in))

    def shift(self, it: SqpIterate,
              phases: tuple[str, ...] = ("hf", "lf")) -> SqpIterate:
        """Advance primal and dual variables one node within each phase.

        The last node of each phase is duplicated and the junction node is
        held, so the shifted trajectory warm-starts the next cycle.
        Controllers advance each phase at its own sampling cadence via
        `phases`.
        """
        out = it.copy()
        ocp, st = self.ocp, self.st
        phase_nodes: dict[str, list[int]] = {p: [] for p in phases}
        for i, k in enumerate(ocp.kinds):
            if k in phase_nodes:
                phase_nodes[k].append(i)

        for nodes in phase_nodes.values():
            for a, b in zip(nodes[:-1], nodes[1:]):
                if st.nx[a] == st.nx[b]:
                    out.states[a] = it.states[b].copy()
                if st.nu[a] == st.nu[b] and st.nu[a] > 0:
                    out.inputs[a] = it.inputs[b].copy()
                if st.ns[a] == st.ns[b] and st.ns[a] > 0:
                    out.slacks[a] = it.slacks[b].copy()
                if st.m_node[a] == st.m_node[b] and st.m_node[a] > 0:
                    out.mu[st.inoff[a]:st.inoff[a + 1]] = \
                        it.mu[st.inoff[b]:st.inoff[b + 1]]
            for a, b in zip(nodes[:-2], nodes[1:-1]):
                if a < st.T and b < st.T \
                        and ocp.edge_kinds[a] == ocp.edge_kinds[b] \
                        and st.nx[a + 1] == st.nx[b + 1]:
                    out.lam[st.eqoff[a + 1]:st.eqoff[a + 2]] = \
                        it.lam[st.eqoff[b + 1]:st.eqoff[b + 2]]
        return out

    # ------------------------------------------------------------------
    # linearization
    # ------------------------------------------------------------------

    def linearize(self, it: SqpIterate) -> QpProblem:
        """Gauss-Newton QP data at the iterate.

        Box and polyhedral rows pass through unchanged; truly nonlinear rows
        (obstacles, norm balls, junction rate match) are linearized here.
        """
        ocp, st, opts = self.ocp, self.st, self.opts
        T = st.T
        H = [np.zeros((n, n)) for n in st.nz_node]
        g = [np.zeros(n) for n in st.nz_node]
        A: list = [None] * T
        B: list = [None] * T
        b_edge: list = [None] * T
        cost = 0.0

        for dt, edges in self._hf_groups.items():
            X = np.stack([it.states[k] for k in edges])
            U = np.stack([it.inputs[k] for k in edges])
            Ab, Bb = dyn.hf_jacobians_batched(X, U, ocp.quad, dt)
            F = dyn.rk4_step(X, U, dt, ocp.quad)
            for j, k in enumerate(edges):
                A[k], B[k] = Ab[j], Bb[j]
                b_edge[k] = -(F[j] - it.states[k + 1])
        for k, ek in enumerate(ocp.edge_kinds):
            if ek == "lf":
                Al, Bl = ocp._lf_AB[ocp.edge_dts[k]]
                A[k], B[k] = Al, Bl
                b_edge[k] = -(Al @ it.states[k] + Bl @ it.inputs[k]
                              - it.states[k + 1])
            elif ek == "transition":
                A[k] = transition_jacobian(it.states[k], ocp.quad)
                B[k] = np.zeros((st.nx[k + 1], st.nu[k]))
                b_edge[k] = -(transition_map(it.states[k], ocp.quad)
                              - it.states[k + 1])

        b_x0 = ocp.x0 - it.states[0]
        HT, eT = ocp.terminal_rows()
        b_T = eT - HT @ it.states[T] if st.m_T else np.zeros(0)

        # --- stage costs (Gauss-Newton blocks) ---
        hf_stage = ocp.stage_indices("hf")
        if hf_stage:
            Q = np.stack([it.states[i][HF_Q] for i in hf_stage])
            Dphi = attitude_error_jacobian(Q, ocp.q_ref)
        for jj, i in enumerate(hf_stage):
            x, u = it.states[i], it.inputs[i]
            w = ocp.hf_w.w * ocp.edge_dts[i]
            y = hf_tracking_vector(x, u, ocp.q_ref)
            e = y - ocp.hf_yref[i]
            cost += float(np.sum(w * e * e))
            Hi, gi = H[i], g[i]
            for yrows, xcols in ((slice(0, 3), slice(0, 3)),
                                 (slice(6, 9), slice(7, 10)),
                                 (slice(9, 12), slice(10, 13)),
                                 (slice(12, 16), slice(13, 17)),
                                 (slice(16, 20), slice(17, 21))):
                idx = np.arange(xcols.start, xcols.stop)
                Hi[idx, idx] += 2.0 * w[yrows]
                gi[xcols] += 2.0 * w[yrows] * e[yrows]
            D = Dphi[jj]
            Wphi = w[3:6]
            Hi[HF_Q, HF_Q] += 2.0 * D.T @ (Wphi[:, None] * D)
            gi[HF_Q] += 2.0 * D.T @ (Wphi * e[3:6])

        for i in ocp.stage_indices("lf"):
            x, u = it.states[i], it.inputs[i]
            w = ocp.lf_w.w * ocp.edge_dts[i]
            e = np.concatenate([x, u]) - ocp.lf_yref[ocp.lf_stage_pos[i]]
            cost += float(np.sum(w * e * e))
            nz = st.nx[i] + st.nu[i]
            H[i][np.arange(nz), np.arange(nz)] += 2.0 * w
            g[i][:nz] += 2.0 * w * e

        p = it.states[T][:3]
        e = p - ocp.p_T
        cost += float(np.sum(ocp.lf_w.q_T * e * e))
        H[T][0:3, 0:3] += np.diag(2.0 * ocp.lf_w.q_T)
        g[T][0:3] += 2.0 * ocp.lf_w.q_T * e

        # slack penalty (on absolute slack variables) and Levenberg shift
        for i in range(T + 1):
            n = st.nz_node[i]
            H[i][np.arange(n), np.arange(n)] += opts.levenberg
            if st.ns[i]:
                idx = np.arange(st.nx[i] + st.nu[i], n)
                H[i][idx, idx] += 2.0 * opts.slack_l2
                g[i][idx] += opts.slack_l1
                cost += float(np.sum(opts.slack_l1 * it.slacks[i]
                                     + opts.slack_l2 * it.slacks[i] ** 2))

        C, d = self._constraint_rows(it)
        qp = QpProblem(H, g, A, B, b_edge, b_x0, HT, b_T, C, d, cost)
        self._check_finite(qp)
        return qp

    def _check_finite(self, qp: QpProblem):
        for i, (Hi, gi) in enumerate(zip(qp.H, qp.g)):
            if not (np.all(np.isfinite(Hi)) and np.all(np.isfinite(gi))):
                raise LinearizationError(f"non-finite cost block at node {i}")
        for k, Ak in enumerate(qp.A):
            if not (np.all(np.isfinite(Ak)) and np.all(np.isfinite(qp.b_edge[k]))):
                raise LinearizationError(f"non-finite sensitivity at edge {k}")
        for i, Ci in enumerate(qp.C):
            if not np.all(np.isfinite(Ci)):
                raise LinearizationError(f"non-finite constraint row at node {i}")

    def _rate_match_rows(self, x: np.ndarray, w: np.ndarray,
                         eps: float = 1e-7) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Junction body-rate/jerk coupling and its Jacobians (3 x 17, 3 x 3)."""
        quad = self.ocp.quad

        def val(xv, wv):
            return transition_residual(xv, transition_map(xv, quad), wv, quad,
                                       include_omega=True)[9:12]

        base = val(x, w)
        Jx = np.empty((3, 17))
        for c in range(17):
            xp = x.copy()
            xp[c] += eps
            Jx[:, c] = (val(xp, w) - base) / eps
        Jw = np.empty((3, 3))
        for c in range(3):
            wp = w.copy()
            wp[c] += eps
            Jw[:, c] = (val(x, wp) - base) / eps
        return base, Jx, Jw

    def _constraint_rows(self, it: SqpIterate) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Per-node rows  C [dx du s] <= d  including slack nonnegativity."""
        ocp, st = self.ocp, self.st
        n_obs = len(ocp.obstacles)

        obs_nodes = ocp._obstacle_nodes()
        obs_val = np.zeros((len(obs_nodes), n_obs))
        obs_grad = np.zeros((len(obs_nodes), n_obs, 3))
        if n_obs and obs_nodes:
            P = np.stack([it.states[i][:3] for i in obs_nodes])
            for oi, o in enumerate(ocp.obstacles):
                alphas = ocp.alphas[obs_nodes, oi]
                for ai in np.unique(alphas):
                    mask = alphas == ai
                    obs_val[mask, oi] = obstacle_value(P[mask], o, float(ai))
                    obs_grad[mask, oi] = obstacle_gradient(P[mask], o, float(ai))
        obs_pos = {i: j for j, i in enumerate(obs_nodes)}

        C_list, d_list = [], []
        for i in range(st.T + 1):
            r = ocp.rows[i]
            nxi, nui, nsi = st.nx[i], st.nu[i], st.ns[i]
            m = r.n_rows + nsi
            Ci = np.zeros((m, st.nz_node[i]))
            di = np.zeros(m)
            x = it.states[i]
            u = it.inputs[i]
            soft_seen = 0
            row = 0
            rate_cache = None
            for kind, soft in zip(r.nl_kinds, r.nl_soft):
                if kind.startswith("obstacle"):
                    oi = int(kind.split(":")[1])
                    Ci[row, 0:3] = -obs_grad[obs_pos[i], oi]
                    cbar = 1.0 - obs_val[obs_pos[i], oi]
                elif kind == "f_ball":
                    wv = x[LF_A] + GRAVITY_VEC
                    nrm = max(np.linalg.norm(wv), _TINY)
                    Ci[row, 6:9] = ocp.sets.m * wv / nrm
                    cbar = ocp.sets.m * nrm - (ocp.sets.f_th_max - ocp.sets.f_res_max)
                elif kind == "w_ratio":
                    wv = x[LF_A] + GRAVITY_VEC
                    nw = max(np.linalg.norm(wv), _TINY)
                    j = u[:3]
                    nj = np.linalg.norm(j)
                    if nj > _TINY:
                        Ci[row, nxi:nxi + 3] = j / nj
                    Ci[row, 6:9] = -ocp.sets.omega_xy_max * wv / nw
                    cbar = nj - ocp.sets.omega_xy_max * nw
                elif kind == "v_xy":
                    vxy = x[7:9]
                    nv = np.linalg.norm(vxy)
                    if nv > _TINY:
                        Ci[row, 7:9] = vxy / nv
                    cbar = nv - ocp.quad.v_xy_max
                elif kind in ("rate_match", "rate_match_neg"):
                    if rate_cache is None:
                        rate_cache = self._rate_match_rows(x, u[:3])
                        rate_axis = 0
                    base, Jx, Jw = rate_cache
                    sign = 1.0 if kind == "rate_match" else -1.0
                    Ci[row, 0:nxi] = sign * Jx[rate_axis]
                    Ci[row, nxi:nxi + 3] = sign * Jw[rate_axis]
                    cbar = sign * base[rate_axis]
                    if kind == "rate_match_neg":
                        rate_axis += 1
                else:
                    raise AssertionError(f"unknown row kind {kind}")
                if soft:
                    Ci[row, nxi + nui + soft_seen] = -1.0
                    soft_seen += 1
                di[row] = -cbar
                row += 1

            nlin = len(r.lin_d)
            if nlin:
                Ci[row:row + nlin, 0:nxi] = r.lin_Cx
                Ci[row:row + nlin, nxi:nxi + nui] = r.lin_Cu
                resid = r.lin_d - r.lin_Cx @ x - (r.lin_Cu @ u if nui else 0.0)
                for rr in range(nlin):
                    if r.lin_soft[rr]:
                        Ci[row + rr, nxi + nui + soft_seen] = -1.0
                        soft_seen += 1
                    di[row + rr] = resid[rr]
                row += nlin

            for ss in range(nsi):
                Ci[row + ss, nxi + nui + ss] = -1.0
            C_list.append(Ci)
            d_list.append(di)
        return C_list, d_list

    # ------------------------------------------------------------------
    # interior-point QP kernel
    # ------------------------------------------------------------------

    def _fill_vals(self, qp: QpProblem, Hbar: list[np.ndarray],
                   dreg: float) -> np.ndarray:
        st = self.st
        vals = self._kvals
        for i in range(st.T + 1):
            s = st.slot(("H", i))
            vals[s:s + Hbar[i].size] = Hbar[i].ravel()
        eye = np.eye(st.nx[0]).ravel()
        vals[st.slot(("x0",)):st.slot(("x0",)) + eye.size] = eye
        vals[st.slot(("x0T",)):st.slot(("x0T",)) + eye.size] = eye
        for k in range(st.T):
            AB = np.hstack([qp.A[k], qp.B[k]]) if st.nu[k] else qp.A[k]
            s = st.slot(("AB", k))
            vals[s:s + AB.size] = AB.ravel()
            s = st.slot(("ABT", k))
            vals[s:s + AB.size] = _transposed_vals(AB)
            eyek = (-np.eye(st.nx[k + 1])).ravel()
            vals[st.slot(("I1", k)):st.slot(("I1", k)) + eyek.size] = eyek
            vals[st.slot(("I1T", k)):st.slot(("I1T", k)) + eyek.size] = eyek
        if st.m_T:
            s = st.slot(("term",))
            vals[s:s + qp.H_T.size] = qp.H_T.ravel()
            s = st.slot(("termT",))
            vals[s:s + qp.H_T.size] = _transposed_vals(qp.H_T)
        s = st.slot(("dreg",))
        vals[s:s + st.n_eq] = -dreg
        return vals

    def _factorize(self, qp: QpProblem, Hbar: list[np.ndarray], dreg: float):
        """Factor the interleaved KKT; returns solve(rz, rl) -> (dz, dl).

        The banded LU eliminates node by node along the chain; SuperLU on
        the same node ordering is the fallback.  Raises RuntimeError on a
        singular factorization so callers can bump the regularization.
        """
        st = self.st
        vals = self._fill_vals(qp, Hbar, dreg)

        if self.opts.kkt_solver == "banded":
            flat = self._ab_flat
            flat[:] = 0.0
            flat[st.band_dest] = vals
            lu, piv, info = _gbtrf(self._ab_view, st.kl, st.ku,
                                   overwrite_ab=1)
            if info != 0:
                raise RuntimeError(f"banded factorization failed (info={info})")

            def solve(rz, rl):
                b = np.empty(st.n_kkt)
                b[st.var_pos] = rz
                b[st.eq_pos] = rl
                x, info_s = _gbtrs(lu, st.kl, st.ku, b, piv)
                if info_s != 0:
                    raise RuntimeError("banded solve failed")
                return x[st.var_pos], x[st.eq_pos]

            return solve

        st.K.data[:] = vals[st.perm]
        lu = splu(st.K)

        def solve(rz, rl):
            b = np.empty(st.n_kkt)
            b[st.var_pos] = rz
            b[st.eq_pos] = rl
            x = lu.solve(b)
            return x[st.var_pos], x[st.eq_pos]

        return solve

    def _qp_vectors(self, qp: QpProblem):
        st = self.st
        b = np.zeros(st.n_eq)
        b[st.eqoff[0]:st.eqoff[1]] = qp.b_x0
        for k in range(st.T):
            b[st.eqoff[k + 1]:st.eqoff[k + 2]] = qp.b_edge[k]
        if st.m_T:
            b[st.eqoff[st.T + 1]:st.eqoff[st.T + 2]] = qp.b_T
        g = np.concatenate(qp.g)
        d = np.concatenate(qp.d) if st.n_in else np.zeros(0)
        return g, b, d

    def _mul_H(self, qp, w):
        st = self.st
        out = np.empty(st.n_z)
        for i in range(st.T + 1):
            sl = slice(st.zoff[i], st.zoff[i + 1])
            out[sl] = qp.H[i] @ w[sl]
        return out

    def _mul_C(self, qp, w):
        st = self.st
        out = np.empty(st.n_in)
        for i in range(st.T + 1):
            out[st.inoff[i]:st.inoff[i + 1]] = \
                qp.C[i] @ w[st.zoff[i]:st.zoff[i + 1]]
        return out

    def _mul_CT(self, qp, v):
        st = self.st
        out = np.zeros(st.n_z)
        for i in range(st.T + 1):
            out[st.zoff[i]:st.zoff[i + 1]] = \
                qp.C[i].T @ v[st.inoff[i]:st.inoff[i + 1]]
        return out

    def _mul_E(self, qp, w):
        st = self.st
        out = np.empty(st.n_eq)
        out[st.eqoff[0]:st.eqoff[1]] = w[st.zoff[0]:st.zoff[0] + st.nx[0]]
        for k in range(st.T):
            xk = w[st.zoff[k]:st.zoff[k] + st.nx[k]]
            res = qp.A[k] @ xk
            if st.nu[k]:
                uk = w[st.zoff[k] + st.nx[k]:st.zoff[k] + st.nx[k] + st.nu[k]]
                res = res + qp.B[k] @ uk
            out[st.eqoff[k + 1]:st.eqoff[k + 2]] = \
                res - w[st.zoff[k + 1]:st.zoff[k + 1] + st.nx[k + 1]]
        if st.m_T:
            out[st.eqoff[st.T + 1]:st.eqoff[st.T + 2]] = \
                qp.H_T @ w[st.zoff[st.T]:st.zoff[st.T] + st.nx[st.T]]
        return out

    def _mul_ET(self, qp, v):
        st = self.st
        out = np.zeros(st.n_z)
        out[st.zoff[0]:st.zoff[0] + st.nx[0]] += v[st.eqoff[0]:st.eqoff[1]]
        for k in range(st.T):
            vk = v[st.eqoff[k + 1]:st.eqoff[k + 2]]
            out[st.zoff[k]:st.zoff[k] + st.nx[k]] += qp.A[k].T @ vk
            if st.nu[k]:
                out[st.zoff[k] + st.nx[k]:st.zoff[k] + st.nx[k] + st.nu[k]] += \
                    qp.B[k].T @ vk
            out[st.zoff[k + 1]:st.zoff[k + 1] + st.nx[k + 1]] -= vk
        if st.m_T:
            out[st.zoff[st.T]:st.zoff[st.T] + st.nx[st.T]] += \
                qp.H_T.T @ v[st.eqoff[st.T + 1]:st.eqoff[st.T + 2]]
        return out

    def qp_solve(self, qp: QpProblem, warm: np.ndarray | None = None) -> QpSolution:
        """Solve the structured convex QP to tight primal-dual tolerances."""
        st, opts = self.st, self.opts
        n_z, n_eq, n_in = st.n_z, st.n_eq, st.n_in
        g, b, d = self._qp_vectors(qp)

        scale_d = 1.0 + float(np.max(np.abs(g))) if n_z else 1.0
        scale_p = 1.0 + (float(np.max(np.abs(b))) if n_eq else 0.0)
        scale_c = 1.0 + (float(np.max(np.abs(d))) if n_in else 0.0)

        w = np.zeros(n_z)
        lam = np.zeros(n_eq)
        dreg = opts.eq_reg

        if n_in == 0:
            status = "ok"
            try:
                solve = self._factorize(qp, qp.H, dreg)
            except RuntimeError:
                dreg = 1e-9
                status = "regularized"
                solve = self._factorize(qp, qp.H, dreg)
            w, lam = solve(-g, b)
            res = max(float(np.max(np.abs(self._mul_H(qp, w) + g
                                          + self._mul_ET(qp, lam)))) / scale_d,
                      (float(np.max(np.abs(self._mul_E(qp, w) - b))) / scale_p)
                      if n_eq else 0.0)
            if not np.isfinite(res) or res > 1e-5:
                status = "degraded"
            return QpSolution(w, lam, np.zeros(0), status, 1, float(res))

        mu = np.ones(n_in) if warm is None else np.clip(warm, 1e-6, 1e8)
        t = np.maximum(d, 1e-1)
        status = "max_iter"
        res_total = np.inf
        best = None
        it_qp = 0
        for it_qp in range(opts.qp_max_iter):
            r_d = self._mul_H(qp, w) + g + self._mul_ET(qp, lam) + self._mul_CT(qp, mu)
            r_p = self._mul_E(qp, w) - b
            r_c = self._mul_C(qp, w) + t - d
            mu_bar = float(mu @ t) / n_in
            res_total = max(float(np.max(np.abs(r_d))) / scale_d,
                            (float(np.max(np.abs(r_p))) / scale_p) if n_eq else 0.0,
                            float(np.max(np.abs(r_c))) / scale_c,
                            mu_bar / scale_c)
            if best is None or res_total < best[0]:
                best = (res_total, w.copy(), lam.copy(), mu.copy())
            if res_total <= opts.qp_tol:
                status = "ok"
                break

            sigma_vec = mu / t
            Hbar = []
            for i in range(st.T + 1):
                Ci = qp.C[i]
                si = sigma_vec[st.inoff[i]:st.inoff[i + 1]]
                Hbar.append(qp.H[i] + Ci.T @ (si[:, None] * Ci))
            try:
                solve_kkt = self._factorize(qp, Hbar, dreg)
            except RuntimeError:
                dreg = max(dreg * 1e6, 1e-9)
                try:
                    solve_kkt = self._factorize(qp, Hbar, dreg)
                except RuntimeError:
                    status = "failed"
                    break

            def ip_step(comp):
                rhs_w = -(r_d + self._mul_CT(qp, (comp + mu * r_c) / t))
                dw, dl = solve_kkt(rhs_w, -r_p)
                dt_ = -r_c - self._mul_C(qp, dw)
                dmu = (comp - mu * dt_) / t
                return dw, dl, dt_, dmu

            def max_step(v, dv):
                neg = dv < 0
                if not np.any(neg):
                    return 1.0
                return min(1.0, float(np.min(-v[neg] / dv[neg])))

            dw_a, dl_a, dt_a, dmu_a = ip_step(-mu * t)
            a_p = max_step(t, dt_a)
            a_d = max_step(mu, dmu_a)
            mu_aff = float((mu + a_d * dmu_a) @ (t + a_p * dt_a)) / n_in
            sigma = min(1.0, (mu_aff / mu_bar) ** 3) if mu_bar > 0 else 0.1
            dw, dl, dt_, dmu = ip_step(-mu * t + sigma * mu_bar - dt_a * dmu_a)
            if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(dmu))):
                status = "failed"
                break
            a_p = 0.995 * max_step(t, dt_)
            a_d = 0.995 * max_step(mu, dmu)
            w += a_p * dw
            t += a_p * dt_
            lam += a_d * dl
            mu += a_d * dmu

        if status in ("max_iter", "failed") and best is not None:
            _, w, lam, mu = best
            if status == "max_iter":
                status = "degraded"
        return QpSolution(w, lam, mu, status, it_qp + 1, float(res_total))

    # ------------------------------------------------------------------
    # NLP-level residuals and updates
    # ------------------------------------------------------------------

    def _wbar(self, it: SqpIterate) -> np.ndarray:
        """Current point in QP coordinates: zero deltas, absolute slacks."""
        st = self.st
        w = np.zeros(st.n_z)
        for i in range(st.T + 1):
            if st.ns[i]:
                s0 = st.zoff[i] + st.nx[i] + st.nu[i]
                w[s0:s0 + st.ns[i]] = it.slacks[i]
        return w

    def kkt_residuals(self, qp: QpProblem, it: SqpIterate) -> KktResiduals:
        st = self.st
        g, b, d = self._qp_vectors(qp)
        wbar = self._wbar(it)
        stat = g + self._mul_H(qp, wbar) + self._mul_ET(qp, it.lam)
        if st.n_in:
            stat += self._mul_CT(qp, it.mu)
        eq = float(np.max(np.abs(b))) if b.size else 0.0
        ineq = comp = 0.0
        if st.n_in:
            viol = self._mul_C(qp, wbar) - d
            ineq = float(np.max(np.maximum(viol, 0.0)))
            comp = float(np.max(np.abs(it.mu * viol)))
        scale = 1.0 + float(np.max(np.abs(g)))
        return KktResiduals(float(np.max(np.abs(stat))) / scale, eq, ineq,
                            comp / scale)

    def apply_step(self, it: SqpIterate, sol: QpSolution,
                   alpha: float = 1.0) -> SqpIterate:
        st = self.st
        out = it.copy()
        for i in range(st.T + 1):
            z0 = st.zoff[i]
            out.states[i] = it.states[i] + alpha * sol.dz[z0:z0 + st.nx[i]]
            if self.ocp.kinds[i] == "hf":
                out.states[i][HF_Q] = dyn.quat_normalize(out.states[i][HF_Q])
            if st.nu[i]:
                u0 = z0 + st.nx[i]
                out.inputs[i] = it.inputs[i] + alpha * sol.dz[u0:u0 + st.nu[i]]
            if st.ns[i]:
                s0 = z0 + st.nx[i] + st.nu[i]
                s_new = sol.dz[s0:s0 + st.ns[i]]
                out.slacks[i] = it.slacks[i] + alpha * (s_new - it.slacks[i])
        out.lam = it.lam + alpha * (sol.lam - it.lam)
        if sol.mu.size:
            out.mu = it.mu + alpha * (sol.mu - it.mu)
        return out

    def max_slack(self, it: SqpIterate) -> float:
        vals = [float(np.max(s)) for s in it.slacks if s.size]
        return max(vals) if vals else 0.0

    # ------------------------------------------------------------------
    # SQP drivers
    # ------------------------------------------------------------------

    def rti_step(self, it: SqpIterate,
                 x0: np.ndarray) -> tuple[SqpIterate, np.ndarray, SolveReport]:
        """One linearize/solve/update cycle with unit Newton step.

        On QP failure the iterate is left untouched and the previously
        planned first control is returned, flagged via the report.
        """
        t0 = time.perf_counter()
        self.ocp.set_initial_state(x0)
        qp = self.linearize(it)
        kkt = self.kkt_residuals(qp, it)
        sol = self.qp_solve(qp, warm=it.mu if it.mu.size else None)
        report = SolveReport(iterations=1, qp_iters=sol.iterations,
                             qp_status=sol.status, kkt=kkt, cost=qp.cost)
        if sol.status == "failed" or not np.all(np.isfinite(sol.dz)):
            report.qp_status = "failed"
            report.max_slack = self.max_slack(it)
            report.time = time.perf_counter() - t0
            return it, it.inputs[0].copy(), report
        new_it = self.apply_step(it, sol, 1.0)
        report.step_norm = float(np.max(np.abs(sol.dz))) if sol.dz.size else 0.0
        report.max_slack = self.max_slack(new_it)
        report.time = time.perf_counter() - t0
        return new_it, new_it.inputs[0].copy(), report

    def solve_converged(self, it: SqpIterate, x0: np.ndarray,
                        tol: float | None = None,
                        max_iter: int | None = None) -> tuple[SqpIterate, SolveReport]:
        """Full SQP iterations until the KKT residual drops below tol.

        Counts QP solves; a residual-guarded backtracking halves the step
        when the post-step residual would grow more than tenfold.
        """
        tol = self.opts.kkt_tol if tol is None else tol
        max_iter = self.opts.max_sqp_iter if max_iter is None else max_iter
        t0 = time.perf_counter()
        self.ocp.set_initial_state(x0)
        report = SolveReport()
        qp = self.linearize(it)
        for _ in range(max_iter):
            kkt = self.kkt_residuals(qp, it)
            report.kkt = kkt
            if kkt.total <= tol:
                report.qp_status = "ok"
                break
            sol = self.qp_solve(qp, warm=it.mu if it.mu.size else None)
            if sol.status == "failed":
                report.qp_status = "failed"
                break
            report.iterations += 1
            report.qp_iters += sol.iterations
            alpha = 1.0
            best = None
            for _ in range(4):
                cand = self.apply_step(it, sol, alpha)
                try:
                    qp_cand = self.linearize(cand)
                except LinearizationError:
                    alpha *= 0.5
                    continue
                res = self.kkt_residuals(qp_cand, cand).total
                if best is None or res < best[0]:
                    best = (res, cand, qp_cand)
                if res <= 10.0 * kkt.total:
                    break
                alpha *= 0.5
            if best is None:
                report.qp_status = "failed"
                break
            _, it, qp = best
            report.step_norm = float(np.max(np.abs(sol.dz)))
        else:
            report.qp_status = "max_iter"
        report.max_slack = self.max_slack(it)
        report.cost = qp.cost
        report.kkt = self.kkt_residuals(qp, it)
        report.time = time.perf_counter() - t0
        return it, report


def attitude_error_jacobian(Q: np.ndarray, q_ref: np.ndarray,
                            h: float = 1e-7) -> np.ndarray:
    """Central-difference Jacobian of the attitude tracking error w.r.t. q."""
    n = Q.shape[0]
    Qp = np.repeat(Q[:, None, :], 4, axis=1)
    Qm = Qp.copy()
    idx = np.arange(4)
    Qp[:, idx, idx] += h
    Qm[:, idx, idx] -= h
    ref = np.broadcast_to(q_ref, (n * 4, 4))
    ep = dyn.attitude_error(Qp.reshape(-1, 4), ref).reshape(n, 4, 3)
    em = dyn.attitude_error(Qm.reshape(-1, 4), ref).reshape(n, 4, 3)
    return np.swapaxes((ep - em) / (2.0 * h), 1, 2)

