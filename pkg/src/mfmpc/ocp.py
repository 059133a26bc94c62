"""Optimal-control problem construction for the multi-fidelity controllers.

Three problems share one multiple-shooting structure:

  * the unified two-phase problem: M quadrotor nodes, a transition node
    mapping the final quadrotor state onto the point-mass chain, then N
    point-mass nodes with a hover-safe terminal set,
  * the nominal quadrotor MPC (the N = 0 degeneration, with a hover
    terminal on velocity and body rates),
  * the standalone point-mass problem used by the parallel restarts and the
    hierarchical planner.

The trajectory is a single chain of nodes with per-node state/input
dimensions; the junction is just an input-less "dynamics" edge whose map is
the thrust-to-acceleration projection, so the structured solver never needs
to know about phases.  Obstacle rows carry per-node shape exponents frozen
at build time from the smoothing schedule; obstacle centers and tracking
references are mutable per control cycle.

Constraint-variant conventions for the point-mass sets (conservative to
tight): box < polyhedral < nonlinear.  Nonlinear rows are linearized per SQP
iteration; polyhedral and box rows enter the QP verbatim.  The body-rate
ratio constraint is implemented in the cleared form ||j|| - w_max*||a+g||,
which describes the same set wherever ||a+g|| > 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from .dynamics import (GRAVITY_VEC, HF_DIM, HF_F, HF_NU, HF_P, HF_Q, HF_V,
                       HF_W, LF_A, LF_DIM, LF_NU, LF_P, LF_V, QuadParams,
                       attitude_error)
from .feasible_sets import (SetParams, accel_box, dodecahedron_halfspaces,
                            jerk_box)
from .obstacles import Obstacle, SmoothingSchedule, obstacle_gradient, \
    obstacle_value, schedule_alpha

HF_NY = 20
LF_NY = 12


@dataclass
class HfWeights:
    """Stage weights and default reference for the quadrotor tracking cost.

    The 20 weights split into groups [p(3), euler(3), v(3), omega(3),
    f_z(4), u(4)]; the reference vector uses the same layout.
    """

    w: np.ndarray
    y_ref: np.ndarray
    q_ref: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.y_ref = np.asarray(self.y_ref, dtype=float)
        self.q_ref = np.asarray(self.q_ref, dtype=float)
        if self.w.shape != (HF_NY,) or self.y_ref.shape != (HF_NY,):
            raise ValueError("hf weights and reference must have 20 entries")
        if np.any(self.w < 0):
            raise ValueError("weights must be nonnegative")

    @property
    def w_p(self):
        return self.w[0:3]

    @property
    def w_v(self):
        return self.w[6:9]

    @property
    def w_f(self):
        return self.w[12:16]

    @property
    def w_u(self):
        return self.w[16:20]


@dataclass
class LfWeights:
    """Point-mass stage weights, terminal weight and terminal reference."""

    w: np.ndarray
    q_T: np.ndarray
    p_T: np.ndarray = field(default_factory=lambda: np.zeros(3))
    y_ref: np.ndarray = field(default_factory=lambda: np.zeros(LF_NY))

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.q_T = np.asarray(self.q_T, dtype=float)
        self.p_T = np.asarray(self.p_T, dtype=float)
        self.y_ref = np.asarray(self.y_ref, dtype=float)
        if self.w.shape != (LF_NY,):
            raise ValueError("lf weights must have 12 entries")

    @classmethod
    def aligned(cls, hf: HfWeights, m: float, w_j: np.ndarray | None = None,
                q_T: np.ndarray | None = None) -> "LfWeights":
        """Derive point-mass weights from the quadrotor cost groups.

        Position and velocity weights carry over unchanged; the acceleration
        weight is m^2 times the (uniform) rotor-thrust weight so squared
        accelerations price like squared thrust sums; the jerk weight starts
        from the input-weight relation and is usually retuned upwards.
        """
        w_f = float(hf.w_f[0])
        w_u = float(hf.w_u[0])
        w = np.concatenate([hf.w_p, hf.w_v, np.full(3, m * m * w_f),
                            np.full(3, m * m * w_u) if w_j is None
                            else np.asarray(w_j, dtype=float)])
        return cls(w=w, q_T=hf.w_p.copy() if q_T is None else np.asarray(q_T, float))


@dataclass
class SmoothingConfig:
    """Window of the linear exponent schedule over the prediction horizon."""

    enabled: bool = True
    t_start: float = 0.0
    t_end: float | None = None


@dataclass
class PhaseConfig:
    """Horizon layout and constraint-variant selection for one controller."""

    M: int
    N: int
    t_hf: float
    t_lf: float
    spacing: float = 0.0
    spacing_hf: float = 0.0
    variant_f: str = "polyhedral"
    variant_omega: str = "polyhedral"
    include_omega: bool = False
    enforce_velocity_set: bool = False
    hf_terminal: str = "hover"      # used when N == 0: "hover" or "none"
    lf_terminal: str = "rest"       # "rest" pins v = a = 0; "none" for tests
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)

    def __post_init__(self):
        if self.M < 1 or self.N < 0:
            raise ValueError("need at least one quadrotor node and N >= 0")
        if self.t_hf <= 0 or self.t_lf <= 0:
            raise ValueError("step sizes must be positive")
        if self.spacing < 0 or self.spacing_hf < 0:
            raise ValueError("spacing factors must be nonnegative")
        for v in (self.variant_f, self.variant_omega):
            if v not in ("nonlinear", "polyhedral", "box", "none"):
                raise ValueError(f"unknown constraint variant {v!r}")

    def hf_steps(self) -> np.ndarray:
        return self.t_hf * (1.0 + self.spacing_hf) ** np.arange(self.M)

    def lf_steps(self) -> np.ndarray:
        return self.t_lf * (1.0 + self.spacing) ** np.arange(self.N)

    def node_times(self) -> np.ndarray:
        """Cumulative prediction time of every node (hf, then lf)."""
        hf = np.concatenate([[0.0], np.cumsum(self.hf_steps())])
        if self.N == 0:
            return hf
        lf = hf[-1] + np.cumsum(self.lf_steps())
        return np.concatenate([hf, lf])

    @property
    def horizon(self) -> float:
        return float(self.node_times()[-1])


# row-kind tags used in the per-node constraint tables
ROW_OBSTACLE = "obstacle"
ROW_LF_SET = "lf_set"
ROW_HF_SET = "hf_set"
ROW_TRANSITION_RATE = "transition_rate"


@dataclass
class NodeRows:
    """Constraint rows of one node, split into linear and linearized parts.

    Linear rows are (Cx, Cu, d) with  Cx dx + Cu du <= d  exactly.  Nonlinear
    rows are described by tags and resolved during linearization.  Soft rows
    get a slack each, in table order: nonlinear rows first, then soft linear
    rows.
    """

    lin_Cx: np.ndarray
    lin_Cu: np.ndarray
    lin_d: np.ndarray
    lin_soft: np.ndarray
    lin_kinds: list[str]
    nl_kinds: list[str]          # "obstacle:<idx>", "f_ball", "w_ratio", "v_xy"
    nl_soft: np.ndarray

    @property
    def n_soft(self) -> int:
        return int(self.nl_soft.sum() + self.lin_soft.sum())

    @property
    def n_rows(self) -> int:
        return len(self.nl_kinds) + len(self.lin_d)


class TrajectoryOcp:
    """Discretized multiple-shooting problem over the two-phase node chain."""

    def __init__(self, cfg: PhaseConfig, quad: QuadParams, sets: SetParams,
                 hf_weights: HfWeights, lf_weights: LfWeights,
                 obstacles: list[Obstacle], pointmass_only: bool = False,
                 time_offset: float = 0.0):
        self.cfg = cfg
        self.quad = quad
        self.sets = sets
        self.hf_w = hf_weights
        self.lf_w = lf_weights
        self.obstacles = list(obstacles)
        self.pointmass_only = pointmass_only

        M, N = cfg.M, cfg.N
        if pointmass_only:
            if N < 1:
                raise ValueError("point-mass problem needs N >= 1")
            self.kinds = ["lf"] * (N + 1)
            self.hf_nodes = 0
            hf_end = float(np.sum(cfg.hf_steps()))
            self.times = hf_end + np.concatenate([[0.0], np.cumsum(cfg.lf_steps())])
            self.edge_dts = list(cfg.lf_steps())
            self.edge_kinds = ["lf"] * N
        else:
            self.kinds = ["hf"] * (M + 1) + ["lf"] * (N + 1 if N > 0 else 0)
            self.hf_nodes = M + 1
            self.times = cfg.node_times() if N > 0 else cfg.node_times()
            if N > 0:
                # transition edge takes zero prediction time
                self.times = np.insert(self.times, M + 1, self.times[M])
            self.edge_dts = list(cfg.hf_steps()) + ([0.0] + list(cfg.lf_steps())
                                                    if N > 0 else [])
            self.edge_kinds = ["hf"] * M + (["transition"] + ["lf"] * N
                                            if N > 0 else [])
        self.times = self.times + time_offset
        self.T = len(self.kinds) - 1

        self.nx = [HF_DIM if k == "hf" else LF_DIM for k in self.kinds]
        self.nu = []
        for i, k in enumerate(self.kinds):
            if i == self.T:
                self.nu.append(0)
            elif k == "hf" and self.edge_kinds[i] == "hf":
                self.nu.append(HF_NU)
            elif self.edge_kinds[i] == "transition":
                self.nu.append(3 if cfg.include_omega else 0)
            else:
                self.nu.append(LF_NU)

        # mutable per-cycle parameters
        self.x0 = np.zeros(self.nx[0])
        n_stage_hf = M if not pointmass_only else 0
        n_stage_lf = N
        self.hf_yref = np.tile(hf_weights.y_ref, (n_stage_hf, 1))
        self.lf_yref = np.tile(lf_weights.y_ref, (n_stage_lf, 1))
        self.p_T = lf_weights.p_T.copy()
        self.q_ref = hf_weights.q_ref.copy()

        self._build_alphas()
        self._build_rows()
        self._build_lf_blocks()
        self.lf_stage_pos = {i: k for k, i in enumerate(self.stage_indices("lf"))}

    # ------------------------------------------------------------------
    # structure
    # ------------------------------------------------------------------

    def _build_alphas(self):
        sm = self.cfg.smoothing
        t_f = float(self.times[-1])
        self.alphas = np.zeros((self.T + 1, len(self.obstacles)))
        for oi, o in enumerate(self.obstacles):
            if not sm.enabled or o.alpha0 <= 2.0:
                self.alphas[:, oi] = o.alpha0
                continue
            sched = SmoothingSchedule(alpha0=o.alpha0, t_f=max(t_f, 1e-9),
                                      t_start=sm.t_start, t_end=sm.t_end)
            self.alphas[:, oi] = schedule_alpha(sched, self.times)

    def _obstacle_nodes(self) -> list[int]:
        """Node indices carrying obstacle rows: all but the final hf node."""
        idx = []
        for i, k in enumerate(self.kinds):
            if k == "hf" and i >= self.hf_nodes - 1:
                continue
            idx.append(i)
        return idx

    def _build_rows(self):
        cfg, sp, quad = self.cfg, self.sets, self.quad
        n_obs = len(self.obstacles)
        obstacle_nodes = set(self._obstacle_nodes())
        self.rows: list[NodeRows] = []

        lower_ag, upper_ag = (None, None)
        if cfg.variant_f == "box":
            lower_ag, upper_ag = accel_box(sp)
        poly_f = dodecahedron_halfspaces(sp.thrust_radius) \
            if cfg.variant_f == "polyhedral" else None
        poly_w = dodecahedron_halfspaces(sp.jerk_radius) \
            if cfg.variant_omega == "polyhedral" else None
        jb = jerk_box(sp) if cfg.variant_omega == "box" else None

        for i, kind in enumerate(self.kinds):
            nxi, nui = self.nx[i], self.nu[i]
            nl_kinds: list[str] = []
            nl_soft: list[bool] = []
            Cx_rows, Cu_rows, d_rows, soft_rows, kind_rows = [], [], [], [], []

            if i in obstacle_nodes:
                for oi in range(n_obs):
                    nl_kinds.append(f"obstacle:{oi}")
                    nl_soft.append(True)

            is_stage = i < self.T
            if kind == "lf" and is_stage and self.edge_kinds[i] == "lf":
                # thrust-feasibility tier on the acceleration state
                if cfg.variant_f == "nonlinear":
                    nl_kinds.append("f_ball")
                    nl_soft.append(True)
                elif cfg.variant_f == "polyhedral":
                    for r in range(12):
                        Cx = np.zeros(nxi)
                        Cx[LF_A] = poly_f.A[r]
                        Cx_rows.append(Cx)
                        Cu_rows.append(np.zeros(nui))
                        d_rows.append(poly_f.b[r] - poly_f.A[r] @ GRAVITY_VEC)
                        soft_rows.append(True)
                        kind_rows.append(ROW_LF_SET)
                elif cfg.variant_f == "box":
                    for axis in range(3):
                        for sign, bound in ((1.0, upper_ag[axis]),
                                            (-1.0, -lower_ag[axis])):
                            Cx = np.zeros(nxi)
                            Cx[6 + axis] = sign
                            Cx_rows.append(Cx)
                            Cu_rows.append(np.zeros(nui))
                            d_rows.append(bound - sign * GRAVITY_VEC[axis])
                            soft_rows.append(True)
                            kind_rows.append(ROW_LF_SET)
                if cfg.variant_f != "box" and cfg.variant_f != "none":
                    # vertical floor shared by all tiers: a_z >= a_z_lower
                    Cx = np.zeros(nxi)
                    Cx[8] = -1.0
                    Cx_rows.append(Cx)
                    Cu_rows.append(np.zeros(nui))
                    d_rows.append(-sp.a_z_lower)
                    soft_rows.append(True)
                    kind_rows.append(ROW_LF_SET)

                # body-rate tier on the jerk input
                if cfg.variant_omega == "nonlinear":
                    nl_kinds.append("w_ratio")
                    nl_soft.append(True)
                elif cfg.variant_omega == "polyhedral":
                    for r in range(12):
                        Cx_rows.append(np.zeros(nxi))
                        Cu = np.zeros(nui)
                        Cu[:3] = poly_w.A[r]
                        Cu_rows.append(Cu)
                        d_rows.append(poly_w.b[r])
                        soft_rows.append(True)
                        kind_rows.append(ROW_LF_SET)
                elif cfg.variant_omega == "box":
                    for axis in range(3):
                        for sign in (1.0, -1.0):
                            Cx_rows.append(np.zeros(nxi))
                            Cu = np.zeros(nui)
                            Cu[axis] = sign
                            Cu_rows.append(Cu)
                            d_rows.append(jb)
                            soft_rows.append(True)
                            kind_rows.append(ROW_LF_SET)

            if kind == "hf":
                # collective thrust window; also on the junction/terminal
                # node, which otherwise floats in the cost-free null space
                # of the linearized transition
                for sign, bound in ((1.0, quad.f_th_max), (-1.0, -quad.f_th_min)):
                    Cx = np.zeros(nxi)
                    Cx[HF_F] = sign
                    Cx_rows.append(Cx)
                    Cu_rows.append(np.zeros(nui))
                    d_rows.append(bound)
                    soft_rows.append(False)
                    kind_rows.append(ROW_HF_SET)
                # body-rate boxes (z-rate bound added on top of the xy pair)
                for axis, bound in ((0, quad.omega_xy_max), (1, quad.omega_xy_max),
                                    (2, quad.omega_z_max)):
                    for sign in (1.0, -1.0):
                        Cx = np.zeros(nxi)
                        Cx[10 + axis] = sign
                        Cx_rows.append(Cx)
                        Cu_rows.append(np.zeros(nui))
                        d_rows.append(bound)
                        soft_rows.append(False)
                        kind_rows.append(ROW_HF_SET)
                if cfg.enforce_velocity_set:
                    for sign in (1.0, -1.0):
                        Cx = np.zeros(nxi)
                        Cx[9] = sign
                        Cx_rows.append(Cx)
                        Cu_rows.append(np.zeros(nui))
                        d_rows.append(quad.v_z_max)
                        soft_rows.append(False)
                        kind_rows.append(ROW_HF_SET)
                    nl_kinds.append("v_xy")
                    nl_soft.append(False)

            if (kind == "hf" and is_stage and self.edge_kinds[i] == "transition"
                    and cfg.include_omega):
                for _ in range(3):      # |pi_omega| <= s, two rows per axis
                    nl_kinds.append("rate_match")
                    nl_soft.append(True)
                    nl_kinds.append("rate_match_neg")
                    nl_soft.append(True)

            self.rows.append(NodeRows(
                lin_Cx=np.array(Cx_rows).reshape(len(d_rows), nxi),
                lin_Cu=np.array(Cu_rows).reshape(len(d_rows), nui),
                lin_d=np.array(d_rows, dtype=float),
                lin_soft=np.array(soft_rows, dtype=bool),
                lin_kinds=kind_rows,
                nl_kinds=nl_kinds,
                nl_soft=np.array(nl_soft, dtype=bool),
            ))

        self.ns = [r.n_soft for r in self.rows]

    def _build_lf_blocks(self):
        self._lf_AB = {}
        for dt in set(d for d, k in zip(self.edge_dts, self.edge_kinds) if k == "lf"):
            self._lf_AB[dt] = dyn.lf_discrete_matrices(dt)

    # terminal equality rows
    def terminal_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """(H, e) with H x_T = e at the final node; empty when disabled."""
        nxT = self.nx[-1]
        if self.kinds[-1] == "lf":
            if self.cfg.lf_terminal == "none":
                return np.zeros((0, nxT)), np.zeros(0)
            H = np.zeros((6, nxT))
            H[:, 3:9] = np.eye(6)       # rest at the terminal node: v = a = 0
            return H, np.zeros(6)
        if self.cfg.hf_terminal == "hover":
            H = np.zeros((6, nxT))
            H[0:3, HF_V] = np.eye(3)
            H[3:6, HF_W] = np.eye(3)
            return H, np.zeros(6)
        return np.zeros((0, nxT)), np.zeros(0)

    # ------------------------------------------------------------------
    # parameter updates (once per control cycle)
    # ------------------------------------------------------------------

    def set_initial_state(self, x0: np.ndarray):
        self.x0 = np.asarray(x0, dtype=float).copy()

    def set_obstacle_centers(self, centers: np.ndarray):
        if len(centers) != len(self.obstacles):
            raise ValueError("obstacle count is part of the problem structure"
                             " and cannot change between cycles")
        for oi, c in enumerate(centers):
            self.obstacles[oi] = self.obstacles[oi].moved_to(c)

    def stage_indices(self, phase: str) -> list[int]:
        return [i for i in range(self.T)
                if self.kinds[i] == phase and self.edge_kinds[i] == phase]

    def set_references(self, hf_yref: np.ndarray | None = None,
                       lf_yref: np.ndarray | None = None,
                       p_T: np.ndarray | None = None):
        if hf_yref is not None:
            self.hf_yref[...] = hf_yref
        if lf_yref is not None:
            self.lf_yref[...] = lf_yref
        if p_T is not None:
            self.p_T[...] = p_T

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------

    def dynamics_step(self, i: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        kind = self.edge_kinds[i]
        if kind == "hf":
            return dyn.rk4_step(x, u, self.edge_dts[i], self.quad)
        if kind == "lf":
            A, B = self._lf_AB[self.edge_dts[i]]
            return A @ x + B @ u
        return transition_map(x, self.quad)

    def lf_stage_cost(self, i: int, x: np.ndarray, u: np.ndarray) -> float:
        dt = self.edge_dts[i]
        k = self.lf_stage_pos[i]
        y = np.concatenate([x, u])
        e = y - self.lf_yref[k]
        return float(dt * np.sum(self.lf_w.w * e * e))

    def hf_stage_cost(self, i: int, x: np.ndarray, u: np.ndarray) -> float:
        dt = self.edge_dts[i]
        y = hf_tracking_vector(x, u, self.q_ref)
        e = y - self.hf_yref[i]
        return float(dt * np.sum(self.hf_w.w * e * e))

    def terminal_cost(self, x: np.ndarray) -> float:
        p = x[LF_P] if self.kinds[-1] == "lf" else x[HF_P]
        e = p - self.p_T
        return float(np.sum(self.lf_w.q_T * e * e))

    def lf_cost(self, states: list[np.ndarray], inputs: list[np.ndarray]) -> float:
        """Point-mass horizon cost at the (possibly infeasible) iterate."""
        total = 0.0
        for i in self.stage_indices("lf"):
            total += self.lf_stage_cost(i, states[i], inputs[i])
        if self.kinds[-1] == "lf":
            total += self.terminal_cost(states[-1])
        return total

    def total_cost(self, states, inputs) -> float:
        total = self.lf_cost(states, inputs)
        for i in self.stage_indices("hf"):
            total += self.hf_stage_cost(i, states[i], inputs[i])
        if self.kinds[-1] == "hf" and self.cfg.hf_terminal != "none":
            total += self.terminal_cost(states[-1])
        return total

    def describe(self) -> dict:
        """Dimensions and constraint kinds per node, for goldens and debug."""
        nodes = []
        for i in range(self.T + 1):
            r = self.rows[i]
            kinds: dict[str, int] = {}
            for k in r.nl_kinds:
                tag = "obstacle" if k.startswith("obstacle") else k
                kinds[tag] = kinds.get(tag, 0) + 1
            for k in r.lin_kinds:
                kinds[k] = kinds.get(k, 0) + 1
            nodes.append({
                "kind": self.kinds[i], "nx": self.nx[i], "nu": self.nu[i],
                "ns": self.ns[i], "n_ineq": r.n_rows, "rows": kinds,
                "time": float(self.times[i]),
                "alpha": [float(a) for a in self.alphas[i]] if len(self.obstacles) else [],
            })
        HT, eT = self.terminal_rows()
        return {
            "nodes": nodes,
            "edges": [{"kind": k, "dt": float(d)} for k, d in
                      zip(self.edge_kinds, self.edge_dts)],
            "n_states": int(sum(self.nx)),
            "n_inputs": int(sum(self.nu)),
            "n_slacks": int(sum(self.ns)),
            "n_eq": int(self.nx[0] + sum(self.nx[i + 1] for i in range(self.T))
                        + HT.shape[0]),
            "horizon": float(self.times[-1] - self.times[0]),
        }


def hf_tracking_vector(x: np.ndarray, u: np.ndarray, q_ref: np.ndarray) -> np.ndarray:
    """Tracking output [p, euler error, v, omega, f_z, u] of one hf node."""
    y = np.empty(HF_NY)
    y[0:3] = x[HF_P]
    y[3:6] = attitude_error(x[HF_Q], q_ref)
    y[6:9] = x[HF_V]
    y[9:12] = x[HF_W]
    y[12:16] = x[HF_F]
    y[16:20] = u
    return y


def transition_map(x_hf: np.ndarray, params: QuadParams) -> np.ndarray:
    """Project the final quadrotor state onto the point-mass chain.

    Position and velocity carry over; the acceleration is the thrust-induced
    one (attitude-rotated collective thrust minus gravity, residuals
    excluded).
    """
    x_hf = np.asarray(x_hf, dtype=float)
    q = x_hf[..., HF_Q]
    thrust = x_hf[..., HF_F].sum(axis=-1)
    zeros = np.zeros_like(thrust)
    a = dyn.quat_rotate(q, np.stack([zeros, zeros, thrust], axis=-1)) / params.m \
        - GRAVITY_VEC
    return np.concatenate([x_hf[..., HF_P], x_hf[..., HF_V], a], axis=-1)


def transition_residual(x_hf: np.ndarray, x_lf: np.ndarray, u_lf: np.ndarray,
                        params: QuadParams, include_omega: bool = False) -> np.ndarray:
    """Coupling residual between the phase-junction states.

    Stacks the position/velocity match, the thrust-acceleration match and,
    optionally, the body-rate/jerk match.  The rate rows use the
    gravity-shifted acceleration, whose norm the point-mass sets keep away
    from zero; a degenerate norm raises.
    """
    x_hf = np.asarray(x_hf, dtype=float)
    x_lf = np.asarray(x_lf, dtype=float)
    pi = transition_map(x_hf, params) - x_lf
    if not include_omega:
        return pi
    a_shift = x_lf[LF_A] + GRAVITY_VEC
    norm = np.linalg.norm(a_shift)
    if norm < 1e-9:
        raise ValueError("degenerate acceleration at the junction")
    j = np.asarray(u_lf, dtype=float)
    q = x_hf[HF_Q]
    omega = x_hf[HF_W]
    lhs = np.array([omega[0], -omega[1], 0.0])
    rhs = dyn.quat_rotate(q, j / norm - a_shift * (a_shift @ j) / norm ** 3)
    return np.concatenate([pi, lhs - rhs])


def transition_jacobian(x_hf: np.ndarray, params: QuadParams,
                        eps: float = 1e-7) -> np.ndarray:
    """Forward-difference Jacobian of `transition_map` (9 x 17)."""
    base = transition_map(x_hf, params)
    X = np.repeat(x_hf[None, :], HF_DIM, axis=0)
    X[np.arange(HF_DIM), np.arange(HF_DIM)] += eps
    pert = transition_map(X, params)
    return (pert - base[None, :]).T / eps


# ------------------------------------------------------------------
# builders
# ------------------------------------------------------------------

def build_unified(cfg: PhaseConfig, quad: QuadParams, sets: SetParams,
                  hf_weights: HfWeights, lf_weights: LfWeights,
                  obstacles: list[Obstacle]) -> TrajectoryOcp:
    """Two-phase problem; with N = 0 it degenerates to the nominal MPC."""
    return TrajectoryOcp(cfg, quad, sets, hf_weights, lf_weights, obstacles)


def build_pointmass(cfg: PhaseConfig, quad: QuadParams, sets: SetParams,
                    lf_weights: LfWeights,
                    obstacles: list[Obstacle]) -> TrajectoryOcp:
    """Standalone point-mass problem sharing the unified second phase.

    Obstacle exponents keep the unified problem's time offsets, so the two
    problems see identical constraints on matching nodes.
    """
    dummy_hf = HfWeights(w=np.zeros(HF_NY), y_ref=np.zeros(HF_NY))
    return TrajectoryOcp(cfg, quad, sets, dummy_hf, lf_weights, obstacles,
                         pointmass_only=True)
