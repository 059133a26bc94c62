"""Closed-loop controllers: unified two-phase MPC with parallel restarts,
plain long-horizon MPC, and a hierarchical planner-tracker baseline.

The unified controller runs one real-time iteration of the two-phase
problem per cycle, then lets S independently warm-started point-mass
problems compete on the second-horizon cost.  All of them start from the
unified iterate's first point-mass node, so any branch plan is admissible
as a reinitialization; a branch wins when its cost is lower and its largest
constraint slack stays below the feasibility gate.  The winning branch's
primal block is copied into the unified problem before everything shifts.
Branch costs are evaluated on the raw multiple-shooting iterates, shooting
gaps included, which tracks the closed-loop cost well enough to rank plans.

Per-cycle compute is accounted as max(unified, branches) plus nothing else:
the branches are independent solver instances and may run on parallel
cores; executing them sequentially in-process keeps runs bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .dynamics import GRAVITY_VEC, QuadParams
from .feasible_sets import SetParams, accel_box, jerk_box
from .obstacles import Obstacle
from .ocp import (HfWeights, LfWeights, PhaseConfig, TrajectoryOcp,
                  build_pointmass, build_unified, transition_map)
from .solver import SolveReport, SolverOptions, SqpIterate, SqpSolver


@dataclass
class ParallelConfig:
    """Parallel point-mass restart settings (S branches, reinit every P).

    `restart_margin` is the relative cost improvement a branch must show
    before its plan replaces the unified second horizon; without the
    deadband, branches that merely re-converge to the warm plan win on
    floating-point jitter and churn the iterate.
    """

    branches: int = 1
    reinit_period: int = 7
    feasibility_tol: float = 1e-3
    restart_margin: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.branches < 0 or self.reinit_period < 1:
            raise ValueError("need branches >= 0 and reinit period >= 1")


@dataclass
class HierarchicalConfig:
    replan_interval: int = 10
    planner_warmup_iters: int = 20
    replan_iters: int = 5
    replan_tol: float = 1e-3
    tracker_position_weight: tuple = (10.0, 10.0, 10.0)
    # velocity damping against the plan; tracking raw positions alone makes
    # the inner loop underdamped in clutter
    tracker_velocity_weight: tuple = (10.0, 10.0, 10.0)

    def __post_init__(self):
        if self.replan_interval < 1 or self.replan_iters < 1:
            raise ValueError("replan interval and iterations must be >= 1")


@dataclass
class CycleDiag:
    """Per-cycle controller diagnostics fed into the run trace."""

    lf_cost: float = np.nan
    lf_cost_post: float = np.nan
    branch_costs: list = field(default_factory=list)
    branch_slacks: list = field(default_factory=list)
    restart: bool = False
    qp_status: str = "ok"
    kkt_total: float = np.nan
    max_slack: float = 0.0
    time_main: float = 0.0
    time_branches: list = field(default_factory=list)
    time_planner: float = 0.0

    @property
    def time_total(self) -> float:
        """Cycle wall time under the parallel-cores accounting."""
        par = max(self.time_branches) if self.time_branches else 0.0
        return max(self.time_main, par) + self.time_planner


def random_lf_init(x0_lf: np.ndarray, ocp: TrajectoryOcp,
                   rng: np.random.Generator) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Random jerk rollout through the box-tier point-mass sets.

    Jerks are drawn uniformly from the per-axis jerk box; before each step
    the jerk is projected so the propagated acceleration stays inside the
    acceleration box, which keeps the whole rollout set-feasible by
    construction (given a feasible start).
    """
    lower, upper = accel_box(ocp.sets)
    jb = jerk_box(ocp.sets)
    states = [np.asarray(x0_lf, dtype=float).copy()]
    inputs = []
    for k, i in enumerate(ocp.stage_indices("lf")):
        dt = ocp.edge_dts[i]
        x = states[-1]
        j = rng.uniform(-jb, jb, size=3)
        a_next = x[6:9] + j * dt
        a_clamped = np.clip(a_next + GRAVITY_VEC, lower, upper) - GRAVITY_VEC
        j = np.clip((a_clamped - x[6:9]) / dt, -jb, jb)
        inputs.append(j)
        states.append(dyn.lf_step(x, j, dt))
    inputs.append(np.zeros(0))
    return states, inputs


class _ReferenceMixin:
    """Shared reference plumbing: fills per-node tracking rows from a
    provider exposing position/velocity/acceleration at absolute times."""

    def _hf_ref_rows(self, t: float, ocp: TrajectoryOcp) -> np.ndarray:
        idx = ocp.stage_indices("hf")
        rows = np.tile(self.hf_w.y_ref, (len(idx), 1))
        for r, i in enumerate(idx):
            p, v, _ = self.provider.reference_at(t + ocp.times[i])
            rows[r, 0:3] = p
            rows[r, 6:9] = v
        return rows

    def _lf_ref_rows(self, t: float, ocp: TrajectoryOcp) -> np.ndarray:
        idx = ocp.stage_indices("lf")
        rows = np.tile(self.lf_w.y_ref, (len(idx), 1))
        for r, i in enumerate(idx):
            p, v, a = self.provider.reference_at(t + ocp.times[i])
            rows[r, 0:3] = p
            rows[r, 3:6] = v
            rows[r, 6:9] = a
        return rows

    def _terminal_ref(self, t: float, ocp: TrajectoryOcp) -> np.ndarray:
        p, _, _ = self.provider.reference_at(t + ocp.times[-1])
        return p


class UnifiedController(_ReferenceMixin):
    """Two-phase MPC with progressive smoothing and parallel restarts."""

    def __init__(self, cfg: PhaseConfig, quad: QuadParams, sets: SetParams,
                 hf_weights: HfWeights, lf_weights: LfWeights,
                 obstacles: list[Obstacle], provider,
                 parallel: ParallelConfig | None = None,
                 opts: SolverOptions | None = None,
                 mode: str = "rti", converged_tol: float = 1e-4,
                 converged_iters: int = 50):
        self.cfg = cfg
        self.quad = quad
        self.hf_w = hf_weights
        self.lf_w = lf_weights
        self.provider = provider
        self.parallel = parallel or ParallelConfig(branches=0)
        self.mode = mode
        self.converged_tol = converged_tol
        self.converged_iters = converged_iters

        self.ocp = build_unified(cfg, quad, sets, hf_weights, lf_weights,
                                 obstacles)
        self.solver = SqpSolver(self.ocp, opts)
        self.branches: list[tuple[TrajectoryOcp, SqpSolver]] = []
        if cfg.N > 0:
            for _ in range(self.parallel.branches):
                pm = build_pointmass(cfg, quad, sets, lf_weights, obstacles)
                self.branches.append((pm, SqpSolver(pm, opts)))
        self.rng = np.random.default_rng(self.parallel.seed)
        self.iterate: SqpIterate | None = None
        self.branch_iterates: list[SqpIterate] = []
        self.cycle = 0
        # the coarse phase advances one node only once its own step has
        # elapsed; shifting it every cycle would misalign the plan by
        # (t_lf - t_hf) per cycle and wreck the warm start
        self._lf_shift_debt = 0.0

    # nodes of the unified problem holding the point-mass block
    def _lf_node_range(self) -> range:
        return range(self.ocp.hf_nodes, self.ocp.T + 1)

    def reset(self, x_hat: np.ndarray, t: float):
        self.cycle = 0
        self._lf_shift_debt = 0.0
        self.rng = np.random.default_rng(self.parallel.seed)
        self.iterate = self.solver.cold_start(x_hat)
        self.branch_iterates = []
        x_lf = transition_map(x_hat, self.quad)
        for pm, solver in self.branches:
            it = solver.cold_start(x_lf)
            self.branch_iterates.append(it)
        self._randomize_branches(x_lf)

    def _randomize_branches(self, x_lf: np.ndarray):
        for (pm, _), it in zip(self.branches, self.branch_iterates):
            states, inputs = random_lf_init(x_lf, pm, self.rng)
            it.states = states
            it.inputs = inputs
            it.slacks = [np.zeros(n) for n in pm.ns]
            it.lam[:] = 0.0
            it.mu[:] = 0.0

    def _sync_parameters(self, t: float, obstacles: list[Obstacle]):
        centers = [o.center for o in obstacles]
        self.ocp.set_obstacle_centers(centers)
        self.ocp.set_references(hf_yref=self._hf_ref_rows(t, self.ocp),
                                lf_yref=self._lf_ref_rows(t, self.ocp),
                                p_T=self._terminal_ref(t, self.ocp))
        for pm, _ in self.branches:
            pm.set_obstacle_centers(centers)
            pm.set_references(lf_yref=self._lf_ref_rows(t, pm),
                              p_T=self._terminal_ref(t, pm))

    def _copy_branch_into_unified(self, branch_it: SqpIterate):
        nodes = list(self._lf_node_range())
        for j, i in enumerate(nodes):
            self.iterate.states[i] = branch_it.states[j].copy()
            if self.iterate.inputs[i].size and branch_it.inputs[j].size:
                self.iterate.inputs[i] = branch_it.inputs[j].copy()
            if self.iterate.slacks[i].size == branch_it.slacks[j].size:
                self.iterate.slacks[i] = branch_it.slacks[j].copy()

    def lf_block_cost(self) -> float:
        return self.ocp.lf_cost(self.iterate.states, self.iterate.inputs)

    def control(self, x_hat: np.ndarray, t: float,
                obstacles: list[Obstacle]) -> tuple[np.ndarray, CycleDiag]:
        if self.iterate is None:
            self.reset(x_hat, t)
        self._sync_parameters(t, obstacles)
        diag = CycleDiag()

        if self.mode == "converged":
            self.iterate, report = self.solver.solve_converged(
                self.iterate, x_hat, tol=self.converged_tol,
                max_iter=self.converged_iters)
            u0 = self.iterate.inputs[0].copy()
        else:
            self.iterate, u0, report = self.solver.rti_step(self.iterate, x_hat)
        diag.qp_status = report.qp_status
        diag.kkt_total = report.kkt.total
        diag.max_slack = report.max_slack
        diag.time_main = report.time
        diag.lf_cost = self.lf_block_cost() if self.cfg.N > 0 else np.nan
        diag.lf_cost_post = diag.lf_cost

        if self.branches and self.cfg.N > 0:
            x_lf0 = self.iterate.states[self.ocp.hf_nodes].copy()
            gate = diag.lf_cost - self.parallel.restart_margin * \
                max(abs(diag.lf_cost), 1e-12)
            best = None
            for bi, ((pm, solver), it) in enumerate(
                    zip(self.branches, self.branch_iterates)):
                if self.mode == "converged":
                    new_it, rep = solver.solve_converged(
                        it, x_lf0, tol=self.converged_tol,
                        max_iter=self.converged_iters)
                else:
                    new_it, _, rep = solver.rti_step(it, x_lf0)
                self.branch_iterates[bi] = new_it
                cost = pm.lf_cost(new_it.states, new_it.inputs)
                slack = solver.max_slack(new_it)
                diag.branch_costs.append(cost)
                diag.branch_slacks.append(slack)
                diag.time_branches.append(rep.time)
                feasible = (slack <= self.parallel.feasibility_tol
                            and rep.qp_status != "failed")
                if feasible and cost < gate and \
                        (best is None or cost < best[0]):
                    best = (cost, bi)
            if best is not None:
                self._copy_branch_into_unified(self.branch_iterates[best[1]])
                diag.restart = True
                diag.lf_cost_post = self.lf_block_cost()

            if (self.cycle % self.parallel.reinit_period) == \
                    self.parallel.reinit_period - 1:
                self._randomize_branches(x_lf0)

        phases = ["hf"]
        self._lf_shift_debt += self.cfg.t_hf
        if self._lf_shift_debt >= self.cfg.t_lf - 1e-12:
            self._lf_shift_debt -= self.cfg.t_lf
            phases.append("lf")
        self.iterate = self.solver.shift(self.iterate, tuple(phases))
        if "lf" in phases:
            for bi, (_, solver) in enumerate(self.branches):
                self.branch_iterates[bi] = solver.shift(self.branch_iterates[bi])
        self.cycle += 1
        return u0, diag


class StandardMpcController(UnifiedController):
    """Single-phase long-horizon MPC: the N = 0 unified problem."""

    def __init__(self, cfg: PhaseConfig, quad, sets, hf_weights, lf_weights,
                 obstacles, provider, opts=None, mode="rti",
                 converged_tol=1e-4, converged_iters=50):
        if cfg.N != 0:
            raise ValueError("standard MPC uses N = 0")
        super().__init__(cfg, quad, sets, hf_weights, lf_weights, obstacles,
                         provider, ParallelConfig(branches=0), opts, mode,
                         converged_tol, converged_iters)


class HierarchicalController(_ReferenceMixin):
    """Planner-tracker baseline: a point-mass MPC replanned every few
    cycles feeds position/velocity references to a short-horizon MPC."""

    def __init__(self, planner_cfg: PhaseConfig, tracker_cfg: PhaseConfig,
                 quad: QuadParams, sets: SetParams, hf_weights: HfWeights,
                 lf_weights: LfWeights, obstacles: list[Obstacle], provider,
                 hier: HierarchicalConfig | None = None,
                 opts: SolverOptions | None = None, mode: str = "rti",
                 converged_tol: float = 1e-4, converged_iters: int = 50):
        if tracker_cfg.N != 0:
            raise ValueError("tracker runs the quadrotor phase only")
        self.quad = quad
        self.provider = provider
        self.hier = hier or HierarchicalConfig()
        self.mode = mode
        self.converged_tol = converged_tol
        self.converged_iters = converged_iters
        self.lf_w = lf_weights

        w = hf_weights.w.copy()
        w[0:3] = np.asarray(self.hier.tracker_position_weight, dtype=float)
        w[6:9] = np.asarray(self.hier.tracker_velocity_weight, dtype=float)
        self.hf_w = HfWeights(w=w, y_ref=hf_weights.y_ref.copy(),
                              q_ref=hf_weights.q_ref.copy())

        self.planner_ocp = build_pointmass(planner_cfg, quad, sets,
                                           lf_weights, obstacles)
        # the planner plans from the current state, not behind a quadrotor
        # phase: drop the prediction-time offset
        self.planner_ocp.times = self.planner_ocp.times - self.planner_ocp.times[0]
        self.planner = SqpSolver(self.planner_ocp, opts)
        self.tracker_ocp = build_unified(tracker_cfg, quad, sets, self.hf_w,
                                         lf_weights, obstacles)
        self.tracker = SqpSolver(self.tracker_ocp, opts)

        self.plan: SqpIterate | None = None
        self.plan_time = 0.0
        self.plan_ok = False
        self.tracker_it: SqpIterate | None = None
        self.cycle = 0

    def reset(self, x_hat: np.ndarray, t: float):
        self.cycle = 0
        self.tracker_it = self.tracker.cold_start(x_hat)
        self.plan = self.planner.cold_start(transition_map(x_hat, self.quad))
        self.plan_time = t
        self.plan_ok = False

    def _replan(self, x_hat: np.ndarray, t: float) -> float:
        x_lf = transition_map(x_hat, self.quad)
        self.planner_ocp.set_references(
            lf_yref=self._lf_ref_rows(t, self.planner_ocp),
            p_T=self._terminal_ref(t, self.planner_ocp))
        iters = self.hier.planner_warmup_iters if not self.plan_ok \
            else self.hier.replan_iters
        self.plan, rep = self.planner.solve_converged(
            self.plan, x_lf, tol=self.hier.replan_tol, max_iter=iters)
        if rep.qp_status != "failed":
            self.plan_ok = True
            self.plan_time = t
        return rep.time

    def plan_state_at(self, tau: float) -> tuple[np.ndarray, np.ndarray]:
        """Exact plan interpolation: piecewise-cubic between plan nodes."""
        times = self.planner_ocp.times
        tau = min(max(tau, times[0]), times[-1])
        k = int(np.searchsorted(times, tau, side="right") - 1)
        k = min(k, len(times) - 2)
        dt = tau - times[k]
        x = self.plan.states[k]
        if dt <= 0:
            return x[0:3].copy(), x[3:6].copy()
        u = self.plan.inputs[k]
        xk = dyn.lf_step(x, u, dt) if u.size else x
        return xk[0:3], xk[3:6]

    def control(self, x_hat: np.ndarray, t: float,
                obstacles: list[Obstacle]) -> tuple[np.ndarray, CycleDiag]:
        if self.tracker_it is None:
            self.reset(x_hat, t)
        diag = CycleDiag()
        centers = [o.center for o in obstacles]
        self.planner_ocp.set_obstacle_centers(centers)
        self.tracker_ocp.set_obstacle_centers(centers)

        if self.cycle % self.hier.replan_interval == 0 or not self.plan_ok:
            diag.time_planner = self._replan(x_hat, t)

        # tracker references sampled from the frozen plan at absolute times
        idx = self.tracker_ocp.stage_indices("hf")
        rows = np.tile(self.hf_w.y_ref, (len(idx), 1))
        for r, i in enumerate(idx):
            tau = (t - self.plan_time) + self.tracker_ocp.times[i]
            p, v = self.plan_state_at(tau)
            rows[r, 0:3] = p
            rows[r, 6:9] = v
        p_T, _ = self.plan_state_at((t - self.plan_time)
                                    + self.tracker_ocp.times[-1])
        self.tracker_ocp.set_references(hf_yref=rows, p_T=p_T)

        if self.mode == "converged":
            self.tracker_it, rep = self.tracker.solve_converged(
                self.tracker_it, x_hat, tol=self.converged_tol,
                max_iter=self.converged_iters)
            u0 = self.tracker_it.inputs[0].copy()
        else:
            self.tracker_it, u0, rep = self.tracker.rti_step(self.tracker_it,
                                                             x_hat)
        diag.qp_status = rep.qp_status
        diag.kkt_total = rep.kkt.total
        diag.max_slack = rep.max_slack
        diag.time_main = rep.time
        self.tracker_it = self.tracker.shift(self.tracker_it)
        self.cycle += 1
        return u0, diag
