"""Closed-loop simulation driver, metric collection, and trace export.

A run alternates one controller cycle with one RK4 plant step at the
scenario's sampling time, recording states, applied inputs, references,
per-cycle controller diagnostics, and obstacle poses.  Two files describe a
run:

  trace.csv    deterministic per-step data (bit-identical across reruns of
               the same seed); schema below,
  timing.csv   per-step wall-clock solve times (machine-dependent).

The split keeps the determinism contract checkable on raw bytes while still
exporting compute metrics.  `summary()` returns the JSON-ready metrics
bundle; mean/median/max statistics are always recomputable from the raw
columns.

trace.csv columns (schema v1):
  step, t, x0..x16 (state), u0..u3, pref_x, pref_y, pref_z,
  vref_x, vref_y, vref_z, err_pos, lf_cost, branch_cost_min, restart,
  qp_status, kkt, max_slack, then obs{i}_x, obs{i}_y, obs{i}_z per obstacle.

timing.csv columns: step, time_total, time_main, time_branch_max,
time_planner (seconds).
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .environments import Scenario, eval_cost
from .obstacles import brownian_step
from .ocp import hf_tracking_vector
from .solver import LinearizationError

TRACE_SCHEMA_VERSION = 1


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


@dataclass
class RunTrace:
    """Everything recorded during one closed-loop run."""

    scenario: str
    controller: str
    seed: int
    sim_dt: float
    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    p_ref: np.ndarray
    v_ref: np.ndarray
    y: np.ndarray
    y_ref: np.ndarray
    lf_cost: np.ndarray
    branch_cost_min: np.ndarray
    restart: np.ndarray
    qp_status: list[str]
    kkt: np.ndarray
    max_slack: np.ndarray
    obstacles: np.ndarray           # (steps, n_obs, 3)
    obstacle_shapes: list           # per obstacle: dims, alpha0, margin
    time_total: np.ndarray
    time_main: np.ndarray
    time_branch_max: np.ndarray
    time_planner: np.ndarray
    eval_cost: float
    eval_cost_running: np.ndarray
    truncated: bool = False
    failure: str = ""

    @property
    def steps(self) -> int:
        return len(self.t)

    @property
    def pos_error(self) -> np.ndarray:
        return np.linalg.norm(self.states[:, 0:3] - self.p_ref, axis=1)

    def error_stats(self) -> dict:
        e = self.pos_error
        return {"mean": float(np.mean(e)), "median": float(np.median(e)),
                "max": float(np.max(e))}

    def compute_stats_ms(self) -> dict:
        ms = 1e3 * self.time_total
        return {"mean": float(np.mean(ms)), "median": float(np.median(ms)),
                "max": float(np.max(ms))}

    def summary(self) -> dict:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "scenario": self.scenario,
            "controller": self.controller,
            "seed": self.seed,
            "sim_dt": self.sim_dt,
            "steps": self.steps,
            "eval_cost": self.eval_cost,
            "tracking_error_m": self.error_stats(),
            "compute_ms": self.compute_stats_ms(),
            "restarts": int(np.sum(self.restart)),
            "truncated": self.truncated,
            "failure": self.failure,
            "obstacles": self.obstacle_shapes,
        }

    def trace_header(self) -> list[str]:
        cols = (["step", "t"] + [f"x{i}" for i in range(17)]
                + [f"u{i}" for i in range(4)]
                + ["pref_x", "pref_y", "pref_z", "vref_x", "vref_y", "vref_z",
                   "err_pos", "lf_cost", "branch_cost_min", "restart",
                   "qp_status", "kkt", "max_slack"])
        for i in range(self.obstacles.shape[1]):
            cols += [f"obs{i}_x", f"obs{i}_y", f"obs{i}_z"]
        return cols

    def write_trace_csv(self, path):
        err = self.pos_error
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.trace_header())
            for k in range(self.steps):
                row = ([k, self.t[k]] + list(self.states[k])
                       + list(self.inputs[k]) + list(self.p_ref[k])
                       + list(self.v_ref[k])
                       + [err[k], self.lf_cost[k], self.branch_cost_min[k],
                          int(self.restart[k]), self.qp_status[k],
                          self.kkt[k], self.max_slack[k]]
                       + list(self.obstacles[k].ravel()))
                w.writerow([_fmt(v) for v in row])

    def write_timing_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time_total", "time_main", "time_branch_max",
                        "time_planner"])
            for k in range(self.steps):
                w.writerow([_fmt(v) for v in
                            (k, self.time_total[k], self.time_main[k],
                             self.time_branch_max[k], self.time_planner[k])])

    def write_summary_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_closed_loop(controller, scenario: Scenario, steps: int | None = None,
                    seed: int = 0, controller_name: str = "",
                    reset_controller: bool = True) -> RunTrace:
    """Simulate the plant under a controller; deterministic per seed.

    A controller hard failure (non-finite state or linearization error)
    truncates the run and flags the trace instead of raising.  Pass
    `reset_controller=False` to keep a pre-seeded controller state (used by
    experiments that steer the initial guess on purpose).
    """
    steps = scenario.sim_steps if steps is None else steps
    dt = scenario.sim_dt
    quad = scenario.quad
    obstacles = scenario.fresh_obstacles()
    motions = scenario.fresh_motions(seed)

    x = scenario.x0.copy() if scenario.x0 is not None \
        else dyn.hover_state(quad)
    if reset_controller:
        controller.reset(x, 0.0)

    n_obs = len(obstacles)
    rec = {k: [] for k in ("t", "x", "u", "p_ref", "v_ref", "y", "y_ref",
                           "lf", "bmin", "restart", "status", "kkt", "slack",
                           "obs", "tt", "tm", "tb", "tp")}
    truncated = False
    failure = ""
    for k in range(steps):
        t = k * dt
        try:
            u, diag = controller.control(x, t, obstacles)
        except (LinearizationError, ValueError) as exc:
            truncated, failure = True, f"controller failure at step {k}: {exc}"
            break
        if not np.all(np.isfinite(u)):
            truncated, failure = True, f"non-finite control at step {k}"
            break

        p_ref, v_ref, _ = scenario.provider.reference_at(t)
        y = hf_tracking_vector(x, u, scenario.hf_weights.q_ref)
        y_ref = scenario.hf_weights.y_ref.copy()
        y_ref[0:3] = p_ref
        y_ref[6:9] = v_ref

        rec["t"].append(t)
        rec["x"].append(x.copy())
        rec["u"].append(u.copy())
        rec["p_ref"].append(p_ref)
        rec["v_ref"].append(v_ref)
        rec["y"].append(y)
        rec["y_ref"].append(y_ref)
        rec["lf"].append(diag.lf_cost)
        rec["bmin"].append(min(diag.branch_costs) if diag.branch_costs
                           else math.nan)
        rec["restart"].append(diag.restart)
        rec["status"].append(diag.qp_status)
        rec["kkt"].append(diag.kkt_total)
        rec["slack"].append(diag.max_slack)
        rec["obs"].append(np.array([o.center for o in obstacles])
                          if n_obs else np.zeros((0, 3)))
        rec["tt"].append(diag.time_total)
        rec["tm"].append(diag.time_main)
        rec["tb"].append(max(diag.time_branches) if diag.time_branches else 0.0)
        rec["tp"].append(diag.time_planner)

        x = dyn.rk4_step(x, u, dt, quad)
        if not np.all(np.isfinite(x)):
            truncated, failure = True, f"non-finite state after step {k}"
            break
        if motions is not None:
            for oi in range(n_obs):
                obstacles[oi] = brownian_step(obstacles[oi], motions[oi], dt)

    n = len(rec["t"])
    Y = np.array(rec["y"]).reshape(n, 20)
    Y_ref = np.array(rec["y_ref"]).reshape(n, 20)
    e2 = ((Y - Y_ref) ** 2) @ scenario.eval_weights.w
    running = scenario.eval_weights.t_sim * np.cumsum(e2)
    total = eval_cost(Y, Y_ref, scenario.eval_weights) if n else 0.0

    return RunTrace(
        scenario=scenario.name, controller=controller_name, seed=seed,
        sim_dt=dt,
        t=np.array(rec["t"]), states=np.array(rec["x"]).reshape(n, 17),
        inputs=np.array(rec["u"]).reshape(n, 4),
        p_ref=np.array(rec["p_ref"]).reshape(n, 3),
        v_ref=np.array(rec["v_ref"]).reshape(n, 3),
        y=Y, y_ref=Y_ref,
        lf_cost=np.array(rec["lf"]), branch_cost_min=np.array(rec["bmin"]),
        restart=np.array(rec["restart"], dtype=bool),
        qp_status=list(rec["status"]), kkt=np.array(rec["kkt"]),
        max_slack=np.array(rec["slack"]),
        obstacles=np.array(rec["obs"]).reshape(n, n_obs, 3),
        obstacle_shapes=[{"dims": [float(v) for v in o.dims],
                          "alpha0": float(o.alpha0),
                          "margin": float(o.margin)}
                         for o in scenario.obstacles],
        time_total=np.array(rec["tt"]), time_main=np.array(rec["tm"]),
        time_branch_max=np.array(rec["tb"]), time_planner=np.array(rec["tp"]),
        eval_cost=total, eval_cost_running=running,
        truncated=truncated, failure=failure,
    )


@dataclass
class SweepEntry:
    """One sweep configuration; `build` must return (controller, scenario)."""

    name: str
    build: object
    steps: int | None = None
    seed: int = 0


@dataclass
class SweepRow:
    name: str
    eval_cost: float
    time_mean_ms: float
    time_median_ms: float
    time_max_ms: float
    err_mean: float
    err_max: float
    restarts: int
    truncated: bool


def _execute_entry(entry: SweepEntry) -> SweepRow:
    controller, scenario = entry.build()
    trace = run_closed_loop(controller, scenario, steps=entry.steps,
                            seed=entry.seed, controller_name=entry.name)
    c = trace.compute_stats_ms()
    e = trace.error_stats()
    return SweepRow(entry.name, trace.eval_cost, c["mean"], c["median"],
                    c["max"], e["mean"], e["max"],
                    int(np.sum(trace.restart)), trace.truncated)


def pareto_sweep(entries: list[SweepEntry], workers: int = 1) -> list[SweepRow]:
    """Run every configuration; rows come back in the entries' order."""
    if not entries:
        raise ValueError("sweep needs at least one entry")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_execute_entry, entries))
    else:
        rows = [_execute_entry(e) for e in entries]
    return rows


def normalize_rows(rows: list[SweepRow], base_name: str) -> list[dict]:
    """Attach cost/compute columns normalized by a reference row."""
    base = next(r for r in rows if r.name == base_name)
    out = []
    for r in rows:
        d = dict(r.__dict__)
        d["cost_norm"] = r.eval_cost / base.eval_cost if base.eval_cost else math.nan
        d["time_norm"] = r.time_mean_ms / base.time_mean_ms \
            if base.time_mean_ms else math.nan
        out.append(d)
    return out


def write_sweep_csv(rows: list[dict] | list[SweepRow], path):
    dicts = [r if isinstance(r, dict) else dict(r.__dict__) for r in rows]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(dicts[0].keys()))
        w.writeheader()
        for d in dicts:
            w.writerow({k: _fmt(v) for k, v in d.items()})
