"""Deterministic figure rendering from run artifacts.

Five figure kinds:

  trajectory        top-down flown path vs reference with obstacle outlines
                    drawn as level-1 contours of the p-norm shape at its
                    sharp exponent (inflated dimensions included),
  restart_cost      second-horizon cost of the main problem vs the best
                    parallel branch over time; the branch's per-period decay
                    shows up as descending stairs, restart copies as markers,
  pareto            normalized closed-loop cost vs normalized compute,
  constraint_panels velocity, body rates, and collective thrust with their
                    bounds along the run,
  step_response     rise time vs quadrotor-phase horizon per constraint tier.

Rendering is a pure function of the input files: fixed style, fixed dpi,
stripped output metadata, so re-rendering reproduces images byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import read_summary, read_table, read_trace  # noqa: E402

FIGURE_KINDS = ("trajectory", "restart_cost", "pareto", "constraint_panels",
                "step_response")

matplotlib.rcParams.update({
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "svg.hashsalt": "mfmpc-plots",
    "font.size": 9,
})


@dataclass
class FigureSpec:
    kind: str
    inputs: dict
    output: str
    style: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}; "
                             f"available: {FIGURE_KINDS}")
        if not isinstance(self.inputs, dict):
            raise ValueError("inputs must map roles to file paths")


def _save(fig, spec: FigureSpec) -> str:
    out = spec.output
    meta = {"Software": None} if out.endswith(".png") else \
        {"Date": None, "Creator": None}
    fig.savefig(out, metadata=meta)
    plt.close(fig)
    return out


def _norm_contour(ax, center, dims, alpha, **kw):
    """Level-1 outline of the scaled p-norm shape in the xy plane."""
    th = np.linspace(0.0, 2.0 * math.pi, 361)
    d = np.stack([np.cos(th), np.sin(th)])
    # radius where ((|d_x r / a|^p + |d_y r / b|^p) / 3)^(1/p) = 1
    scaled = np.abs(np.stack([d[0] / dims[0], d[1] / dims[1]]))
    r = 3.0 ** (1.0 / alpha) / np.maximum(
        (scaled[0] ** alpha + scaled[1] ** alpha) ** (1.0 / alpha), 1e-12)
    ax.plot(center[0] + r * d[0], center[1] + r * d[1], **kw)


def render_trajectory(spec: FigureSpec):
    trace = read_trace(spec.inputs["trace"])
    shapes = []
    if "summary" in spec.inputs:
        shapes = read_summary(spec.inputs["summary"]).get("obstacles", [])
    fig, ax = plt.subplots(figsize=tuple(spec.style.get("figsize", (6.5, 5))))
    if trace.t.size:
        ax.plot(trace.p_ref[:, 0], trace.p_ref[:, 1], "--", color="0.55",
                lw=1.0, label="reference")
        ax.plot(trace.position[:, 0], trace.position[:, 1], color="tab:green",
                lw=1.4, label="flown")
        n_obs = trace.obstacles.shape[1]
        for i in range(n_obs):
            center = trace.obstacles[-1, i]
            dims = shapes[i]["dims"] if i < len(shapes) else [0.5, 0.5, 0.5]
            alpha = shapes[i]["alpha0"] if i < len(shapes) else 2.0
            margin = shapes[i].get("margin", 0.0) if i < len(shapes) else 0.0
            d2 = [dims[0] + margin, dims[1] + margin]
            _norm_contour(ax, center, d2, alpha, color="tab:red", lw=1.0)
        ax.legend(loc="best")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title(spec.style.get("title", "flown trajectory"))
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(True, alpha=0.3)
    return _save(fig, spec)


def render_restart_cost(spec: FigureSpec):
    trace = read_trace(spec.inputs["trace"])
    fig, ax = plt.subplots(figsize=tuple(spec.style.get("figsize", (7, 4))))
    if trace.t.size:
        ax.plot(trace.t, trace.lf_cost, color="tab:green", lw=1.5,
                label="main second-horizon cost")
        mask = np.isfinite(trace.branch_cost_min)
        ax.plot(trace.t[mask], trace.branch_cost_min[mask], color="tab:orange",
                lw=1.0, label="best parallel branch")
        hits = np.nonzero(trace.restart)[0]
        if hits.size:
            ax.plot(trace.t[hits], trace.lf_cost[hits], "v",
                    color="tab:red", ms=7, label="reinitialization")
        ax.set_yscale("log")
        ax.legend(loc="best")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("planning-horizon cost")
    ax.set_title(spec.style.get("title", "parallel restart costs"))
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, spec)


def render_pareto(spec: FigureSpec):
    rows = read_table(spec.inputs["pareto"])
    for col in ("name", "cost_norm", "time_norm"):
        if col not in rows[0]:
            from .io import SchemaError
            raise SchemaError(f"{spec.inputs['pareto']}: missing column "
                              f"{col!r}")
    fig, ax = plt.subplots(figsize=tuple(spec.style.get("figsize", (6, 4.5))))
    groups = {}
    for row in rows:
        prefix = str(row["name"]).rsplit("-", 1)[0]
        groups.setdefault(prefix, []).append(row)
    markers = "osD^vP*X"
    for gi, (prefix, members) in enumerate(sorted(groups.items())):
        xs = [m["time_norm"] for m in members]
        ys = [m["cost_norm"] for m in members]
        ax.scatter(xs, ys, marker=markers[gi % len(markers)], s=45,
                   label=prefix)
    ax.axhline(1.0, color="0.7", lw=0.8)
    ax.axvline(1.0, color="0.7", lw=0.8)
    ax.set_xlabel("normalized computation time")
    ax.set_ylabel("normalized closed-loop cost")
    ax.set_title(spec.style.get("title", "cost/compute front"))
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best")
    return _save(fig, spec)


def render_constraint_panels(spec: FigureSpec):
    trace = read_trace(spec.inputs["trace"])
    style = spec.style
    fig, axes = plt.subplots(3, 1, sharex=True,
                             figsize=tuple(style.get("figsize", (7, 6))))
    if trace.t.size:
        axes[0].plot(trace.t, trace.velocity[:, 0], label="v_x")
        axes[0].plot(trace.t, trace.velocity[:, 1], label="v_y")
        axes[0].set_ylabel("velocity (m/s)")
        axes[0].legend(loc="best")
        w_max = float(style.get("omega_xy_max", 10.0))
        axes[1].plot(trace.t, trace.omega[:, 0], label="roll rate")
        axes[1].plot(trace.t, trace.omega[:, 1], label="pitch rate")
        axes[1].axhline(w_max, color="tab:red", lw=0.8)
        axes[1].axhline(-w_max, color="tab:red", lw=0.8)
        axes[1].set_ylabel("body rate (rad/s)")
        axes[1].legend(loc="best")
        f_max = float(style.get("f_th_max", 34.0))
        axes[2].plot(trace.t, trace.thrust_sum, color="tab:green",
                     label="collective thrust")
        axes[2].axhline(f_max, color="tab:red", lw=0.8)
        axes[2].axhline(float(style.get("f_th_min", 0.0)), color="tab:red",
                        lw=0.8)
        axes[2].set_ylabel("thrust (N)")
        axes[2].legend(loc="best")
    axes[2].set_xlabel("time (s)")
    for ax in axes:
        ax.grid(True, alpha=0.3)
    fig.suptitle(spec.style.get("title", "constraint evaluation"))
    return _save(fig, spec)


def render_step_response(spec: FigureSpec):
    rows = read_table(spec.inputs["step"])
    fig, ax = plt.subplots(figsize=tuple(spec.style.get("figsize", (6, 4))))
    variants = sorted({str(r["variant"]) for r in rows})
    for variant in variants:
        pts = sorted((r["hf_horizon_s"], r["rise_time_s"])
                     for r in rows if str(r["variant"]) == variant)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=variant)
    ax.set_xlabel("quadrotor-phase horizon (s)")
    ax.set_ylabel("rise time to 90% (s)")
    ax.set_title(spec.style.get("title", "step-response rise times"))
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", title="body-rate tier")
    return _save(fig, spec)


_RENDERERS = {
    "trajectory": render_trajectory,
    "restart_cost": render_restart_cost,
    "pareto": render_pareto,
    "constraint_panels": render_constraint_panels,
    "step_response": render_step_response,
}


def render(spec: FigureSpec) -> str:
    """Render one figure; returns the output path."""
    return _RENDERERS[spec.kind](spec)
