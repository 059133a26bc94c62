"""Command-line entry point: presets, closed-loop runs, sweeps, and the
constraint-variant step-response study.

Configs are YAML with a versioned schema; unknown keys are rejected with
their dotted path.  Shipped presets live next to the package and round-trip
through load/serialize/load unchanged.  Exit codes: 0 success, 1 config
error, 2 runtime failure.  The output root defaults to ./runs and can be
overridden by --out or the MFMPC_OUT environment variable.
"""

from __future__ import annotations

import argparse
import copy
import math
import os
import sys
from importlib import resources

import numpy as np
import yaml

from . import dynamics as dyn
from .controllers import (HierarchicalConfig, HierarchicalController,
                          ParallelConfig, StandardMpcController,
                          UnifiedController)
from .dynamics import QuadParams
from .environments import (ConstVelocityReference, EvalWeights, Scenario,
                           TrackReference, TrackSpec, place_along_track,
                           rise_time)
from .feasible_sets import SetParams
from .harness import (SweepEntry, normalize_rows, pareto_sweep,
                      run_closed_loop, write_sweep_csv)
from .obstacles import Obstacle, ObstacleMotion
from .ocp import HfWeights, LfWeights, PhaseConfig, SmoothingConfig
from .solver import SolverOptions

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def _floats(n=None):
    return ("floats", n)


# schema leaves: python type, ("floats", n), ("choice", options), or dict
SCHEMA = {
    "version": int,
    "seed": int,
    "output_dir": str,
    "controller": {
        "kind": ("choice", ("unique", "unified", "standard", "hierarchical")),
        "mode": ("choice", ("rti", "converged")),
    },
    "quad": {
        "mass": float,
        "inertia": _floats(3),
        "thrust_coefficient": float,
        "counter_torque": _floats(4),
        "rotor_positions": ("matrix", 4, 3),
        "f_th_min": float,
        "f_th_max": float,
        "omega_xy_max": float,
        "omega_z_max": float,
        "v_z_max": float,
        "v_xy_max": float,
        "residual": {"c_x": _floats(4), "c_y": _floats(4), "c_z": _floats(8)},
    },
    "sets": {
        "f_res_max": float,
        "a_z_lower": float,
        "alpha_x": float,
        "alpha_z": float,
    },
    "weights": {
        "hf_w": _floats(20),
        "hf_ref": ("nullable", _floats(20)),
        "lf_w": _floats(12),
        "q_terminal": _floats(3),
    },
    "phases": {
        "hf_nodes": int,
        "lf_nodes": int,
        "hf_dt": float,
        "lf_dt": float,
        "lf_spacing": float,
        "hf_spacing": float,
        "variant_f": ("choice", ("nonlinear", "polyhedral", "box", "none")),
        "variant_omega": ("choice", ("nonlinear", "polyhedral", "box", "none")),
        "include_omega_transition": bool,
        "enforce_velocity_set": bool,
        "hf_terminal": ("choice", ("hover", "none")),
        "smoothing": {"enabled": bool, "t_start": float,
                      "t_end": ("nullable", float)},
    },
    "parallel": {
        "branches": int,
        "reinit_period": int,
        "feasibility_tol": float,
        "restart_margin": float,
        "seed": int,
    },
    "hierarchical": {
        "replan_interval": int,
        "planner_lf_nodes": int,
        "planner_lf_dt": float,
        "planner_warmup_iters": int,
        "tracker_position_weight": _floats(3),
    },
    "solver": {
        "qp_tol": float,
        "qp_max_iter": int,
        "levenberg": float,
        "slack_l1": float,
        "slack_l2": float,
        "kkt_tol": float,
        "max_sqp_iter": int,
        "converged_tol": float,
        "converged_iters": int,
        "kkt_solver": ("choice", ("banded", "splu")),
    },
    "environment": {
        "kind": ("choice", ("const_velocity", "tracking", "step")),
        "v_set": float,
        "height": float,
        "track": {
            "shape": ("choice", ("sinusoidal", "figure_eight", "butterfly",
                                 "triangle", "rounded_rectangle")),
            "extents": _floats(2),
            "period": float,
            "z_amplitude": float,
            "z0": float,
        },
        "obstacles": ("obstacle_list",),
        "obstacle_layout": ("nullable", {
            "radii": _floats(None),
            "displacement": float,
            "seed": int,
            "alpha0": float,
            "min_start_distance": ("nullable", float),
        }),
        "obstacle_margin": float,
        "motion": {
            "kind": ("choice", ("static", "brownian")),
            "max_speed": float,
            "accel_scale": float,
            "bounds_lo": ("nullable", _floats(3)),
            "bounds_hi": ("nullable", _floats(3)),
        },
        "sim_dt": float,
        "sim_steps": int,
        "eval": ("eval",),   # "cost_weights" | "positions" | 20 floats
        "start": _floats(3),
    },
}

DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "output_dir": "runs",
    "controller": {"kind": "unique", "mode": "rti"},
    "quad": {
        "mass": 0.6,
        "inertia": [2.4e-3, 1.8e-3, 3.8e-3],
        "thrust_coefficient": 1.6e-6,
        "counter_torque": [0.011, -0.011, 0.011, -0.011],
        "rotor_positions": [[0.075, 0.10, 0.0], [0.075, -0.10, 0.0],
                            [-0.075, -0.10, 0.0], [-0.075, 0.10, 0.0]],
        "f_th_min": 0.0,
        "f_th_max": 34.0,
        "omega_xy_max": 10.0,
        "omega_z_max": 6.0,
        "v_z_max": 8.0,
        "v_xy_max": 25.0,
        "residual": {"c_x": [0.0] * 4, "c_y": [0.0] * 4, "c_z": [0.0] * 8},
    },
    "sets": {"f_res_max": 2.0, "a_z_lower": -5.0, "alpha_x": 0.5,
             "alpha_z": 0.5},
    "weights": {
        "hf_w": [0, 0.01, 1.0, 30, 30, 30, 10, 0, 0, 10, 10, 10,
                 3, 3, 3, 3, 3e-5, 3e-5, 3e-5, 3e-5],
        "hf_ref": None,
        "lf_w": [0.0, 0.01, 1, 10, 1e-4, 1e-4, 1.08, 1.08, 1.08,
                 0.1, 0.1, 0.1],
        "q_terminal": [0.0, 0.01, 1.0],
    },
    "phases": {
        "hf_nodes": 13, "lf_nodes": 22, "hf_dt": 0.04, "lf_dt": 0.8,
        "lf_spacing": 0.0, "hf_spacing": 0.0,
        "variant_f": "polyhedral", "variant_omega": "polyhedral",
        "include_omega_transition": False, "enforce_velocity_set": False,
        "hf_terminal": "hover",
        "smoothing": {"enabled": True, "t_start": 0.0, "t_end": None},
    },
    "parallel": {"branches": 1, "reinit_period": 7, "feasibility_tol": 1e-3,
                 "restart_margin": 1e-3, "seed": 0},
    "hierarchical": {"replan_interval": 10, "planner_lf_nodes": 40,
                     "planner_lf_dt": 0.2, "planner_warmup_iters": 20,
                     "tracker_position_weight": [10.0, 10.0, 10.0]},
    "solver": {"qp_tol": 1e-8, "qp_max_iter": 100, "levenberg": 1e-8,
               "slack_l1": 1e4, "slack_l2": 1e3, "kkt_tol": 1e-6,
               "max_sqp_iter": 200, "converged_tol": 1e-4,
               "converged_iters": 50, "kkt_solver": "banded"},
    "environment": {
        "kind": "const_velocity",
        "v_set": 15.0,
        "height": 0.0,
        "track": {"shape": "figure_eight", "extents": [15.0, 8.0],
                  "period": 20.0, "z_amplitude": 0.0, "z0": 0.0},
        "obstacles": [],
        "obstacle_layout": None,
        "obstacle_margin": 0.191,
        "motion": {"kind": "static", "max_speed": 2.0, "accel_scale": 4.0,
                   "bounds_lo": None, "bounds_hi": None},
        "sim_dt": 0.04,
        "sim_steps": 600,
        "eval": "cost_weights",
        "start": [0.0, 0.0, 0.0],
    },
}


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _check_leaf(schema, value, path):
    if isinstance(schema, tuple) and schema[0] == "nullable":
        if value is None:
            return None
        return _check_leaf(schema[1], value, path)
    if isinstance(schema, dict):
        return _validate(schema, value, path)
    if isinstance(schema, tuple) and schema[0] == "floats":
        n = schema[1]
        if not isinstance(value, (list, tuple)) or \
                not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                        for v in value):
            raise ConfigError(f"{path}: expected a list of numbers")
        if n is not None and len(value) != n:
            raise ConfigError(f"{path}: expected {n} numbers, got {len(value)}")
        return [float(v) for v in value]
    if isinstance(schema, tuple) and schema[0] == "matrix":
        _, nr, nc = schema
        if not isinstance(value, list) or len(value) != nr:
            raise ConfigError(f"{path}: expected {nr} rows")
        return [_check_leaf(("floats", nc), row, f"{path}[{i}]")
                for i, row in enumerate(value)]
    if isinstance(schema, tuple) and schema[0] == "choice":
        if value not in schema[1]:
            raise ConfigError(f"{path}: {value!r} not one of {schema[1]}")
        return value
    if isinstance(schema, tuple) and schema[0] == "obstacle_list":
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        out = []
        for i, item in enumerate(value):
            allowed = {"center", "dims", "alpha0", "rotation_rpy"}
            if not isinstance(item, dict):
                raise ConfigError(f"{path}[{i}]: expected a mapping")
            unknown = set(item) - allowed
            if unknown:
                raise ConfigError(f"{path}[{i}]: unknown keys {sorted(unknown)}")
            if "center" not in item or "dims" not in item:
                raise ConfigError(f"{path}[{i}]: needs 'center' and 'dims'")
            out.append({
                "center": _check_leaf(("floats", 3), item["center"],
                                      f"{path}[{i}].center"),
                "dims": _check_leaf(("floats", 3), item["dims"],
                                    f"{path}[{i}].dims"),
                "alpha0": float(item.get("alpha0", 2.0)),
                "rotation_rpy": _check_leaf(
                    ("floats", 3), item.get("rotation_rpy", [0.0, 0.0, 0.0]),
                    f"{path}[{i}].rotation_rpy"),
            })
        return out
    if isinstance(schema, tuple) and schema[0] == "eval":
        if value in ("cost_weights", "positions"):
            return value
        return _check_leaf(("floats", 20), value, path)
    if schema is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if schema is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if schema is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if schema is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise AssertionError(f"bad schema node at {path}")


def _validate(schema: dict, cfg, path="") -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    unknown = set(cfg) - set(schema)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    out = {}
    for key, sub in schema.items():
        p = f"{path}.{key}" if path else key
        if key not in cfg:
            if isinstance(sub, tuple) and sub and sub[0] == "nullable":
                out[key] = None
                continue
            raise ConfigError(f"{p}: missing (defaults should cover this)")
        out[key] = _check_leaf(sub, cfg[key], p)
    return out


def _deep_merge(default, user):
    if not isinstance(default, dict) or not isinstance(user, dict):
        return copy.deepcopy(user)
    out = copy.deepcopy(default)
    for k, v in user.items():
        if k in out and isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(cfg: dict) -> dict:
    """Deep-merge onto the defaults and validate strictly against the
    schema; unknown keys are rejected with their dotted path."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    merged = _deep_merge(DEFAULTS, cfg)
    if merged.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {merged.get('version')}")
    return _validate(SCHEMA, merged)


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}")
    return validate_config(raw)


def preset_dir():
    return resources.files("mfmpc") / "presets"


def list_presets() -> list[str]:
    return sorted(p.name[:-5] for p in preset_dir().iterdir()
                  if p.name.endswith(".yaml"))


def load_preset(name: str) -> dict:
    path = preset_dir() / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: "
                          + ", ".join(list_presets()))
    with path.open() as fh:
        return validate_config(yaml.safe_load(fh) or {})


def _coerce_numbers(value):
    """YAML 1.1 reads dot-less scientific notation like 1e-4 as a string;
    overrides mean numbers whenever they look like numbers."""
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(value, list):
        return [_coerce_numbers(v) for v in value]
    return value


def apply_overrides(cfg: dict, pairs: list[str]) -> dict:
    out = copy.deepcopy(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like key.path=value")
        key, raw = pair.split("=", 1)
        value = _coerce_numbers(yaml.safe_load(raw))
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"override {key!r}: unknown section {p!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = value
    return validate_config(out)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _rotation_from_rpy(rpy):
    r, p, y = rpy
    cr, sr = math.cos(r), math.sin(r)
    cp, sp_ = math.cos(p), math.sin(p)
    cy, sy = math.cos(y), math.sin(y)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    Ry = np.array([[cp, 0, sp_], [0, 1, 0], [-sp_, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


def build_quad(cfg: dict) -> QuadParams:
    q = cfg["quad"]
    return QuadParams(
        m=q["mass"], J=np.array(q["inertia"]),
        c_l=q["thrust_coefficient"], kappa=np.array(q["counter_torque"]),
        r_p=np.array(q["rotor_positions"]),
        f_th_min=q["f_th_min"], f_th_max=q["f_th_max"],
        omega_xy_max=q["omega_xy_max"], omega_z_max=q["omega_z_max"],
        v_z_max=q["v_z_max"], v_xy_max=q["v_xy_max"],
        c_x=np.array(q["residual"]["c_x"]),
        c_y=np.array(q["residual"]["c_y"]),
        c_z=np.array(q["residual"]["c_z"]))


def build_sets(cfg: dict, quad: QuadParams) -> SetParams:
    s = cfg["sets"]
    return SetParams(m=quad.m, f_th_max=quad.f_th_max, f_th_min=quad.f_th_min,
                     f_res_max=s["f_res_max"], a_z_lower=s["a_z_lower"],
                     alpha_x=s["alpha_x"], alpha_z=s["alpha_z"],
                     omega_xy_max=quad.omega_xy_max)


def build_weights(cfg: dict, quad: QuadParams) -> tuple[HfWeights, LfWeights]:
    w = cfg["weights"]
    y_ref = w["hf_ref"]
    if y_ref is None:
        y_ref = np.zeros(20)
        y_ref[12:16] = quad.hover_thrust
    hf = HfWeights(w=np.array(w["hf_w"]), y_ref=np.array(y_ref))
    lf = LfWeights(w=np.array(w["lf_w"]), q_T=np.array(w["q_terminal"]))
    return hf, lf


def build_phases(cfg: dict) -> PhaseConfig:
    p = cfg["phases"]
    sm = p["smoothing"]
    return PhaseConfig(
        M=p["hf_nodes"], N=p["lf_nodes"], t_hf=p["hf_dt"], t_lf=p["lf_dt"],
        spacing=p["lf_spacing"], spacing_hf=p["hf_spacing"],
        variant_f=p["variant_f"], variant_omega=p["variant_omega"],
        include_omega=p["include_omega_transition"],
        enforce_velocity_set=p["enforce_velocity_set"],
        hf_terminal=p["hf_terminal"],
        smoothing=SmoothingConfig(enabled=sm["enabled"],
                                  t_start=sm["t_start"], t_end=sm["t_end"]))


def build_solver_options(cfg: dict) -> SolverOptions:
    s = cfg["solver"]
    return SolverOptions(qp_tol=s["qp_tol"], qp_max_iter=s["qp_max_iter"],
                         levenberg=s["levenberg"], slack_l1=s["slack_l1"],
                         slack_l2=s["slack_l2"], kkt_tol=s["kkt_tol"],
                         max_sqp_iter=s["max_sqp_iter"],
                         kkt_solver=s["kkt_solver"])


def build_scenario(cfg: dict, name: str = "") -> Scenario:
    env = cfg["environment"]
    quad = build_quad(cfg)
    sets = build_sets(cfg, quad)
    hf_w, lf_w = build_weights(cfg, quad)
    margin = env["obstacle_margin"]

    if env["kind"] in ("const_velocity", "step"):
        provider = ConstVelocityReference([env["v_set"], 0.0, 0.0],
                                          p0=[0.0, 0.0, env["height"]])
        track = None
    else:
        track = TrackReference(TrackSpec(shape=env["track"]["shape"],
                                         extents=tuple(env["track"]["extents"]),
                                         period=env["track"]["period"],
                                         z_amplitude=env["track"]["z_amplitude"],
                                         z0=env["track"]["z0"]))
        provider = track

    obstacles = []
    for o in env["obstacles"]:
        obstacles.append(Obstacle(np.array(o["center"]),
                                  _rotation_from_rpy(o["rotation_rpy"]),
                                  np.array(o["dims"]), o["alpha0"],
                                  margin=margin))
    layout = env["obstacle_layout"]
    if layout is not None:
        if track is None:
            raise ConfigError("environment.obstacle_layout needs a track")
        obstacles += place_along_track(
            track, layout["radii"], layout["seed"],
            displacement=layout["displacement"], alpha0=layout["alpha0"],
            margin=margin,
            min_start_distance=layout.get("min_start_distance", 0.0))

    motion = None
    if env["motion"]["kind"] == "brownian":
        m = env["motion"]
        motion = ObstacleMotion(kind="brownian", max_speed=m["max_speed"],
                                accel_scale=m["accel_scale"],
                                bounds_lo=None if m["bounds_lo"] is None
                                else np.array(m["bounds_lo"]),
                                bounds_hi=None if m["bounds_hi"] is None
                                else np.array(m["bounds_hi"]))

    ev = env["eval"]
    if ev == "cost_weights":
        ew = EvalWeights(w=hf_w.w.copy(), t_sim=env["sim_dt"])
    elif ev == "positions":
        ew = EvalWeights.positions_only(env["sim_dt"])
    else:
        ew = EvalWeights(w=np.array(ev), t_sim=env["sim_dt"])

    x0 = dyn.hover_state(quad, p=np.array(env["start"]))
    if env["kind"] == "tracking":
        # start on the track at reference speed; a standing start against
        # the high tracking weights is a violent transient that swamps the
        # accumulated cost
        p_start, v_start, _ = provider.reference_at(0.0)
        x0[0:3] = p_start
        x0[7:10] = v_start

    return Scenario(name=name or env["kind"], provider=provider, quad=quad,
                    sets=sets, hf_weights=hf_w, lf_weights=lf_w,
                    eval_weights=ew, sim_dt=env["sim_dt"],
                    sim_steps=env["sim_steps"], obstacles=obstacles,
                    motion=motion, x0=x0)


def build_controller(cfg: dict, scenario: Scenario):
    kind = cfg["controller"]["kind"]
    mode = cfg["controller"]["mode"]
    quad, sets = scenario.quad, scenario.sets
    hf_w, lf_w = scenario.hf_weights, scenario.lf_weights
    opts = build_solver_options(cfg)
    s = cfg["solver"]
    phases = build_phases(cfg)
    common = dict(opts=opts, mode=mode, converged_tol=s["converged_tol"],
                  converged_iters=s["converged_iters"])

    if kind in ("unique", "unified"):
        par = cfg["parallel"]
        return UnifiedController(
            phases, quad, sets, hf_w, lf_w, scenario.fresh_obstacles(),
            scenario.provider,
            parallel=ParallelConfig(branches=par["branches"],
                                    reinit_period=par["reinit_period"],
                                    feasibility_tol=par["feasibility_tol"],
                                    restart_margin=par["restart_margin"],
                                    seed=par["seed"]),
            **common)
    if kind == "standard":
        std = PhaseConfig(M=phases.M, N=0, t_hf=phases.t_hf, t_lf=phases.t_lf,
                          spacing_hf=phases.spacing_hf,
                          hf_terminal=phases.hf_terminal,
                          smoothing=phases.smoothing)
        return StandardMpcController(std, quad, sets, hf_w, lf_w,
                                     scenario.fresh_obstacles(),
                                     scenario.provider, **common)
    if kind == "hierarchical":
        h = cfg["hierarchical"]
        planner = PhaseConfig(M=1, N=h["planner_lf_nodes"], t_hf=phases.t_hf,
                              t_lf=h["planner_lf_dt"],
                              variant_f=phases.variant_f,
                              variant_omega=phases.variant_omega,
                              smoothing=phases.smoothing)
        tracker = PhaseConfig(M=phases.M, N=0, t_hf=phases.t_hf,
                              t_lf=phases.t_lf, hf_terminal="none",
                              smoothing=phases.smoothing)
        return HierarchicalController(
            planner, tracker, quad, sets, hf_w, lf_w,
            scenario.fresh_obstacles(), scenario.provider,
            hier=HierarchicalConfig(
                replan_interval=h["replan_interval"],
                planner_warmup_iters=h["planner_warmup_iters"],
                tracker_position_weight=tuple(h["tracker_position_weight"])),
            **common)
    raise ConfigError(f"unknown controller kind {kind!r}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _resolve_config(args) -> dict:
    if args.preset:
        cfg = load_preset(args.preset)
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise ConfigError("provide --preset or --config")
    pairs = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        pairs.append(f"seed={args.seed}")
    if getattr(args, "steps", None) is not None:
        pairs.append(f"environment.sim_steps={args.steps}")
    return apply_overrides(cfg, pairs) if pairs else cfg


def _out_dir(args, cfg) -> str:
    root = args.out or os.environ.get("MFMPC_OUT") or cfg["output_dir"]
    os.makedirs(root, exist_ok=True)
    return root


def _print_summary(trace):
    c = trace.compute_stats_ms()
    e = trace.error_stats()
    print(f"{'Method':<16}{'c.time (ms)':<24}{'tracking error (m)':<24}")
    print(f"{'':<16}{'mean/med/max':<24}{'mean/med/max':<24}")
    print(f"{trace.controller:<16}"
          f"{c['mean']:.2f} / {c['median']:.2f} / {c['max']:.2f}      "
          f"{e['mean']:.2f} / {e['median']:.2f} / {e['max']:.2f}")
    print(f"eval cost: {trace.eval_cost:.4f}   restarts: "
          f"{int(np.sum(trace.restart))}   truncated: {trace.truncated}")


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    name = args.preset or os.path.splitext(os.path.basename(args.config))[0]
    scenario = build_scenario(cfg, name=name)
    controller = build_controller(cfg, scenario)
    trace = run_closed_loop(controller, scenario, seed=cfg["seed"],
                            controller_name=cfg["controller"]["kind"])
    out = _out_dir(args, cfg)
    base = os.path.join(out, name.replace("/", "_"))
    trace.write_trace_csv(base + "_trace.csv")
    trace.write_timing_csv(base + "_timing.csv")
    trace.write_summary_json(base + "_summary.json")
    _print_summary(trace)
    print(f"artifacts: {base}_trace.csv {base}_timing.csv {base}_summary.json")
    if trace.truncated:
        print(f"run truncated: {trace.failure}", file=sys.stderr)
        return 2
    return 0


def cmd_sweep(args) -> int:
    with open(args.spec) as fh:
        spec = yaml.safe_load(fh)
    if not isinstance(spec, dict) or "entries" not in spec \
            or not spec["entries"]:
        raise ConfigError("sweep spec needs a non-empty 'entries' list")
    entries = []
    for i, e in enumerate(spec["entries"]):
        if "preset" not in e and "config" not in e:
            raise ConfigError(f"entries[{i}]: needs 'preset' or 'config'")
        cfg = load_preset(e["preset"]) if "preset" in e \
            else load_config(e["config"])
        overrides = [f"{k}={yaml.safe_dump(v).strip()}"
                     for k, v in (e.get("overrides") or {}).items()]
        if overrides:
            cfg = apply_overrides(cfg, overrides)
        name = e.get("name", e.get("preset", f"entry{i}"))
        entries.append(SweepEntry(name=name, build=_EntryBuilder(cfg, name),
                                  steps=e.get("steps"), seed=cfg["seed"]))
    rows = pareto_sweep(entries, workers=int(spec.get("workers", 1)))
    base_name = spec.get("normalize_to", entries[0].name)
    dicts = normalize_rows(rows, base_name)
    out = args.out or os.environ.get("MFMPC_OUT") or "runs"
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "pareto.csv")
    write_sweep_csv(dicts, path)
    for d in dicts:
        print(f"{d['name']:<18} cost={d['eval_cost']:.2f} "
              f"(norm {d['cost_norm']:.3f})  mean={d['time_mean_ms']:.2f} ms "
              f"(norm {d['time_norm']:.3f})")
    print(f"artifacts: {path}")
    return 0


class _EntryBuilder:
    """Picklable (controller, scenario) factory for the sweep worker pool."""

    def __init__(self, cfg: dict, name: str):
        self.cfg = cfg
        self.name = name

    def __call__(self):
        scenario = build_scenario(self.cfg, name=self.name)
        return build_controller(self.cfg, scenario), scenario


def cmd_step(args) -> int:
    cfg = _resolve_config(args)
    variants = (args.variants or "box,polyhedral,nonlinear").split(",")
    horizons = [float(h) for h in
                (args.horizons or "0.12,0.2,0.8").split(",")]
    v_target = args.v_target
    cfg = apply_overrides(cfg, [f"environment.v_set={v_target}",
                                "environment.kind=step"])
    out = args.out or os.environ.get("MFMPC_OUT") or "runs"
    os.makedirs(out, exist_ok=True)
    rows = []
    for horizon in horizons:
        for variant in variants:
            M = max(2, round(horizon / cfg["phases"]["hf_dt"]))
            c = apply_overrides(cfg, [
                f"phases.hf_nodes={M}",
                f"phases.variant_omega={variant}",
            ])
            scenario = build_scenario(c, name=f"step-{variant}-{horizon}")
            controller = build_controller(c, scenario)
            trace = run_closed_loop(controller, scenario, seed=c["seed"],
                                    controller_name=f"{variant}@{horizon}")
            rt = rise_time(trace.t, trace.states[:, 7], v_target)
            comp = trace.compute_stats_ms()
            rows.append({"variant": variant, "hf_horizon_s": horizon,
                         "rise_time_s": rt, "time_mean_ms": comp["mean"],
                         "time_max_ms": comp["max"],
                         "truncated": trace.truncated})
            print(f"variant={variant:<11} horizon={horizon:<5} "
                  f"rise={rt:.3f} s  compute={comp['mean']:.2f} ms")
    path = os.path.join(out, "step_response.csv")
    write_sweep_csv(rows, path)
    print(f"artifacts: {path}")
    return 0


def cmd_presets(_args) -> int:
    for name in list_presets():
        print(name)
    return 0


def cmd_schema(_args) -> int:
    print(yaml.safe_dump(DEFAULTS, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mfmpc",
        description="Multi-fidelity quadrotor MPC benchmark harness")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--preset", help="named preset configuration "
                                        "(see `mfmpc presets`)")
        p.add_argument("--config", help="path to a YAML config file")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory (or $MFMPC_OUT)")

    p_run = sub.add_parser("run", help="one closed-loop run; writes trace, "
                                       "timing, and summary artifacts")
    common(p_run)
    p_run.add_argument("--steps", type=int, help="override simulation steps")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a Pareto sweep spec and "
                                           "write pareto.csv")
    p_sweep.add_argument("--spec", required=True, help="YAML sweep spec with "
                                                       "an 'entries' list")
    p_sweep.add_argument("--out", help="output directory (or $MFMPC_OUT)")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_step = sub.add_parser("step", help="hover-to-speed step response over "
                                         "constraint variants and horizons")
    common(p_step)
    p_step.add_argument("--v-target", type=float, default=14.0,
                        help="horizontal speed setpoint (m/s)")
    p_step.add_argument("--variants", help="comma list of body-rate tiers: "
                                           "box,polyhedral,nonlinear")
    p_step.add_argument("--horizons", help="comma list of quadrotor-phase "
                                           "horizons in seconds")
    p_step.set_defaults(fn=cmd_step)

    p_presets = sub.add_parser("presets", help="list shipped presets")
    p_presets.set_defaults(fn=cmd_presets)

    p_schema = sub.add_parser("schema", help="print the full default config")
    p_schema.set_defaults(fn=cmd_schema)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
