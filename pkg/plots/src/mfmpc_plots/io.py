"""Readers for the versioned run artifacts (schema v1).

This package touches nothing but the exported files: trace.csv (per-step
states/references/diagnostics/obstacle centers), summary.json (metrics and
obstacle shapes), pareto.csv, and step_response.csv.  A schema violation is
reported with the offending path and column.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

SUPPORTED_SCHEMA = 1

TRACE_REQUIRED = ["step", "t", "x0", "x1", "x2", "u0", "pref_x", "pref_y",
                  "pref_z", "err_pos", "lf_cost", "branch_cost_min",
                  "restart", "qp_status", "kkt", "max_slack"]


class SchemaError(ValueError):
    pass


@dataclass
class Trace:
    t: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    p_ref: np.ndarray
    err_pos: np.ndarray
    lf_cost: np.ndarray
    branch_cost_min: np.ndarray
    restart: np.ndarray
    omega: np.ndarray
    thrust_sum: np.ndarray
    obstacles: np.ndarray           # (steps, n_obs, 3)
    shapes: list = field(default_factory=list)


def _column(rows, header, name, path):
    try:
        idx = header.index(name)
    except ValueError:
        raise SchemaError(f"{path}: missing column {name!r}")
    return [r[idx] for r in rows]


def read_trace(path) -> Trace:
    with open(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file")
        rows = [r for r in reader if r]
    for name in TRACE_REQUIRED:
        if name not in header:
            raise SchemaError(f"{path}: missing column {name!r}")

    def col(name, dtype=float):
        return np.array(_column(rows, header, name, path), dtype=dtype)

    n_obs = sum(1 for h in header if h.startswith("obs") and h.endswith("_x"))
    centers = np.zeros((len(rows), n_obs, 3))
    for i in range(n_obs):
        for j, ax in enumerate("xyz"):
            centers[:, i, j] = col(f"obs{i}_{ax}")

    return Trace(
        t=col("t"),
        position=np.stack([col("x0"), col("x1"), col("x2")], axis=1),
        velocity=np.stack([col("x7"), col("x8"), col("x9")], axis=1),
        p_ref=np.stack([col("pref_x"), col("pref_y"), col("pref_z")], axis=1),
        err_pos=col("err_pos"),
        lf_cost=col("lf_cost"),
        branch_cost_min=col("branch_cost_min"),
        restart=col("restart", dtype=int).astype(bool),
        omega=np.stack([col("x10"), col("x11"), col("x12")], axis=1),
        thrust_sum=col("x13") + col("x14") + col("x15") + col("x16"),
        obstacles=centers,
    )


def read_summary(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    version = data.get("schema_version")
    if version != SUPPORTED_SCHEMA:
        raise SchemaError(f"{path}: unsupported schema_version {version!r}")
    return data


def read_table(path) -> list[dict]:
    """Generic CSV table (pareto.csv, step_response.csv)."""
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SchemaError(f"{path}: no rows")
    out = []
    for row in rows:
        parsed = {}
        for k, v in row.items():
            try:
                parsed[k] = float(v)
            except (TypeError, ValueError):
                parsed[k] = v
        out.append(parsed)
    return out
