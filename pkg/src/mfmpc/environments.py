"""Benchmark environments: periodic tracks, constant-velocity flight, and
the hover-to-speed step scenario, plus the closed-loop evaluation cost.

Track shapes are defined once symbolically; velocity and acceleration
references come from exact symbolic differentiation, so the references are
C-infinity and periodic by construction.  Shape-specific scale factors are
resolved numerically against the requested extents and folded into the
expressions as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import sympy as sym

from .dynamics import GRAVITY, QuadParams
from .feasible_sets import SetParams
from .obstacles import Obstacle, ObstacleMotion, sphere
from .ocp import HfWeights, LfWeights

TRACK_SHAPES = ("sinusoidal", "figure_eight", "butterfly", "triangle",
                "rounded_rectangle")

# vehicle bounding radius used to inflate obstacle shapes (half diagonal)
DEFAULT_OBSTACLE_MARGIN = 0.191


@dataclass
class TrackSpec:
    shape: str
    extents: tuple[float, float] = (15.0, 8.0)
    period: float = 20.0
    z_amplitude: float = 0.0
    z0: float = 0.0

    def __post_init__(self):
        if self.shape not in TRACK_SHAPES:
            raise ValueError(f"unknown track shape {self.shape!r}")
        if self.period <= 0:
            raise ValueError("period must be positive")


def _shape_xy(shape: str, th):
    if shape == "sinusoidal":
        return sym.sin(th), sym.sin(3 * th)
    if shape == "figure_eight":
        return sym.sin(th), sym.sin(2 * th)
    if shape == "butterfly":
        r = sym.exp(sym.sin(th)) - 2 * sym.cos(4 * th)
        return r * sym.cos(th), r * sym.sin(th)
    if shape == "triangle":
        r = 1 / (1 + sym.Rational(2, 5) * sym.cos(3 * th))
        return r * sym.cos(th), r * sym.sin(th)
    if shape == "rounded_rectangle":
        w = (sym.cos(th) ** 6 + sym.sin(th) ** 6) ** sym.Rational(-1, 6)
        return w * sym.cos(th), w * sym.sin(th)
    raise ValueError(shape)


class TrackReference:
    """Closed periodic reference with exact analytic derivatives."""

    def __init__(self, spec: TrackSpec):
        self.spec = spec
        t = sym.symbols("t", real=True)
        th = 2 * sym.pi * t / spec.period
        x_raw, y_raw = _shape_xy(spec.shape, th)

        # resolve extents numerically and fold the scale in as constants
        probe = sym.lambdify(t, [x_raw, y_raw], "numpy")
        ts = np.linspace(0.0, spec.period, 2048, endpoint=False)
        px, py = probe(ts)
        sx = 0.5 * spec.extents[0] / np.max(np.abs(px))
        sy = 0.5 * spec.extents[1] / np.max(np.abs(py))
        x = sx * x_raw
        y = sy * y_raw
        z = spec.z0 + spec.z_amplitude * sym.sin(2 * th)

        self._fns = []
        for expr in (x, y, z):
            d1 = sym.diff(expr, t)
            d2 = sym.diff(d1, t)
            self._fns.append(tuple(sym.lambdify(t, e, "numpy")
                                   for e in (expr, d1, d2)))

    def reference_at(self, t):
        t = np.asarray(t, dtype=float)
        out = []
        for order in range(3):
            comp = [np.broadcast_to(np.asarray(f[order](t), dtype=float),
                                    t.shape) for f in self._fns]
            out.append(np.stack(comp, axis=-1))
        return out[0], out[1], out[2]


class ConstVelocityReference:
    """Straight-line sweep at a set velocity (also used for speed steps)."""

    def __init__(self, v_set, p0=(0.0, 0.0, 0.0)):
        self.v = np.asarray(v_set, dtype=float)
        self.p0 = np.asarray(p0, dtype=float)

    def reference_at(self, t):
        t = np.asarray(t, dtype=float)
        p = self.p0 + np.multiply.outer(t, self.v)
        v = np.broadcast_to(self.v, p.shape)
        return p, v, np.zeros_like(p)


@dataclass
class EvalWeights:
    """Closed-loop evaluation weights over the 20-entry tracking vector."""

    w: np.ndarray
    t_sim: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.shape != (20,):
            raise ValueError("evaluation weights must have 20 entries")
        if np.any(self.w < 0) or self.t_sim <= 0:
            raise ValueError("weights nonnegative, step positive")

    @classmethod
    def positions_only(cls, t_sim: float) -> "EvalWeights":
        w = np.zeros(20)
        w[0:3] = 1.0
        return cls(w=w, t_sim=t_sim)


def eval_cost(Y: np.ndarray, Y_ref: np.ndarray, ew: EvalWeights) -> float:
    """Accumulated quadratic closed-loop cost over a trace of tracking
    vectors; rows pair simulated and reference values."""
    Y = np.asarray(Y, dtype=float)
    Y_ref = np.asarray(Y_ref, dtype=float)
    if Y.shape != Y_ref.shape:
        raise ValueError("trace and reference lengths differ")
    e = Y - Y_ref
    return float(ew.t_sim * np.sum((e * e) @ ew.w))


@dataclass
class Scenario:
    """One closed-loop experiment: plant, references, obstacles, weights."""

    name: str
    provider: object
    quad: QuadParams
    sets: SetParams
    hf_weights: HfWeights
    lf_weights: LfWeights
    eval_weights: EvalWeights
    sim_dt: float
    sim_steps: int
    obstacles: list[Obstacle] = field(default_factory=list)
    motion: ObstacleMotion | None = None
    x0: np.ndarray | None = None

    def fresh_obstacles(self) -> list[Obstacle]:
        return [Obstacle(o.center.copy(), o.rotation, o.dims, o.alpha0,
                         o.margin) for o in self.obstacles]

    def fresh_motions(self, seed: int) -> list[ObstacleMotion] | None:
        if self.motion is None or self.motion.kind == "static":
            return None
        return [ObstacleMotion(kind=self.motion.kind,
                               max_speed=self.motion.max_speed,
                               seed=seed + 1000 * i,
                               accel_scale=self.motion.accel_scale,
                               bounds_lo=self.motion.bounds_lo,
                               bounds_hi=self.motion.bounds_hi)
                for i in range(len(self.obstacles))]


def place_along_track(track: TrackReference, radii, seed: int,
                      displacement: float = 1.0, alpha0: float = 2.0,
                      margin: float = DEFAULT_OBSTACLE_MARGIN,
                      min_start_distance: float = 0.0) -> list[Obstacle]:
    """Equally spaced obstacles along the track, jittered per axis.

    Placements whose surface would reach within `min_start_distance` of the
    track's start point are pushed radially outward, so runs never begin
    inside an obstacle.
    """
    rng = np.random.default_rng(seed)
    start, _, _ = track.reference_at(0.0)
    n = len(radii)
    out = []
    for i, r in enumerate(radii):
        t_i = track.spec.period * (i + 0.5) / n
        p, _, _ = track.reference_at(t_i)
        center = p + rng.uniform(-displacement, displacement, size=3)
        clearance = min_start_distance + r + margin
        d = np.linalg.norm(center - start)
        if min_start_distance > 0.0 and d < clearance:
            direction = (center - start) / d if d > 1e-9 \
                else np.array([0.0, 0.0, 1.0])
            center = start + direction * clearance
        out.append(sphere(center, float(r), alpha0=alpha0, margin=margin))
    return out


def rise_time(ts: np.ndarray, v: np.ndarray, v_target: float) -> float:
    """First time the velocity trace reaches 90% of the set value."""
    if v_target == 0:
        return 0.0
    hit = np.nonzero(v >= 0.9 * v_target)[0]
    return float(ts[hit[0]]) if hit.size else float("inf")
