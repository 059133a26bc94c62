"""Scaled p-norm obstacle shapes with progressive smoothing.

An obstacle occupies the sublevel set { p : value(p) <= 1 } of

    value(p) = ( (1/3) * sum_i |eta_i(p)|^alpha )^(1/alpha),
    eta(p)   = diag(d)^-1 R^T (p - center),

where alpha = 2 gives an ellipsoid and alpha -> inf a cuboid.  Because the
scaled power mean is non-decreasing in alpha, smaller exponents always
over-approximate larger ones: the controller exploits this by scheduling
alpha from its sharp value down to 2 along the prediction horizon, keeping
shifted solutions feasible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# |eta|^alpha overflows naive powers for sharp shapes; switch to log-space
LOG_POW_ALPHA = 64.0
_TINY = 1e-300


@dataclass(frozen=True)
class Obstacle:
    """Convex p-norm shape: center, orientation, semi-dimensions, exponent."""

    center: np.ndarray
    rotation: np.ndarray
    dims: np.ndarray
    alpha0: float
    margin: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "dims", np.asarray(self.dims, dtype=float))
        if self.alpha0 < 2.0:
            raise ValueError("shape exponent must be >= 2")
        if np.any(self.dims <= 0):
            raise ValueError("semi-dimensions must be positive")
        err = self.rotation.T @ self.rotation - np.eye(3)
        if np.max(np.abs(err)) > 1e-9:
            raise ValueError("rotation must be orthonormal")

    @property
    def inflated_dims(self) -> np.ndarray:
        return self.dims + self.margin

    def moved_to(self, center) -> "Obstacle":
        return replace(self, center=np.asarray(center, dtype=float))


def sphere(center, radius: float, alpha0: float = 2.0, margin: float = 0.0) -> Obstacle:
    return Obstacle(center, np.eye(3), np.full(3, float(radius)), alpha0, margin)


def box_obstacle(center, half_sides, alpha0: float = 100.0,
                 margin: float = 0.0) -> Obstacle:
    return Obstacle(center, np.eye(3), half_sides, alpha0, margin)


def _eta(p: np.ndarray, o: Obstacle) -> np.ndarray:
    rel = np.asarray(p, dtype=float) - o.center
    return (rel @ o.rotation) / o.inflated_dims


def obstacle_value(p: np.ndarray, o: Obstacle, alpha: float) -> np.ndarray:
    """Scaled p-norm level value; <= 1 means occupied, >= 1 is free space."""
    if alpha < 2.0:
        raise ValueError("shape exponent must be >= 2")
    eta = np.abs(_eta(p, o))
    if alpha <= LOG_POW_ALPHA:
        return (np.sum(eta ** alpha, axis=-1) / 3.0) ** (1.0 / alpha)
    # value = max_eta * ((1/3) sum (eta_i/max)^alpha)^(1/alpha) avoids overflow
    m = np.max(eta, axis=-1, keepdims=True)
    m = np.maximum(m, _TINY)
    inner = np.sum((eta / m) ** alpha, axis=-1) / 3.0
    return m[..., 0] * inner ** (1.0 / alpha)


def obstacle_gradient(p: np.ndarray, o: Obstacle, alpha: float) -> np.ndarray:
    """Analytic gradient of `obstacle_value` w.r.t. the query position.

    Zero at the obstacle center, where the value is not differentiable.
    """
    eta = _eta(p, o)
    abs_eta = np.abs(eta)
    m = np.maximum(np.max(abs_eta, axis=-1, keepdims=True), _TINY)
    scaled = abs_eta / m
    inner = np.maximum(np.sum(scaled ** alpha, axis=-1, keepdims=True) / 3.0, _TINY)
    value = m * inner ** (1.0 / alpha)
    # d value / d eta_i = (value / (3 * inner * m^alpha)) * |eta_i|^(alpha-1) * sgn
    with np.errstate(invalid="ignore", divide="ignore"):
        coeff = np.nan_to_num(value / (3.0 * inner * m), nan=0.0, posinf=0.0)
    d_eta = coeff * scaled ** (alpha - 1.0) * np.sign(eta)
    grad = (d_eta / o.inflated_dims) @ o.rotation.T
    degenerate = np.linalg.norm(np.asarray(p, float) - o.center, axis=-1) < 1e-12
    if np.any(degenerate):
        grad = np.where(np.expand_dims(degenerate, -1), 0.0, grad)
    return grad


@dataclass(frozen=True)
class SmoothingSchedule:
    """Piecewise-linear non-increasing exponent schedule over the horizon.

    alpha(t) starts at alpha0, stays there until t_start, decreases linearly
    to 2 at t_end, and is clamped to [2, alpha0] outside [0, t_f].
    """

    alpha0: float
    t_f: float
    t_start: float = 0.0
    t_end: float | None = None

    def __post_init__(self):
        if self.alpha0 < 2.0:
            raise ValueError("alpha0 must be >= 2")
        if self.t_f <= 0:
            raise ValueError("horizon must be positive")
        end = self.t_f if self.t_end is None else self.t_end
        object.__setattr__(self, "t_end", float(end))
        if not (0.0 <= self.t_start < self.t_end <= self.t_f + 1e-12):
            raise ValueError("smoothing window must satisfy 0 <= start < end <= t_f")


def schedule_alpha(s: SmoothingSchedule, t: float | np.ndarray) -> np.ndarray:
    """Exponent at prediction time t, clamped to [2, alpha0]."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, s.t_f)
    frac = np.clip((t - s.t_start) / (s.t_end - s.t_start), 0.0, 1.0)
    return s.alpha0 + frac * (2.0 - s.alpha0)


@dataclass
class ObstacleMotion:
    """Clamped Brownian velocity walk for dynamic obstacles.

    Each step adds a Gaussian increment to the velocity, clamps its norm to
    `max_speed`, and advances the center; reflecting at the arena bounds
    keeps obstacles in play.  Deterministic for a fixed seed.
    """

    kind: str = "static"
    max_speed: float = 0.0
    seed: int = 0
    accel_scale: float = 4.0
    bounds_lo: np.ndarray | None = None
    bounds_hi: np.ndarray | None = None
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.velocity = np.asarray(self.velocity, dtype=float).copy()

    def reset(self):
        self.rng = np.random.default_rng(self.seed)
        self.velocity = np.zeros(3)


def brownian_step(o: Obstacle, motion: ObstacleMotion, dt: float) -> Obstacle:
    """Advance one obstacle by its random-walk motion model."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if motion.kind == "static" or motion.max_speed <= 0.0:
        return o
    v = motion.velocity + motion.rng.normal(scale=motion.accel_scale * dt, size=3)
    speed = np.linalg.norm(v)
    if speed > motion.max_speed:
        v = v * (motion.max_speed / speed)
    center = o.center + v * dt
    if motion.bounds_lo is not None:
        lo, hi = motion.bounds_lo, motion.bounds_hi
        below, above = center < lo, center > hi
        center = np.where(below, 2 * lo - center, center)
        center = np.where(above, 2 * hi - center, center)
        v = np.where(below | above, -v, v)
    motion.velocity = v
    return o.moved_to(center)
