"""Feasibility sets tying the point-mass planning model to the real actuators.

The point-mass model can only honor the quadrotor's thrust and body-rate
limits indirectly, through constraints on acceleration and jerk.  Three
tiers are provided, from tight to cheap:

  nonlinear   exact norm constraints on thrust magnitude and on the
              jerk-to-acceleration ratio,
  polyhedral  dodecahedral inner approximations of the norm balls
              (linear rows a QP can take verbatim),
  box         decoupled per-axis bounds.

Each tier is an inner approximation of the one above it, so a plan feasible
for a cheaper tier is feasible for the real vehicle.  Signed-violation
conventions: values <= 0 mean membership.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import GRAVITY, GRAVITY_VEC

VARIANT_NONLINEAR = "nonlinear"
VARIANT_POLYHEDRAL = "polyhedral"
VARIANT_BOX = "box"
CONSTRAINT_VARIANTS = (VARIANT_NONLINEAR, VARIANT_POLYHEDRAL, VARIANT_BOX)


@dataclass(frozen=True)
class SetParams:
    """Parameters shaping the point-mass feasibility sets."""

    m: float
    f_th_max: float
    f_th_min: float
    f_res_max: float
    a_z_lower: float
    alpha_x: float
    alpha_z: float
    omega_xy_max: float
    g: float = GRAVITY

    def __post_init__(self):
        if not (0.0 < self.alpha_x < 1.0 and 0.0 < self.alpha_z < 1.0):
            raise ValueError("shaping factors must lie in (0, 1)")
        if self.a_z_lower <= -self.g + self.f_th_min / self.m:
            raise ValueError(
                "a_z_lower must exceed f_th_min/m - g for the lower thrust "
                "bound to be covered")

    @property
    def thrust_radius(self) -> float:
        """Radius of the ball on a+g after the residual-force margin."""
        return (self.f_th_max - self.f_res_max) / self.m

    @property
    def jerk_radius(self) -> float:
        """Radius of the jerk ball guaranteeing the body-rate limit."""
        return (self.a_z_lower + self.g) * self.omega_xy_max


def thrust_norm_constraint(a: np.ndarray, sp: SetParams) -> np.ndarray:
    """m*||a+g|| - (f_max - f_res); <= 0 inside the thrust set."""
    a = np.asarray(a, dtype=float)
    return sp.m * np.linalg.norm(a + GRAVITY_VEC, axis=-1) - (sp.f_th_max - sp.f_res_max)


def rate_nonlinear_constraint(a: np.ndarray, j: np.ndarray, sp: SetParams) -> np.ndarray:
    """||j|| / ||a+g|| - omega_max; <= 0 keeps the thrust-axis slew feasible."""
    a = np.asarray(a, dtype=float)
    j = np.asarray(j, dtype=float)
    denom = np.linalg.norm(a + GRAVITY_VEC, axis=-1)
    if np.any(denom < 1e-9):
        raise ValueError("degenerate acceleration: ||a+g|| below 1e-9")
    return np.linalg.norm(j, axis=-1) / denom - sp.omega_xy_max


def accel_box(sp: SetParams) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounds on a+g forming an inner box of the thrust ball.

    Computed iteratively: the z-bound takes a share alpha_z of the vertical
    headroom, x takes a share alpha_x of what remains, y takes the rest.
    """
    f_over_m = sp.f_th_max / sp.m
    a_z = sp.alpha_z * (f_over_m - sp.g)
    rad_x = f_over_m ** 2 - (a_z + sp.g) ** 2
    if rad_x <= 0:
        raise ValueError("alpha_z leaves no horizontal thrust authority")
    a_x = sp.alpha_x * math.sqrt(rad_x)
    rad_y = f_over_m ** 2 - a_x ** 2 - (a_z + sp.g) ** 2
    if rad_y < 0:
        raise ValueError("alpha_x exhausts the thrust budget")
    a_y = math.sqrt(rad_y)
    lower = np.array([-a_x, -a_y, sp.a_z_lower + sp.g])
    upper = np.array([a_x, a_y, a_z])
    return lower, upper


def jerk_box(sp: SetParams) -> float:
    """Per-axis jerk bound whose cube sits inside the jerk ball."""
    return sp.jerk_radius / math.sqrt(3.0)


def jerk_ball_constraint(j: np.ndarray, sp: SetParams) -> np.ndarray:
    """||j|| - (a_z_lower + g) * omega_max; <= 0 inside the convex jerk set."""
    j = np.asarray(j, dtype=float)
    return np.linalg.norm(j, axis=-1) - sp.jerk_radius


@dataclass(frozen=True)
class Polyhedron:
    """Half-space set {x : A x <= b} with unit-norm rows."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        norms = np.linalg.norm(self.A, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("facet normals must have unit norm")

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.all(np.asarray(x) @ self.A.T <= self.b + 1e-12, axis=-1)

    def violation(self, x: np.ndarray) -> np.ndarray:
        return np.max(np.asarray(x) @ self.A.T - self.b, axis=-1)


# Regular-dodecahedron face normals come in the (0, +-1, +-phi) family; the
# inradius/circumradius ratio sqrt((5 + 2*sqrt(5))/15) makes facet offsets for
# a polyhedron inscribed in the unit ball.
_PHI = (1.0 + math.sqrt(5.0)) / 2.0
_INRADIUS_RATIO = math.sqrt((5.0 + 2.0 * math.sqrt(5.0)) / 15.0)


def _dodecahedron_normals() -> np.ndarray:
    raw = []
    for s1 in (1.0, -1.0):
        for s2 in (1.0, -1.0):
            raw.append([0.0, s1, s2 * _PHI])
            raw.append([s1, s2 * _PHI, 0.0])
            raw.append([s1 * _PHI, 0.0, s2])
    normals = np.array(raw) / math.sqrt(1.0 + _PHI ** 2)
    # rotate the first facet normal onto +z so one face caps the set from above
    n0 = normals[0]
    ez = np.array([0.0, 0.0, 1.0])
    v = np.cross(n0, ez)
    c = float(n0 @ ez)
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    R = np.eye(3) + vx + vx @ vx / (1.0 + c)
    return normals @ R.T


_DODECA_NORMALS = _dodecahedron_normals()


def dodecahedron_halfspaces(radius: float) -> Polyhedron:
    """Regular dodecahedron inscribed in the ball of the given radius.

    The polyhedron's vertices touch the sphere (circumradius = radius), so
    every feasible point satisfies the norm bound; facet centers sit at the
    inradius.  One facet normal points along +z.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    b = np.full(12, radius * _INRADIUS_RATIO)
    return Polyhedron(_DODECA_NORMALS.copy(), b)
