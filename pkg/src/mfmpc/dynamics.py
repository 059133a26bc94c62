"""Quadrotor rigid-body dynamics and the point-mass planning model.

State layouts (flat float64 arrays, SI units):

  high-fidelity (17):  p (3) | q (4, scalar-first unit quaternion) | v (3, world)
                       | omega (3, body rates) | f_z (4, per-rotor thrusts)
  high-fidelity input (4): per-rotor thrust derivatives
  low-fidelity (9):    p (3) | v (3) | a (3)
  low-fidelity input (3): jerk

The quaternion convention is scalar-first and rotates body vectors into the
world frame; `quat_rotate(quat_conj(q), v)` maps a world vector into the body
frame.  All functions accept a leading batch axis, which the solver uses to
evaluate finite-difference sensitivities in bulk.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81
GRAVITY_VEC = np.array([0.0, 0.0, GRAVITY])

HF_DIM = 17
HF_NU = 4
LF_DIM = 9
LF_NU = 3

# index slices into the flat state vectors
HF_P = slice(0, 3)
HF_Q = slice(3, 7)
HF_V = slice(7, 10)
HF_W = slice(10, 13)
HF_F = slice(13, 17)
LF_P = slice(0, 3)
LF_V = slice(3, 6)
LF_A = slice(6, 9)

QUAT_TOL = 1e-6


@dataclass(frozen=True)
class QuadParams:
    """Physical quadrotor parameters, including the aerodynamic residual fit.

    `kappa` holds the signed counter-torque coefficients per rotor; symmetric
    builds alternate signs pairwise.  `c_x`/`c_y` (4) and `c_z` (8) weight the
    polynomial residual-force features; rotor speeds entering those features
    are recovered from thrusts through the thrust coefficient `c_l`.
    """

    m: float
    J: np.ndarray
    c_l: float
    kappa: np.ndarray
    r_p: np.ndarray
    f_th_min: float
    f_th_max: float
    omega_xy_max: float
    omega_z_max: float
    v_z_max: float
    v_xy_max: float
    c_x: np.ndarray = field(default_factory=lambda: np.zeros(4))
    c_y: np.ndarray = field(default_factory=lambda: np.zeros(4))
    c_z: np.ndarray = field(default_factory=lambda: np.zeros(8))

    def __post_init__(self):
        for name in ("J", "kappa", "r_p", "c_x", "c_y", "c_z"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.m <= 0:
            raise ValueError("mass must be positive")
        if np.any(self.J <= 0):
            raise ValueError("inertia must be positive")
        if self.c_l <= 0:
            raise ValueError("thrust coefficient must be positive")
        if self.J.shape != (3,) or self.kappa.shape != (4,) or self.r_p.shape != (4, 3):
            raise ValueError("bad parameter shapes")
        if self.c_x.shape != (4,) or self.c_y.shape != (4,) or self.c_z.shape != (8,):
            raise ValueError("residual coefficient shapes must be (4,), (4,), (8,)")

    @property
    def hover_thrust(self) -> float:
        """Per-rotor thrust that balances gravity at identity attitude."""
        return self.m * GRAVITY / 4.0


def hf_state(p, q, v, omega, f_z) -> np.ndarray:
    x = np.empty(HF_DIM)
    x[HF_P], x[HF_Q], x[HF_V], x[HF_W], x[HF_F] = p, q, v, omega, f_z
    return x


def lf_state(p, v, a) -> np.ndarray:
    x = np.empty(LF_DIM)
    x[LF_P], x[LF_V], x[LF_A] = p, v, a
    return x


def hover_state(params: QuadParams, p=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Exact hover equilibrium of the residual-free model at position p."""
    return hf_state(p, (1.0, 0.0, 0.0, 0.0), np.zeros(3), np.zeros(3),
                    np.full(4, params.hover_thrust))


# ---------------------------------------------------------------------------
# quaternion algebra (batched, scalar-first)
# ---------------------------------------------------------------------------

def quat_mult(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=float, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by quaternion(s) q (body-to-world for states)."""
    w = q[..., 0:1]
    im = q[..., 1:]
    t = 2.0 * np.cross(im, v)
    return v + w * t + np.cross(im, t)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2.0)], math.sin(angle / 2.0) * axis])


def quat_to_euler_zyx(q: np.ndarray) -> np.ndarray:
    """Roll-pitch-yaw (ZYX convention) from a scalar-first quaternion."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    roll = np.arctan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2.0 * (w * y - z * x), -1.0, 1.0))
    yaw = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    return np.stack([roll, pitch, yaw], axis=-1)


def quat_error_euler(q: np.ndarray, q_ref: np.ndarray) -> np.ndarray:
    """Attitude error as roll-pitch-yaw of the relative rotation q_ref^-1 q.

    The relative quaternion is sign-canonicalized so q and -q give the same
    error.  Pitch within 1 degree of the gimbal singularity triggers a
    warning; the value is still returned.
    """
    err = attitude_error(np.asarray(q, dtype=float), np.asarray(q_ref, dtype=float))
    if np.any(np.abs(err[..., 1]) > math.radians(89.0)):
        warnings.warn("attitude error close to pitch singularity", RuntimeWarning)
    return err


def attitude_error(q: np.ndarray, q_ref: np.ndarray) -> np.ndarray:
    """Batched quaternion tracking error without gimbal warnings."""
    rel = quat_mult(quat_conj(q_ref), q)
    rel = np.where(rel[..., 0:1] < 0.0, -rel, rel)
    return quat_to_euler_zyx(rel)


# ---------------------------------------------------------------------------
# residual aerodynamic forces
# ---------------------------------------------------------------------------

def residual_force(v_body: np.ndarray, omega_sq_mean: np.ndarray,
                   params: QuadParams) -> np.ndarray:
    """Polynomial aerodynamic residual force in the body frame.

    Features combine body-frame velocity components and the mean squared
    rotor speed; each output component is scaled by the vehicle mass.
    """
    v_body = np.asarray(v_body, dtype=float)
    osm = np.asarray(omega_sq_mean, dtype=float)
    vx, vy, vz = v_body[..., 0], v_body[..., 1], v_body[..., 2]
    vxy = np.hypot(vx, vy)
    one = np.ones_like(vx)

    feats_x = np.stack([one, vx, vx * np.abs(vx), vx * osm], axis=-1)
    feats_y = np.stack([one, vy, vy * np.abs(vy), vy * osm], axis=-1)
    feats_z = np.stack([one, vz, vz ** 3, vxy, vxy ** 2, vxy * osm,
                        vxy * vz * osm, osm], axis=-1)

    fx = feats_x @ params.c_x
    fy = feats_y @ params.c_y
    fz = feats_z @ params.c_z
    return params.m * np.stack([fx, fy, fz], axis=-1)


def rotor_speed_sq_mean(f_z: np.ndarray, params: QuadParams) -> np.ndarray:
    """Mean squared rotor speed from thrusts; negative transients clamp to 0."""
    return np.clip(f_z, 0.0, None).mean(axis=-1) / params.c_l


# ---------------------------------------------------------------------------
# continuous dynamics
# ---------------------------------------------------------------------------

def collective_torque(f_z: np.ndarray, params: QuadParams) -> np.ndarray:
    """Body torque from rotor thrusts: thrust moments plus counter-torques."""
    tau_x = f_z @ params.r_p[:, 1]
    tau_y = -(f_z @ params.r_p[:, 0])
    tau_z = f_z @ params.kappa
    return np.stack([tau_x, tau_y, tau_z], axis=-1)


def hf_dynamics(x: np.ndarray, u: np.ndarray, params: QuadParams,
                validate: bool = True) -> np.ndarray:
    """Time derivative of the 17-dimensional quadrotor state.

    Rejects quaternions whose norm deviates from 1 by more than 1e-6 when
    `validate` is set (integration substeps skip the check).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    q = x[..., HF_Q]
    if validate:
        if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > QUAT_TOL):
            raise ValueError("quaternion norm deviates from 1 beyond 1e-6")

    v = x[..., HF_V]
    omega = x[..., HF_W]
    f_z = x[..., HF_F]

    thrust_sum = f_z.sum(axis=-1)
    v_body = quat_rotate(quat_conj(q), v)
    f_body = residual_force(v_body, rotor_speed_sq_mean(f_z, params), params)
    f_body = f_body + np.stack([np.zeros_like(thrust_sum),
                                np.zeros_like(thrust_sum), thrust_sum], axis=-1)

    omega_quat = np.concatenate([np.zeros_like(omega[..., :1]), 0.5 * omega], axis=-1)
    q_dot = quat_mult(q, omega_quat)
    v_dot = quat_rotate(q, f_body) / params.m - GRAVITY_VEC
    J = params.J
    w_dot = (collective_torque(f_z, params)
             - np.cross(omega, omega * J)) / J

    out = np.empty_like(x)
    out[..., HF_P] = v
    out[..., HF_Q] = q_dot
    out[..., HF_V] = v_dot
    out[..., HF_W] = w_dot
    out[..., HF_F] = u
    return out


def rk4_step(x: np.ndarray, u: np.ndarray, dt: float, params: QuadParams) -> np.ndarray:
    """Classical RK4 step with zero-order-hold input; renormalizes q after."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = hf_dynamics(x, u, params, validate=True)
    k2 = hf_dynamics(x + 0.5 * dt * k1, u, params, validate=False)
    k3 = hf_dynamics(x + 0.5 * dt * k2, u, params, validate=False)
    k4 = hf_dynamics(x + dt * k3, u, params, validate=False)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[..., HF_Q] = quat_normalize(out[..., HF_Q])
    return out


def lf_step(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Exact discretization of the triple integrator under constant jerk."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    j = np.asarray(u, dtype=float)
    p, v, a = x[..., LF_P], x[..., LF_V], x[..., LF_A]
    out = np.empty_like(x)
    out[..., LF_P] = p + v * dt + 0.5 * a * dt ** 2 + j * dt ** 3 / 6.0
    out[..., LF_V] = v + a * dt + 0.5 * j * dt ** 2
    out[..., LF_A] = a + j * dt
    return out


def lf_discrete_matrices(dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact (A, B) of the discrete triple-integrator map."""
    A = np.eye(LF_DIM)
    I3 = np.eye(3)
    A[0:3, 3:6] = dt * I3
    A[0:3, 6:9] = 0.5 * dt ** 2 * I3
    A[3:6, 6:9] = dt * I3
    B = np.vstack([dt ** 3 / 6.0 * I3, 0.5 * dt ** 2 * I3, dt * I3])
    return A, B


# ---------------------------------------------------------------------------
# sensitivities
# ---------------------------------------------------------------------------

FD_STEP = 1e-6


def hf_jacobians(x: np.ndarray, u: np.ndarray, params: QuadParams,
                 dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Forward-difference Jacobians of `rk4_step` w.r.t. state and input.

    The residual polynomials make hand-derived Jacobians error-prone, so the
    discrete map is differenced at step 1e-6 (batched, one RK4 sweep).
    """
    A, B = hf_jacobians_batched(x[None, :], u[None, :], params, dt)
    return A[0], B[0]


def hf_jacobians_batched(X: np.ndarray, U: np.ndarray, params: QuadParams,
                         dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of `rk4_step` for a batch of (state, input) pairs."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    n, nu = HF_DIM, HF_NU
    B = X.shape[0]
    base = rk4_step(X, U, dt, params)

    Xp = np.repeat(X[:, None, :], n + nu, axis=1)
    Up = np.repeat(U[:, None, :], n + nu, axis=1)
    idx = np.arange(n)
    Xp[:, idx, idx] += FD_STEP
    idu = np.arange(nu)
    Up[:, n + idu, idu] += FD_STEP
    # perturbed quaternions stay within the validator tolerance at 1e-6
    pert = rk4_step(Xp.reshape(-1, n), Up.reshape(-1, nu), dt, params)
    pert = pert.reshape(B, n + nu, n)
    sens = (pert - base[:, None, :]) / FD_STEP
    A = np.swapaxes(sens[:, :n, :], 1, 2)
    Bm = np.swapaxes(sens[:, n:, :], 1, 2)
    return A, Bm
