import numpy as np
import pytest

from mfmpc.dynamics import QuadParams
from mfmpc.feasible_sets import SetParams

# Desk quad: 0.6 kg, 34 N collective thrust, 10 rad/s roll/pitch rate limit.
RESIDUAL_CX = [1.18e-02, -1.39e-01, -1.59e-03, -8.31e-08]
RESIDUAL_CY = [-3.21e-02, -9.79e-02, -6.85e-03, -1.01e-07]
RESIDUAL_CZ = [-5.00e-01, 1.16e-01, -1.03e-03, -4.25e-01,
               -1.04e-06, 1.76e-07, -1.89e-08, 0.0]


def make_quad_params(with_residuals: bool = False) -> QuadParams:
    kw = {}
    if with_residuals:
        kw = dict(c_x=np.array(RESIDUAL_CX), c_y=np.array(RESIDUAL_CY),
                  c_z=np.array(RESIDUAL_CZ))
    return QuadParams(
        m=0.6,
        J=np.array([2.4e-3, 1.8e-3, 3.8e-3]),
        c_l=1.6e-6,
        kappa=np.array([0.011, -0.011, 0.011, -0.011]),
        r_p=np.array([[0.075, 0.10, 0.0],
                      [0.075, -0.10, 0.0],
                      [-0.075, -0.10, 0.0],
                      [-0.075, 0.10, 0.0]]),
        f_th_min=0.0,
        f_th_max=34.0,
        omega_xy_max=10.0,
        omega_z_max=6.0,
        v_z_max=8.0,
        v_xy_max=25.0,
        **kw,
    )


def make_set_params() -> SetParams:
    return SetParams(
        m=0.6,
        f_th_max=34.0,
        f_th_min=0.0,
        f_res_max=2.0,
        a_z_lower=-5.0,
        alpha_x=0.5,
        alpha_z=0.5,
        omega_xy_max=10.0,
    )


@pytest.fixture
def quad_params() -> QuadParams:
    return make_quad_params()


@pytest.fixture
def quad_params_residual() -> QuadParams:
    return make_quad_params(with_residuals=True)


@pytest.fixture
def set_params() -> SetParams:
    return make_set_params()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
