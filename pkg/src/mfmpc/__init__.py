"""Multi-fidelity quadrotor MPC library and closed-loop benchmark harness."""

__version__ = "0.1.0"
