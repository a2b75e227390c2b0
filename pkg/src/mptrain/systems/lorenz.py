"""Lorenz-63 right-hand side and the classical RK4 integrator."""

from __future__ import annotations

import numpy as np


class IntegrationBlowupError(RuntimeError):
    """Raised when an integrator step produces non-finite state."""

    def __init__(self, step_index, message=None):
        self.step_index = step_index
        super().__init__(message or f"non-finite state at step {step_index}")


def lorenz63_rhs(state, params):
    """d/dt of (x, y, z) under the Lorenz-63 equations."""
    x, y, z = state
    sigma, rho, beta = params["sigma"], params["rho"], params["beta"]
    return np.array([
        sigma * (y - x),
        x * (rho - z) - y,
        x * y - beta * z,
    ])


def rk4_step(rhs, state, dt, step_index=0):
    """One classical 4th-order Runge-Kutta step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = rhs(state)
    k2 = rhs(state + 0.5 * dt * k1)
    k3 = rhs(state + 0.5 * dt * k2)
    k4 = rhs(state + dt * k3)
    out = state + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationBlowupError(step_index)
    return out
