"""
Parameter-optimization flows.

Continuous counterparts of the gradient and Newton iterations for minimizing
a scalar objective h(theta): the gradient flow, the Newton flow and the
inversion-free Gauss-Newton-type flow. They run on the same evolve driver as
the optimal control forms.
"""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, solve

from evolve import integrate_flow
from solver_errors import ConfigError, SingularHessian

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12

GRADIENT = "gradient"
NEWTON = "newton"
GAUSS = "gauss"
FLOW_KINDS = (GRADIENT, NEWTON, GAUSS)


@dataclass(frozen=True)
class ScalarObjective:
    """Objective h with its gradient and Hessian callbacks."""

    h: Callable
    h_theta: Callable
    h_thetatheta: Callable


def quadratic_objective(Q, b=None):
    """h = 1/2 theta^T Q theta - b^T theta."""
    Q = np.asarray(Q, dtype=float)
    b = np.zeros(Q.shape[0]) if b is None else np.asarray(b, dtype=float)
    return ScalarObjective(
        h=lambda th: 0.5 * float(th @ Q @ th) - float(b @ th),
        h_theta=lambda th: Q @ th - b,
        h_thetatheta=lambda th: Q,
    )


def gradient_flow_rhs(obj, theta, k_g):
    """dtheta/dtau = -k_g h_theta."""
    return -k_g * np.asarray(obj.h_theta(theta), dtype=float)


def newton_flow_rhs(obj, theta, k_n):
    """dtheta/dtau = -k_n h_thetatheta^-1 h_theta."""
    hess = np.atleast_2d(np.asarray(obj.h_thetatheta(theta), dtype=float))
    cond = np.linalg.cond(hess)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularHessian(f"Hessian condition number {cond:.3e} at theta={theta}")
    try:
        step = solve(hess, np.asarray(obj.h_theta(theta), dtype=float))
    except LinAlgError as exc:
        raise SingularHessian(f"Hessian is singular at theta={theta}") from exc
    return -k_n * step


def gauss_flow_rhs(obj, theta, k_n):
    """dtheta/dtau = -k_n h_thetatheta^T h_theta."""
    hess = np.atleast_2d(np.asarray(obj.h_thetatheta(theta), dtype=float))
    return -k_n * (hess.T @ np.asarray(obj.h_theta(theta), dtype=float))


def explicit_euler_step(rhs, theta, dt):
    return theta + dt * rhs(theta)


def gradient_iterate(obj, theta, alpha):
    """One gradient-method iterate theta - alpha h_theta."""
    return theta - alpha * np.asarray(obj.h_theta(theta), dtype=float)


def newton_iterate(obj, theta, alpha=1.0):
    """One damped Newton iterate theta - alpha h_thetatheta^-1 h_theta."""
    return theta + alpha * newton_flow_rhs(obj, theta, 1.0)


class FlowSystem:
    """Adapts a parameter flow to the evolve driver."""

    def __init__(self, obj, kind=GRADIENT, gain=1.0):
        if kind not in FLOW_KINDS:
            raise ConfigError(f"unknown flow '{kind}', expected one of {', '.join(FLOW_KINDS)}")
        if gain <= 0:
            raise ConfigError(f"flow gain must be positive, got {gain}")
        self.obj = obj
        self.kind = kind
        self.gain = float(gain)

    def rhs(self, theta):
        if self.kind == GRADIENT:
            return gradient_flow_rhs(self.obj, theta, self.gain)
        if self.kind == NEWTON:
            return newton_flow_rhs(self.obj, theta, self.gain)
        return gauss_flow_rhs(self.obj, theta, self.gain)

    def lyapunov(self, theta):
        if self.kind == GRADIENT:
            return float(self.obj.h(theta))
        grad = np.asarray(self.obj.h_theta(theta), dtype=float)
        return float(grad @ grad)


def run_flow(obj, theta0, kind=GRADIENT, gain=1.0, tau_end=1.0, rtol=1e-8, atol=1e-10, trace_every=None):
    """
    Integrate a parameter flow from theta0.

    Returns:
        tuple: (final theta, EvolveTrace).
    """
    system = FlowSystem(obj, kind, gain)
    logger.debug(f"Running {kind} flow with gain {gain} to tau={tau_end}")
    return integrate_flow(system, np.asarray(theta0, dtype=float), tau_end, rtol, atol,
                          trace_every or tau_end)
