"""
Built-in benchmark problems.

Two problem families with vectorized callbacks (node axis last):

- linear_quadratic: x' = A x + B u, cost 1/2 integral of u^T R u, terminal
  state fixed at x_f, terminal time fixed. The double integrator on [0, 2]
  from (1, 1) to the origin is ``example1``.
- brachistochrone: descent under gravity with the path angle as control,
  minimum time to reach a target point, terminal time free. The descent from
  the origin to (2, -2) with g = 10 is ``example2``.

Each example comes with its reference solution: closed-form polynomials for
the double integrator and the cycloid for the brachistochrone.
"""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import bisect

from ocp_model import OcpProblem, TerminalMode, bolza_cost
from propagate import Trajectory
from solver_errors import ConfigError, NoCycloid, ShapeError
from time_grid import make_grid

logger = logging.getLogger(__name__)


def _tile(matrix, t):
    """Repeat a constant array along the node axis when t is node-stacked."""
    matrix = np.asarray(matrix, dtype=float)
    return matrix.reshape(matrix.shape + (1,) * np.ndim(t)) * np.ones(np.shape(t))


def _zeros(shape, t):
    return np.zeros(tuple(shape) + np.shape(t))


@dataclass(frozen=True)
class ReferenceSolution:
    """Reference optimum: a sampler t -> (x, lam, u) plus pi, tf and the optimal cost."""

    sampler: Callable
    pi_hat: np.ndarray
    tf_hat: float
    J_hat: float
    t0: float = 0.0

    def trajectory(self, grid):
        """Sample the reference on a grid."""
        x, lam, u = self.sampler(grid.t)
        return Trajectory(grid=grid, x=np.asarray(x, dtype=float), lam=np.asarray(lam, dtype=float),
                          u=np.atleast_2d(np.asarray(u, dtype=float)))

    def grid(self, N):
        return make_grid(N, self.t0, self.tf_hat)


# ---------------------------------------------------------------------------
# Linear-quadratic family
# ---------------------------------------------------------------------------

def linear_quadratic_problem(A, B, x0, x_f, R=None, t0=0.0, tf=1.0, name="linear_quadratic"):
    """
    Fixed-time transfer of a linear system with quadratic control effort.

    Args:
        A (array-like): n x n system matrix.
        B (array-like): n x m input matrix.
        x0 (array-like): Initial state.
        x_f (array-like): Required terminal state.
        R (array-like, optional): m x m control weight, identity by default.
        t0 (float): Initial time.
        tf (float): Terminal time.
        name (str): Problem name.

    Returns:
        OcpProblem: The problem, in FixedTf_WithConstraint mode.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ShapeError(f"A must be square, got {A.shape}")
    B = B.reshape(n, -1)
    m = B.shape[1]
    R = np.eye(m) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    x_f = np.asarray(x_f, dtype=float).reshape(n)

    def f(x, u, t):
        return np.einsum("ij,j...->i...", A, x) + np.einsum("ij,j...->i...", B, u)

    def L(x, u, t):
        return 0.5 * np.einsum("i...,ij,j...->...", u, R, u)

    def g(x, t):
        return x - x_f.reshape((n,) + (1,) * (np.ndim(x) - 1))

    return OcpProblem(
        n=n, m=m, q=n, t0=t0, x0=x0,
        terminal_mode=TerminalMode.FIXED_TF_WITH_CONSTRAINT,
        f=f,
        fx=lambda x, u, t: _tile(A, t),
        fu=lambda x, u, t: _tile(B, t),
        L=L,
        Lx=lambda x, u, t: _zeros((n,), t),
        Lu=lambda x, u, t: np.einsum("ij,j...->i...", R, u),
        phi=lambda x, t: _zeros((), t),
        phix=lambda x, t: _zeros((n,), t),
        phit=lambda x, t: _zeros((), t),
        phixx=lambda x, t: _zeros((n, n), t),
        phixt=lambda x, t: _zeros((n,), t),
        phitt=lambda x, t: _zeros((), t),
        g=g,
        gx=lambda x, t: _tile(np.eye(n), t),
        gt=lambda x, t: _zeros((n,), t),
        gxt=lambda x, t: _zeros((n, n), t),
        gtt=lambda x, t: _zeros((n,), t),
        gxx_pi=lambda x, t, pi: _zeros((n, n), t),
        Hxx=lambda x, lam, u, t: _zeros((n, n), t),
        Hux=lambda x, lam, u, t: _zeros((m, n), t),
        Huu=lambda x, lam, u, t: _tile(R, t),
        Ht=lambda x, lam, u, t: _zeros((), t),
        tf=tf,
        name=name,
        vectorized=True,
    )


def example1():
    """Double integrator from (1, 1) to the origin on [0, 2] with its closed-form optimum."""
    prob = linear_quadratic_problem(
        A=[[0.0, 1.0], [0.0, 0.0]], B=[[0.0], [1.0]], x0=[1.0, 1.0], x_f=[0.0, 0.0],
        t0=0.0, tf=2.0, name="example1",
    )

    def sampler(t):
        t = np.asarray(t, dtype=float)
        x = np.stack([0.5 * t ** 3 - 1.75 * t ** 2 + t + 1.0, 1.5 * t ** 2 - 3.5 * t + 1.0])
        lam = np.stack([3.0 + 0.0 * t, 3.5 - 3.0 * t])
        u = (3.0 * t - 3.5)[None]
        return x, lam, u

    reference = ReferenceSolution(sampler=sampler, pi_hat=np.array([3.0, -2.5]), tf_hat=2.0, J_hat=3.25)
    return prob, reference


# ---------------------------------------------------------------------------
# Brachistochrone family
# ---------------------------------------------------------------------------

def brachistochrone_problem(gravity=10.0, x0=(0.0, 0.0, 0.0), target=(2.0, -2.0), t0=0.0, tf_guess=1.0,
                            name="brachistochrone"):
    """
    Minimum-time descent to a target point.

    States (x, y, V), control u measured from the -y axis:
    x' = V sin u, y' = -V cos u, V' = g cos u. Cost phi = tf.
    """
    gval = float(gravity)
    target = np.asarray(target, dtype=float).reshape(2)

    def f(x, u, t):
        V, a = x[2], u[0]
        return np.stack([V * np.sin(a), -V * np.cos(a), gval * np.cos(a)])

    def fx(x, u, t):
        a = u[0]
        out = _zeros((3, 3), t)
        out[0, 2] = np.sin(a)
        out[1, 2] = -np.cos(a)
        return out

    def fu(x, u, t):
        V, a = x[2], u[0]
        return np.stack([V * np.cos(a), V * np.sin(a), -gval * np.sin(a)])[:, None]

    def g(x, t):
        return x[:2] - target.reshape((2,) + (1,) * (np.ndim(x) - 1))

    def gx(x, t):
        out = _zeros((2, 3), t)
        out[0, 0] = 1.0
        out[1, 1] = 1.0
        return out

    def hux(x, lam, u, t):
        a = u[0]
        out = _zeros((1, 3), t)
        out[0, 2] = lam[0] * np.cos(a) + lam[1] * np.sin(a)
        return out

    def huu(x, lam, u, t):
        V, a = x[2], u[0]
        return (-lam[0] * V * np.sin(a) + lam[1] * V * np.cos(a) - lam[2] * gval * np.cos(a))[None, None]

    return OcpProblem(
        n=3, m=1, q=2, t0=t0, x0=x0,
        terminal_mode=TerminalMode.FREE_TF_WITH_CONSTRAINT,
        f=f, fx=fx, fu=fu,
        L=lambda x, u, t: _zeros((), t),
        Lx=lambda x, u, t: _zeros((3,), t),
        Lu=lambda x, u, t: _zeros((1,), t),
        phi=lambda x, t: np.asarray(t, dtype=float) * 1.0,
        phix=lambda x, t: _zeros((3,), t),
        phit=lambda x, t: _zeros((), t) + 1.0,
        phixx=lambda x, t: _zeros((3, 3), t),
        phixt=lambda x, t: _zeros((3,), t),
        phitt=lambda x, t: _zeros((), t),
        g=g, gx=gx,
        gt=lambda x, t: _zeros((2,), t),
        gxt=lambda x, t: _zeros((2, 3), t),
        gtt=lambda x, t: _zeros((2,), t),
        gxx_pi=lambda x, t, pi: _zeros((3, 3), t),
        Hxx=lambda x, lam, u, t: _zeros((3, 3), t),
        Hux=hux, Huu=huu,
        Ht=lambda x, lam, u, t: _zeros((), t),
        tf=tf_guess,
        name=name,
        state_names=("x", "y", "V"),
        control_names=("u",),
        vectorized=True,
    )


def _versine(theta):
    return 2.0 * np.sin(0.5 * theta) ** 2


def _theta_minus_sin(theta):
    if theta < 1e-3:
        return theta ** 3 / 6.0 - theta ** 5 / 120.0
    return theta - np.sin(theta)


def cycloid_reference(x_f, y_f, g, t0=0.0):
    """
    Cycloid from the origin (at rest) through (x_f, y_f).

    The generating angle theta* solves (theta - sin theta)(-y_f) = x_f (1 - cos theta)
    on (0, 2 pi); then R = x_f / (theta* - sin theta*), omega = sqrt(g / R) and
    tf = theta* / omega. Along the path theta = omega t, u = theta / 2,
    x = R(theta - sin theta), y = -R(1 - cos theta), V = 2 sqrt(g R) sin u.
    The costates follow from stationarity and the transversality conditions.

    Returns:
        ReferenceSolution: Sampler and terminal quantities.
    """
    if not (x_f > 0.0 and y_f < 0.0 and g > 0.0) or not np.all(np.isfinite([x_f, y_f, g])):
        raise NoCycloid(f"no cycloid from the origin to ({x_f}, {y_f}) with g={g}")
    depth = -float(y_f)

    def endpoint(theta):
        return _theta_minus_sin(theta) * depth - x_f * _versine(theta)

    lower = 1e-3 * min(1.0, x_f / depth)
    upper = 2.0 * np.pi
    if endpoint(lower) * endpoint(upper) > 0.0:
        raise NoCycloid(f"endpoint equation has no root in (0, 2 pi) for ({x_f}, {y_f})")
    theta_star = bisect(endpoint, lower, upper, xtol=1e-12, maxiter=200)

    R = x_f / _theta_minus_sin(theta_star)
    omega = np.sqrt(g / R)
    speed = 2.0 * np.sqrt(g * R)
    tf = t0 + theta_star / omega
    u_tf = 0.5 * theta_star
    beta = u_tf - 0.5 * np.pi
    rho = -1.0 / (speed * np.cos(beta))
    lam_x = rho * np.cos(beta)
    lam_y = rho * np.sin(beta)

    def sampler(t):
        theta = omega * (np.asarray(t, dtype=float) - t0)
        u = 0.5 * theta
        x = np.stack([R * (theta - np.sin(theta)), -R * (1.0 - np.cos(theta)), speed * np.sin(u)])
        lam = np.stack([lam_x + 0.0 * theta, lam_y + 0.0 * theta, (2.0 * rho / omega) * np.cos(u - beta)])
        return x, lam, u[None]

    logger.debug(f"Cycloid: theta*={theta_star:.12f}, R={R:.12f}, tf={tf:.12f}")
    return ReferenceSolution(sampler=sampler, pi_hat=np.array([lam_x, lam_y]), tf_hat=float(tf),
                             J_hat=float(tf), t0=t0)


def example2():
    """Brachistochrone from the origin to (2, -2) with g = 10, referenced by the cycloid."""
    prob = brachistochrone_problem(10.0, (0.0, 0.0, 0.0), (2.0, -2.0), 0.0, 1.0, name="example2")
    return prob, cycloid_reference(2.0, -2.0, 10.0)


# ---------------------------------------------------------------------------
# Registry and metrics
# ---------------------------------------------------------------------------

BUILTIN_CONFIGS = {
    "example1": {
        "family": "linear_quadratic",
        "parameters": {"A": [[0.0, 1.0], [0.0, 0.0]], "B": [[0.0], [1.0]], "R": [[1.0]],
                       "x0": [1.0, 1.0], "x_f": [0.0, 0.0], "t0": 0.0, "tf": 2.0},
        "form": "compact", "nodes": 41,
        "gains": {"K": 1.0, "k_tf": 1.0, "K_pi": 1.0},
        "weights": {"W_xf": 1.0, "w_H": 1.0, "W_x0": 1.0, "W_lambda": 1.0},
        "tau_end": 300.0,
    },
    "example2": {
        "family": "brachistochrone",
        "parameters": {"gravity": 10.0, "x0": [0.0, 0.0, 0.0], "target": [2.0, -2.0], "t0": 0.0, "tf_guess": 1.0},
        "form": "compact", "nodes": 101,
        "gains": {"K": 0.1, "k_tf": 0.01, "K_pi": 0.1},
        "weights": {"W_xf": 1.0, "w_H": 1.0, "W_x0": 1.0, "W_lambda": 1.0},
        "tau_end": 400.0,
    },
}

_BUILTIN = {"example1": example1, "example2": example2}


def builtin(name):
    """(problem, reference) of a built-in example."""
    try:
        return _BUILTIN[name]()
    except KeyError:
        raise ConfigError(f"unknown problem '{name}', expected one of {', '.join(sorted(_BUILTIN))}") from None


def family_problem(family, parameters, name=None):
    """
    Build a problem (and its reference when one is known) from a family and its parameters.

    Returns:
        tuple: (OcpProblem, ReferenceSolution or None).
    """
    params = dict(parameters or {})
    try:
        if family == "linear_quadratic":
            prob = linear_quadratic_problem(
                A=params["A"], B=params["B"], x0=params["x0"], x_f=params["x_f"],
                R=params.get("R"), t0=float(params.get("t0", 0.0)), tf=float(params["tf"]),
                name=name or family,
            )
            return prob, None
        if family == "brachistochrone":
            target = params.get("target", (2.0, -2.0))
            x0 = params.get("x0", (0.0, 0.0, 0.0))
            gravity = float(params.get("gravity", 10.0))
            t0 = float(params.get("t0", 0.0))
            prob = brachistochrone_problem(gravity, x0, target, t0, float(params.get("tf_guess", 1.0)),
                                           name=name or family)
            reference = None
            if np.allclose(x0, 0.0):
                reference = cycloid_reference(float(target[0]), float(target[1]), gravity, t0)
            return prob, reference
    except KeyError as exc:
        raise ConfigError(f"{family} parameters are missing {exc}") from None
    raise ConfigError(f"unknown problem family '{family}'")


def error_metrics(prob, traj, pi, tf, reference):
    """
    Max-norm errors of a numerical solution against a reference.

    The reference is sampled on the numerical grid. e_J compares the Bolza
    cost of the numerical solution, with phi taken at the numerical tf,
    against the analytic optimal cost of the reference.

    Returns:
        dict: e_J, e_tf, e_u, e_<state>, e_lambda_<state> and e_pi (when q > 0).
    """
    ref = reference.trajectory(traj.grid)
    metrics = {
        "e_J": abs(bolza_cost(prob, traj, tf) - reference.J_hat),
        "e_tf": abs(float(tf) - reference.tf_hat),
        "e_u": float(np.max(np.abs(traj.u - ref.u))),
    }
    for i, label in enumerate(prob.state_names):
        metrics[f"e_{label}"] = float(np.max(np.abs(traj.x[i] - ref.x[i])))
    for i, label in enumerate(prob.state_names):
        metrics[f"e_lambda_{label}"] = float(np.max(np.abs(traj.lam[i] - ref.lam[i])))
    if prob.q:
        metrics["e_pi"] = float(np.max(np.abs(np.asarray(pi, dtype=float) - reference.pi_hat)))
    return metrics
