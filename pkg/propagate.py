"""
Quasi-feasible trajectory construction.

States are integrated forward from x0, costates backward from the
transversality condition, both with RK4 on the shared grid. Controls between
nodes come from a natural cubic spline; states between nodes (needed by the
backward sweeps) from a cubic Hermite interpolant on the nodal states and
their slopes.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline, CubicSpline

from ocp_model import at_nodes, fd_partial, hx
from solver_errors import ShapeError
from time_grid import BACKWARD, FORWARD, Grid, check_series, cumtrapz, rk4_path

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States, costates and controls sampled on one grid (lam may be absent before the costate sweep)."""

    grid: Grid
    x: np.ndarray
    lam: Optional[np.ndarray]
    u: np.ndarray

    def with_costates(self, lam):
        return Trajectory(grid=self.grid, x=self.x, lam=lam, u=self.u)


class ControlInterpolant:
    """Natural cubic spline through the nodal controls, one per channel."""

    def __init__(self, u_nodes, grid):
        self.grid = grid
        self.nodes = check_series(np.atleast_2d(u_nodes), grid, "u")
        self._spline = CubicSpline(grid.t, self.nodes, axis=1, bc_type="natural")
        self._slope = self._spline.derivative()

    def __call__(self, t):
        return self._spline(t)

    def derivative(self, t):
        """Time derivative of the interpolated control."""
        return self._slope(t)


class StateInterpolant:
    """Cubic Hermite interpolant on nodal states and their slopes."""

    def __init__(self, x_nodes, slopes, grid):
        self._spline = CubicHermiteSpline(grid.t, x_nodes, slopes, axis=1)

    def __call__(self, t):
        return self._spline(t)


def state_interpolant(prob, x_nodes, u_nodes, grid):
    """Hermite interpolant of the states using f at the nodes as slopes."""
    slopes = at_nodes(prob, prob.f, x_nodes, u_nodes, grid.t, term="f")
    return StateInterpolant(x_nodes, slopes, grid)


def propagate_states(prob, u, grid, substeps=1):
    """
    Integrate x' = f(x, u(t), t) forward from x0.

    Args:
        prob (OcpProblem): The problem.
        u (ControlInterpolant): Control defined on [t0, tf].
        grid (Grid): Nodes to store the states at.
        substeps (int): RK4 steps between consecutive nodes.

    Returns:
        np.ndarray: States of shape (n, N); the first column is x0 exactly.
    """
    def rhs(x, t):
        return np.asarray(prob.f(x, u(t), t), dtype=float)

    return rk4_path(rhs, prob.x0, grid, FORWARD, substeps)


def costate_terminal(prob, x_tf, tf, pi):
    """Transversality value phi_x + gx^T pi at the terminal node."""
    value = np.asarray(prob.phix(x_tf, tf), dtype=float).reshape(prob.n)
    if prob.q:
        pi = np.asarray(pi, dtype=float).reshape(-1)
        if pi.shape != (prob.q,):
            raise ShapeError(f"pi has {pi.size} entries, expected {prob.q}")
        value = value + np.asarray(prob.gx(x_tf, tf), dtype=float).reshape(prob.q, prob.n).T @ pi
    return value


def propagate_costates(prob, traj, pi, grid=None, substeps=1, u=None, x=None):
    """
    Integrate lam' = -(Lx + fx^T lam) backward from the transversality value.

    Args:
        prob (OcpProblem): The problem.
        traj (Trajectory): Supplies the nodal states and controls.
        pi (np.ndarray): Terminal-constraint multipliers.
        grid (Grid, optional): Defaults to the trajectory's grid.
        substeps (int): RK4 steps between consecutive nodes.
        u (ControlInterpolant, optional): Reused control spline.
        x (StateInterpolant, optional): Reused state interpolant.

    Returns:
        np.ndarray: Costates of shape (n, N).
    """
    grid = grid or traj.grid
    if u is None:
        u = ControlInterpolant(traj.u, grid)
    if x is None:
        x = state_interpolant(prob, traj.x, traj.u, grid)
    lam_tf = costate_terminal(prob, traj.x[:, -1], grid.tf, pi)

    def rhs(lam, t):
        return -hx(prob, x(t), lam, u(t), t)

    return rk4_path(rhs, lam_tf, grid, BACKWARD, substeps)


@dataclass(frozen=True)
class LbarDerivs:
    """Partials of the composite running cost Lbar = phi_t + phi_x^T f + L."""

    Lbar: float
    Lbar_x: np.ndarray
    Lbar_xx: np.ndarray
    Lbar_xu: np.ndarray


def lbar_derivs(prob, x, u, t):
    """
    Assemble the partials of Lbar at one point.

    Lbar_x is phi_xt + phi_xx f + fx^T phi_x + Lx. Lbar_xx contracts the second
    derivatives of f with phi_x through Hxx evaluated at lam = phi_x; the
    x-derivative of phi_xt + phi_xx f at frozen f is taken by central
    differences since it needs third derivatives of phi.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    f = np.asarray(prob.f(x, u, t), dtype=float)
    fx = np.asarray(prob.fx(x, u, t), dtype=float).reshape(prob.n, prob.n)
    fu = np.asarray(prob.fu(x, u, t), dtype=float).reshape(prob.n, prob.m)
    phix = np.asarray(prob.phix(x, t), dtype=float).reshape(prob.n)
    phixx = np.asarray(prob.phixx(x, t), dtype=float).reshape(prob.n, prob.n)
    phixt = np.asarray(prob.phixt(x, t), dtype=float).reshape(prob.n)

    Lbar = float(prob.phit(x, t)) + float(phix @ f) + float(prob.L(x, u, t))
    Lbar_x = phixt + phixx @ f + fx.T @ phix + np.asarray(prob.Lx(x, u, t), dtype=float).reshape(prob.n)

    def frozen_f_terms(x_):
        return np.asarray(prob.phixt(x_, t), dtype=float) + np.asarray(prob.phixx(x_, t), dtype=float) @ f

    third = fd_partial(frozen_f_terms, (x,), 0, t)
    Lbar_xx = np.asarray(prob.Hxx(x, phix, u, t), dtype=float) + phixx @ fx + fx.T @ phixx + third
    Lbar_xu = phixx @ fu + np.asarray(prob.Hux(x, phix, u, t), dtype=float).reshape(prob.m, prob.n).T
    return LbarDerivs(Lbar=Lbar, Lbar_x=Lbar_x, Lbar_xx=Lbar_xx, Lbar_xu=Lbar_xu)


def costates_explicit(prob, traj, pi, fs, grid=None):
    """
    Costates from the transition-matrix form.

    lam(t) = phi_x(t) + Phi^T(tf, t) gx^T pi + integral_t^tf Phi^T(s, t) Lbar_x(s) ds,
    with Phi(s, t) = M(s) M(t)^-1 so the integral is one backward cumulative sum.
    """
    grid = grid or traj.grid
    t = grid.t
    n = prob.n
    phix = at_nodes(prob, prob.phix, traj.x, t, term="phix")
    f = at_nodes(prob, prob.f, traj.x, traj.u, t, term="f")
    fx = at_nodes(prob, prob.fx, traj.x, traj.u, t, term="fx")
    lbar_x = (at_nodes(prob, prob.phixt, traj.x, t, term="phixt")
              + np.einsum("ij...,j...->i...", at_nodes(prob, prob.phixx, traj.x, t, term="phixx"), f)
              + np.einsum("ji...,j...->i...", fx, phix)
              + at_nodes(prob, prob.Lx, traj.x, traj.u, t, term="Lx"))

    psi_tf = np.zeros(n)
    if prob.q:
        gx = np.asarray(prob.gx(traj.x[:, -1], grid.tf), dtype=float).reshape(prob.q, n)
        psi_tf = gx.T @ np.asarray(pi, dtype=float)

    inner = cumtrapz(np.einsum("ji...,j...->i...", fs.M, lbar_x), grid, BACKWARD)
    outer = fs.M[:, :, -1].T @ psi_tf
    psi = np.einsum("ji...,j...->i...", fs.Minv, inner + outer[:, None])
    return phix + psi
