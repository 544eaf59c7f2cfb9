"""
Fundamental matrices of the linearized dynamics.

M(t) solves M' = fx(x(t), u(t), t) M with M(t0) = I, and the state transition
matrix is Phi(s, t) = M(s) M(t)^-1. Only M and its inverse are stored per
node, so every nested integral over Phi reduces to one cumulative sum.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from propagate import ControlInterpolant, state_interpolant
from solver_errors import IllConditionedTransition, ShapeError
from time_grid import BACKWARD, FORWARD, check_series, cumtrapz, rk4_path

logger = logging.getLogger(__name__)

COND_LIMIT = 1e8
COND_WARN = 1e6


@dataclass(frozen=True, eq=False)
class FundamentalSet:
    """Fundamental matrices and their inverses, stacked with the node axis last."""

    M: np.ndarray
    Minv: np.ndarray
    cond_max: float

    @property
    def N(self):
        return self.M.shape[-1]


def fundamental_set(prob, traj, grid=None, substeps=1, u=None, x=None):
    """
    Propagate the fundamental matrix along a trajectory.

    Args:
        prob (OcpProblem): The problem.
        traj (Trajectory): Nodal states and controls.
        grid (Grid, optional): Defaults to the trajectory's grid.
        substeps (int): RK4 steps between consecutive nodes.
        u (ControlInterpolant, optional): Reused control spline.
        x (StateInterpolant, optional): Reused state interpolant.

    Returns:
        FundamentalSet: M and M^-1 at every node.
    """
    grid = grid or traj.grid
    n = prob.n
    if u is None:
        u = ControlInterpolant(traj.u, grid)
    if x is None:
        x = state_interpolant(prob, traj.x, traj.u, grid)

    def rhs(M, t):
        return np.asarray(prob.fx(x(t), u(t), t), dtype=float).reshape(n, n) @ M

    M = rk4_path(rhs, np.eye(n), grid, FORWARD, substeps)
    M[:, :, 0] = np.eye(n)

    Minv = np.empty_like(M)
    conds = np.empty(grid.N)
    eye = np.eye(n)
    for i in range(grid.N):
        conds[i] = np.linalg.cond(M[:, :, i])
        if not np.isfinite(conds[i]) or conds[i] > COND_LIMIT:
            raise IllConditionedTransition(
                f"fundamental matrix condition {conds[i]:.3e} at node {i} exceeds {COND_LIMIT:.0e}; "
                f"shorten the horizon or improve the initial guess"
            )
        Minv[:, :, i] = lu_solve(lu_factor(M[:, :, i]), eye)

    cond_max = float(np.max(conds))
    if cond_max > COND_WARN:
        logger.warning(f"Fundamental matrices are poorly conditioned (cond {cond_max:.3e})")
    M.setflags(write=False)
    Minv.setflags(write=False)
    return FundamentalSet(M=M, Minv=Minv, cond_max=cond_max)


def phi(fs, i, j):
    """State transition matrix Phi(t_i, t_j) = M_i M_j^-1."""
    N = fs.N
    for index in (i, j):
        if not -N <= index < N:
            raise IndexError(f"node {index} out of range for {N} nodes")
    return fs.M[:, :, i] @ fs.Minv[:, :, j]


def control_sensitivity_apply(fs, prob, traj, grid, du, substeps=1):
    """
    Map a control variation to the state variation it causes.

    Returns dx(t) = integral_t0^t Phi(t, s) fu(s) du(s) ds at every node; the
    last column is the terminal-state sensitivity. The integral is evaluated
    as the solution of dx' = fx dx + fu du with dx(t0) = 0, integrated by RK4
    along the interpolated trajectory with du splined like the control.

    Args:
        fs (FundamentalSet): Fundamental matrices of the same trajectory; only
            their node count is checked.
        prob (OcpProblem): The problem.
        traj (Trajectory): Nodal states and controls.
        grid (Grid): Defaults to the trajectory's grid.
        du (np.ndarray): Control variation, shape (m, N).
        substeps (int): RK4 steps between consecutive nodes.

    Returns:
        np.ndarray: dx of shape (n, N).
    """
    grid = grid or traj.grid
    du = check_series(np.atleast_2d(du), grid, "du")
    if du.shape[0] != prob.m:
        raise ShapeError(f"du has {du.shape[0]} channels, expected {prob.m}")
    if fs.N != grid.N:
        raise ShapeError(f"fundamental set has {fs.N} nodes, grid has {grid.N}")
    n, m = prob.n, prob.m
    u = ControlInterpolant(traj.u, grid)
    x = state_interpolant(prob, traj.x, traj.u, grid)
    dv = ControlInterpolant(du, grid)

    def rhs(dx, t):
        xt, ut = x(t), u(t)
        fx = np.asarray(prob.fx(xt, ut, t), dtype=float).reshape(n, n)
        fu = np.asarray(prob.fu(xt, ut, t), dtype=float).reshape(n, m)
        return fx @ dx + fu @ dv(t)

    out = rk4_path(rhs, np.zeros(n), grid, FORWARD, substeps)
    out[:, 0] = 0.0
    return out


def apply_forward(fs, source, grid):
    """M(t) integral_t0^t M(s)^-1 source(s) ds for an n x N source."""
    inner = cumtrapz(np.einsum("ij...,j...->i...", fs.Minv, source), grid, FORWARD)
    return np.einsum("ij...,j...->i...", fs.M, inner)


def apply_backward(fs, source, grid):
    """M(t)^-T integral_t^tf M(s)^T source(s) ds for an n x N source."""
    inner = cumtrapz(np.einsum("ji...,j...->i...", fs.M, source), grid, BACKWARD)
    return np.einsum("ji...,j...->i...", fs.Minv, inner)
