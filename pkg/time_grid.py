"""
Time grid module for the VEM solver.

Uniform normalized grids on [t0, tf], composite trapezoid quadrature, the
finite-difference time derivative used for every gridded residual, and the
fixed-step RK4 sweep that propagates states, costates and fundamental
matrices along normal time.

Gridded quantities are plain numpy arrays whose LAST axis runs over the nodes,
so a d-component series has shape (d, N) and a matrix series (r, c, N).
"""

import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from solver_errors import BadHorizon, GridTooSmall, NonFiniteEvaluation, ShapeError

logger = logging.getLogger(__name__)

FORWARD = "forward"
BACKWARD = "backward"


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform grid with nodes t_i = t0 + s_i (tf - t0)."""

    N: int
    s: np.ndarray
    t0: float
    tf: float

    @cached_property
    def t(self):
        nodes = self.t0 + self.s * (self.tf - self.t0)
        nodes[-1] = self.tf
        nodes.setflags(write=False)
        return nodes

    @property
    def h(self):
        return (self.tf - self.t0) / (self.N - 1)


def make_grid(N, t0, tf):
    """
    Build a uniform grid on [t0, tf].

    Args:
        N (int): Number of nodes, at least 3.
        t0 (float): Initial time.
        tf (float): Terminal time, strictly after t0.

    Returns:
        Grid: The grid; its first and last nodes equal t0 and tf exactly.
    """
    if int(N) != N or N < 3:
        raise GridTooSmall(f"a grid needs at least 3 nodes, got {N}")
    t0 = float(t0)
    tf = float(tf)
    if not np.isfinite(t0) or not np.isfinite(tf) or tf <= t0:
        raise BadHorizon(f"terminal time {tf} must be finite and after initial time {t0}")
    s = np.linspace(0.0, 1.0, int(N))
    s.setflags(write=False)
    return Grid(N=int(N), s=s, t0=t0, tf=tf)


def check_series(values, grid, name="series"):
    """Return values as a float array aligned with the grid nodes."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 0 or values.shape[-1] != grid.N:
        raise ShapeError(f"{name} has shape {values.shape}, expected last axis of length {grid.N}")
    return values


def quadrature_weights(grid):
    """Composite trapezoid weights w_i, so that trapz(v) = sum_i w_i v_i."""
    w = np.full(grid.N, grid.h)
    w[0] = w[-1] = 0.5 * grid.h
    return w


def trapz(series, grid):
    """Composite trapezoid integral of every component over [t0, tf]."""
    values = check_series(series, grid)
    return trapezoid(values, grid.t, axis=-1)


def cumtrapz(series, grid, direction=FORWARD):
    """
    Cumulative trapezoid integral with both endpoints included.

    Args:
        series (np.ndarray): Samples with the node axis last.
        grid (Grid): The grid the samples live on.
        direction (str): 'forward' gives the integral from t0 to t_i,
            'backward' gives the integral from t_i to tf.

    Returns:
        np.ndarray: Same shape as the input.
    """
    values = check_series(series, grid)
    t = grid.t
    if direction == FORWARD:
        return cumulative_trapezoid(values, t, axis=-1, initial=0.0)
    if direction == BACKWARD:
        flipped = cumulative_trapezoid(values[..., ::-1], t[::-1], axis=-1, initial=0.0)
        return -flipped[..., ::-1]
    raise ValueError(f"unknown direction '{direction}'")


@lru_cache(maxsize=64)
def _derivative_matrix(N, h):
    D = np.zeros((N, N))
    if N < 5:
        # second-order fallback, same stencils as np.gradient(edge_order=2)
        D[0, :3] = [-3.0, 4.0, -1.0]
        D[-1, -3:] = [1.0, -4.0, 3.0]
        for i in range(1, N - 1):
            D[i, i - 1] = -1.0
            D[i, i + 1] = 1.0
        D /= 2.0 * h
    else:
        D[0, :5] = [-25.0, 48.0, -36.0, 16.0, -3.0]
        D[1, :5] = [-3.0, -10.0, 18.0, -6.0, 1.0]
        for i in range(2, N - 2):
            D[i, i - 2:i + 3] = [1.0, -8.0, 0.0, 8.0, -1.0]
        D[-2, -5:] = [-1.0, 6.0, -18.0, 10.0, 3.0]
        D[-1, -5:] = [3.0, -16.0, 36.0, -48.0, 25.0]
        D /= 12.0 * h
    D.setflags(write=False)
    return D


def derivative_matrix(grid):
    """Differentiation matrix D with (d/dt v)_i = sum_j D_ij v_j."""
    return _derivative_matrix(grid.N, grid.h)


def derivative(series, grid):
    """
    Time derivative of gridded samples.

    Fourth-order five-point stencils (central inside, one-sided at the two
    nodes closest to each end), exact for polynomials up to degree four.
    Grids with fewer than five nodes use the second-order stencils.
    """
    values = check_series(series, grid)
    return values @ derivative_matrix(grid).T


def rk4_path(rhs, y0, grid, direction=FORWARD, substeps=1):
    """
    Integrate y' = rhs(y, t) across the grid with classical fixed-step RK4.

    Args:
        rhs (callable): Right-hand side rhs(y, t) returning an array shaped like y.
        y0 (np.ndarray): Value at the first node (forward) or last node (backward).
        grid (Grid): Nodes at which the solution is stored.
        direction (str): 'forward' or 'backward'.
        substeps (int): Internal RK4 steps between consecutive nodes.

    Returns:
        np.ndarray: Solution at every node, shape y0.shape + (N,).
    """
    if substeps < 1:
        raise ValueError(f"substeps must be positive, got {substeps}")
    y = np.array(y0, dtype=float)
    t = grid.t
    out = np.empty(y.shape + (grid.N,))

    if direction == FORWARD:
        order = range(grid.N)
    elif direction == BACKWARD:
        order = range(grid.N - 1, -1, -1)
    else:
        raise ValueError(f"unknown direction '{direction}'")

    order = list(order)
    if not np.all(np.isfinite(y)):
        raise NonFiniteEvaluation("initial value of the sweep is not finite", node=order[0])
    out[..., order[0]] = y

    for prev, node in zip(order[:-1], order[1:]):
        dt = (t[node] - t[prev]) / substeps
        tk = t[prev]
        for _ in range(substeps):
            k1 = rhs(y, tk)
            k2 = rhs(y + 0.5 * dt * k1, tk + 0.5 * dt)
            k3 = rhs(y + 0.5 * dt * k2, tk + 0.5 * dt)
            k4 = rhs(y + dt * k3, tk + dt)
            y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            tk = tk + dt
        if not np.all(np.isfinite(y)):
            raise NonFiniteEvaluation(f"sweep produced a non-finite value at t={t[node]:.6g}", node=node)
        out[..., node] = y

    return out


@dataclass(frozen=True)
class GridSpec:
    """
    Grid recipe carried by an evolving state.

    tf is the fixed terminal time, or the starting guess when tf evolves; the
    actual grid of a free-tf state is rebuilt from the tf entry of its flat
    vector.
    """

    N: int
    t0: float
    tf: float
    substeps: int = 1

    def grid(self, tf=None):
        return make_grid(self.N, self.t0, self.tf if tf is None else tf)
