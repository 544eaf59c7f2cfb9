"""
Compact form of the variation evolution.

Only the control (plus tf and pi when they are unknown) evolves; states and
costates are rebuilt at every evaluation by forward and backward propagation,
so the trajectory always satisfies the dynamics, the costate equation and
their boundary conditions. What remains to drive to zero is

    Jbar = g^T W_xf g + w_H (H + phi_t + pi^T g_t)^2 |tf + integral of H_u^T H_u dt

and the evolution equations are its negative gradient flow:

    du/dtau = -K n_u(t),   dtf/dtau = -k_tf n_tf,   dpi/dtau = -K_pi n_pi.

Flat state layout: [u(t_0), ..., u(t_{N-1})] node by node with every control
channel of a node together, then tf when it evolves, then pi when q > 0.
"""

import logging
from dataclasses import dataclass

import numpy as np

from ocp_model import (
    TerminalBlock,
    NodeTerms,
    jbar_compact,
    node_terms,
    terminal_block,
)
from propagate import (
    ControlInterpolant,
    Trajectory,
    propagate_costates,
    propagate_states,
    state_interpolant,
)
from solver_errors import ModeError, NonFiniteEvaluation, ShapeError
from time_grid import Grid, check_series, make_grid, quadrature_weights
from transition import FundamentalSet, apply_backward, apply_forward, fundamental_set

logger = logging.getLogger(__name__)


def _mv(matrix, vector):
    return np.einsum("ij...,j...->i...", matrix, vector)


def _mtv(matrix, vector):
    return np.einsum("ji...,j...->i...", matrix, vector)


@dataclass(frozen=True, eq=False)
class EvalCache:
    """Everything one compact-form evaluation needs, built once per state."""

    grid: Grid
    traj: Trajectory
    control: ControlInterpolant
    fs: FundamentalSet
    terms: NodeTerms
    tb: TerminalBlock
    pi: np.ndarray
    c_fwd: np.ndarray
    back: np.ndarray
    term: np.ndarray
    u_slope: np.ndarray
    quad_w: np.ndarray

    @property
    def hu(self):
        return self.terms.Hu


def build_cache(prob, u_nodes, tf, pi, w, grid=None, substeps=1):
    """
    Rebuild the quasi-feasible trajectory and the repeated integrals.

    Args:
        prob (OcpProblem): The problem.
        u_nodes (np.ndarray): Nodal controls, shape (m, N).
        tf (float): Terminal time; the grid must end there.
        pi (np.ndarray): Terminal-constraint multipliers.
        w (Weights): Functional weights.
        grid (Grid, optional): Grid on [t0, tf]; rebuilt from u_nodes when omitted.
        substeps (int): RK4 steps between nodes.

    Returns:
        EvalCache: The cached evaluation.
    """
    if grid is None:
        grid = make_grid(np.shape(u_nodes)[-1], prob.t0, tf)
    u_nodes = check_series(np.atleast_2d(u_nodes), grid, "u")
    if u_nodes.shape[0] != prob.m:
        raise ShapeError(f"u has {u_nodes.shape[0]} channels, expected {prob.m}")
    pi = np.asarray(pi, dtype=float).reshape(prob.q)

    control = ControlInterpolant(u_nodes, grid)
    x = propagate_states(prob, control, grid, substeps)
    states = state_interpolant(prob, x, u_nodes, grid)
    traj = Trajectory(grid=grid, x=x, lam=None, u=u_nodes)
    lam = propagate_costates(prob, traj, pi, grid, substeps, u=control, x=states)
    traj = traj.with_costates(lam)
    fs = fundamental_set(prob, traj, grid, substeps, u=control, x=states)

    terms = node_terms(prob, x, lam, u_nodes, grid.t)
    tb = terminal_block(prob, x[:, -1], lam[:, -1], u_nodes[:, -1], grid.tf, pi)

    c_fwd = apply_forward(fs, _mv(terms.fu, terms.Hu), grid)
    back = apply_backward(fs, _mtv(terms.Hux, terms.Hu) + _mv(terms.Hxx, c_fwd), grid)

    p = tb.gx.T @ w.W_xf @ tb.g + tb.P @ c_fwd[:, -1]
    if prob.terminal_mode.free_tf:
        p = p + w.w_H * tb.r_H * (tb.Hx + tb.phixt + tb.gxt.T @ tb.pi + tb.P @ tb.f)
    term = np.einsum("ji...,j->i...", fs.Minv, fs.M[:, :, -1].T @ p)

    return EvalCache(
        grid=grid, traj=traj, control=control, fs=fs, terms=terms, tb=tb, pi=pi,
        c_fwd=c_fwd, back=back, term=term,
        u_slope=np.atleast_2d(control.derivative(grid.t)),
        quad_w=quadrature_weights(grid),
    )


def _checked(value, term):
    if not np.all(np.isfinite(value)):
        raise NonFiniteEvaluation("evolution term is not finite", term=term)
    return value


def n_u(cache, prob, w):
    """
    Control gradient density n_u(t), shape (m, N).

    Sum of H_uu H_u, H_ux c(t) and fu^T applied to the backward integral plus
    the terminal block carried back through the transition matrix. With free
    tf the terminal Hamiltonian penalty also depends on u(tf) directly; that
    contribution sits on the last node divided by its quadrature weight.
    """
    terms = cache.terms
    direct = _checked(_mv(terms.Huu, terms.Hu), "H_uu H_u")
    forward = _checked(_mv(terms.Hux, cache.c_fwd), "H_ux c")
    backward = _checked(_mtv(terms.fu, cache.back), "backward integral")
    terminal = _checked(_mtv(terms.fu, cache.term), "terminal block")
    value = direct + forward + backward + terminal
    if prob.terminal_mode.free_tf:
        value[:, -1] += w.w_H * cache.tb.r_H * terms.Hu[:, -1] / cache.quad_w[-1]
    return value


def n_tf(cache, prob, w):
    """Half the derivative of Jbar with respect to tf, keeping u(t) as a function of t."""
    if not prob.terminal_mode.free_tf:
        raise ModeError("n_tf does not exist when the terminal time is fixed")
    tb = cache.tb
    pi = cache.pi
    hu_tf = cache.terms.Hu[:, -1]
    a = tb.P @ tb.f + tb.phixt + tb.gxt.T @ pi + tb.Hx

    value = float(tb.g @ w.W_xf @ (tb.gx @ tb.f + tb.gt))
    value += 0.5 * float(hu_tf @ hu_tf)
    value += float(cache.c_fwd[:, -1] @ a)
    bracket = (float(tb.f @ (2.0 * tb.phixt + 2.0 * tb.gxt.T @ pi + tb.P @ tb.f + tb.Hx))
               + tb.Ht + tb.phitt + float(pi @ tb.gtt) + float(hu_tf @ cache.u_slope[:, -1]))
    value += w.w_H * tb.r_H * bracket
    return float(_checked(value, "n_tf"))


def n_pi(cache, prob, w):
    """Half the gradient of Jbar with respect to pi."""
    if prob.q == 0:
        raise ModeError("n_pi does not exist when the terminal state is free")
    tb = cache.tb
    value = tb.gx @ cache.c_fwd[:, -1]
    if prob.terminal_mode.free_tf:
        value = value + w.w_H * tb.r_H * (tb.gt + tb.gx @ tb.f)
    return _checked(value, "n_pi")


# ---------------------------------------------------------------------------
# Flat state layout
# ---------------------------------------------------------------------------

def compact_length(prob, N):
    return N * prob.m + (1 if prob.terminal_mode.free_tf else 0) + prob.q


def pack_compact(prob, u_nodes, tf, pi):
    """Flatten (u, tf, pi) in the compact layout."""
    parts = [np.asarray(u_nodes, dtype=float).reshape(prob.m, -1).T.reshape(-1)]
    if prob.terminal_mode.free_tf:
        parts.append(np.array([float(tf)]))
    if prob.q:
        parts.append(np.asarray(pi, dtype=float).reshape(prob.q))
    return np.concatenate(parts)


def unpack_compact(prob, flat, grid_spec):
    """Split a compact flat vector into (u_nodes, tf, pi)."""
    flat = np.asarray(flat, dtype=float)
    N, m = grid_spec.N, prob.m
    if flat.shape != (compact_length(prob, N),):
        raise ShapeError(f"compact state has {flat.size} entries, expected {compact_length(prob, N)}")
    u_nodes = flat[:N * m].reshape(N, m).T
    pos = N * m
    tf = grid_spec.tf
    if prob.terminal_mode.free_tf:
        tf = float(flat[pos])
        pos += 1
    return u_nodes, tf, flat[pos:pos + prob.q]


def compact_rhs_from_cache(cache, prob, gains, w, moving_horizon=False):
    """
    Assemble d(flat)/dtau from an evaluated cache.

    Nodes stay at frozen normalized positions. With moving_horizon each node
    also carries u(t) along as tf moves, by u_t(t_i) s_i dtf/dtau.
    """
    du = -_mv(gains.K, n_u(cache, prob, w))
    tf_dot = 0.0
    if prob.terminal_mode.free_tf:
        tf_dot = -gains.k_tf * n_tf(cache, prob, w)
        if moving_horizon:
            du = du + cache.u_slope * cache.grid.s * tf_dot
    pi_dot = -gains.K_pi @ n_pi(cache, prob, w) if prob.q else np.zeros(0)
    return pack_compact(prob, du, tf_dot, pi_dot)


def rhs_compact(state, prob, gains, w, grid_spec, moving_horizon=False):
    """
    Right-hand side of the compact evolution system.

    Args:
        state (EvolutionState | np.ndarray): State or its flat vector.
        prob (OcpProblem): The problem.
        gains (Gains): Evolution gains (K is m x m).
        w (Weights): Functional weights.
        grid_spec (GridSpec): Node count, t0 and the fixed or initial tf.
        moving_horizon (bool): Carry u(t) with the horizon when tf evolves.

    Returns:
        np.ndarray: d(flat)/dtau in the compact layout.
    """
    flat = getattr(state, "flat", state)
    u_nodes, tf, pi = unpack_compact(prob, flat, grid_spec)
    cache = build_cache(prob, u_nodes, tf, pi, w, grid_spec.grid(tf), grid_spec.substeps)
    return compact_rhs_from_cache(cache, prob, gains, w, moving_horizon)


def compact_jbar(prob, flat, w, grid_spec):
    """Jbar of a compact flat vector."""
    u_nodes, tf, pi = unpack_compact(prob, flat, grid_spec)
    cache = build_cache(prob, u_nodes, tf, pi, w, grid_spec.grid(tf), grid_spec.substeps)
    return jbar_compact(prob, cache.traj, pi, tf, w)


class CompactSystem:
    """Compact evolution system in the interface the evolve driver integrates."""

    form = "compact"

    def __init__(self, prob, gains, weights, grid_spec, moving_horizon=False):
        if gains.K.shape != (prob.m, prob.m):
            raise ShapeError(f"compact gain K must be {prob.m}x{prob.m}, got {gains.K.shape}")
        self.prob = prob
        self.gains = gains
        self.weights = weights
        self.grid_spec = grid_spec
        self.moving_horizon = moving_horizon
        self._key = None
        self._cache = None

    def __len__(self):
        return compact_length(self.prob, self.grid_spec.N)

    def unpack(self, flat):
        return unpack_compact(self.prob, flat, self.grid_spec)

    def pack(self, u_nodes, tf, pi):
        return pack_compact(self.prob, u_nodes, tf, pi)

    def cache(self, flat):
        flat = np.asarray(flat, dtype=float)
        key = flat.tobytes()
        if key != self._key:
            u_nodes, tf, pi = self.unpack(flat)
            self._cache = build_cache(self.prob, u_nodes, tf, pi, self.weights,
                                      self.grid_spec.grid(tf), self.grid_spec.substeps)
            self._key = key
        return self._cache

    def rhs(self, flat):
        return compact_rhs_from_cache(self.cache(flat), self.prob, self.gains, self.weights, self.moving_horizon)

    def lyapunov(self, flat):
        cache = self.cache(flat)
        return jbar_compact(self.prob, cache.traj, cache.pi, cache.grid.tf, self.weights)

    def trajectory(self, flat):
        return self.cache(flat).traj

    def terminal(self, flat):
        """(tf, pi) of a flat state."""
        _, tf, pi = self.unpack(flat)
        return tf, np.array(pi)
