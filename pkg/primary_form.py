"""
Primary form of the variation evolution.

States, costates and controls all evolve together at every node. The
functional being driven to zero is the weighted sum of every optimality
residual squared; interior nodes follow -K z, the two boundary nodes follow
their own rows, and tf and pi follow scalar and vector evolution equations.

Flat state layout: per node [x, lam, u], node after node, then tf when it
evolves, then pi when q > 0.
"""

import logging
from dataclasses import dataclass

import numpy as np

from ocp_model import jbar_primary, node_terms, terminal_block
from propagate import Trajectory
from solver_errors import ModeError, NonFiniteEvaluation, ShapeError
from time_grid import derivative

logger = logging.getLogger(__name__)


def _mv(matrix, vector):
    return np.einsum("ij...,j...->i...", matrix, vector)


def _mtv(matrix, vector):
    return np.einsum("ji...,j...->i...", matrix, vector)


@dataclass(frozen=True, eq=False)
class PrimaryState:
    """Nodal states, costates and controls with tf and pi."""

    x: np.ndarray
    lam: np.ndarray
    u: np.ndarray
    tf: float
    pi: np.ndarray

    @property
    def N(self):
        return self.x.shape[-1]

    def trajectory(self, grid):
        return Trajectory(grid=grid, x=self.x, lam=self.lam, u=self.u)

    def pack(self, prob):
        return pack_primary(prob, self.x, self.lam, self.u, self.tf, self.pi)

    @classmethod
    def from_flat(cls, prob, flat, grid_spec):
        return cls(*unpack_primary(prob, flat, grid_spec))


def primary_length(prob, N):
    return N * (2 * prob.n + prob.m) + (1 if prob.terminal_mode.free_tf else 0) + prob.q


def pack_primary(prob, x, lam, u, tf, pi):
    """Flatten (x, lam, u, tf, pi) in the primary layout."""
    block = np.concatenate([np.asarray(x, dtype=float), np.asarray(lam, dtype=float),
                            np.asarray(u, dtype=float).reshape(prob.m, -1)], axis=0)
    parts = [block.T.reshape(-1)]
    if prob.terminal_mode.free_tf:
        parts.append(np.array([float(tf)]))
    if prob.q:
        parts.append(np.asarray(pi, dtype=float).reshape(prob.q))
    return np.concatenate(parts)


def unpack_primary(prob, flat, grid_spec):
    """Split a primary flat vector into (x, lam, u, tf, pi)."""
    flat = np.asarray(flat, dtype=float)
    n, m, N = prob.n, prob.m, grid_spec.N
    if flat.shape != (primary_length(prob, N),):
        raise ShapeError(f"primary state has {flat.size} entries, expected {primary_length(prob, N)}")
    width = 2 * n + m
    block = flat[:N * width].reshape(N, width).T
    pos = N * width
    tf = grid_spec.tf
    if prob.terminal_mode.free_tf:
        tf = float(flat[pos])
        pos += 1
    return block[:n], block[n:2 * n], block[2 * n:], tf, flat[pos:pos + prob.q]


class PrimaryEval:
    """Residuals, their time derivatives and the terminal block of one primary state."""

    def __init__(self, prob, state, grid):
        if state.N != grid.N:
            raise ShapeError(f"state has {state.N} nodes, grid has {grid.N}")
        self.prob = prob
        self.state = state
        self.grid = grid
        t = grid.t
        self.terms = node_terms(prob, state.x, state.lam, state.u, t)
        self.x_t = derivative(state.x, grid)
        self.lam_t = derivative(state.lam, grid)
        self.u_t = derivative(state.u, grid)
        self.tb = terminal_block(prob, state.x[:, -1], state.lam[:, -1], state.u[:, -1], grid.tf, state.pi)

    def z(self):
        terms = self.terms
        r_lam = terms.Hx + self.lam_t
        r_x = terms.f - self.x_t
        r_u = terms.Hu
        z_x = _mv(terms.Hxx, r_lam) + _mtv(terms.fx, r_x) + _mtv(terms.Hux, r_u) + derivative(r_x, self.grid)
        z_lam = _mv(terms.fx, r_lam) + _mv(terms.fu, r_u) - derivative(r_lam, self.grid)
        z_u = _mv(terms.Hux, r_lam) + _mtv(terms.fu, r_x) + _mv(terms.Huu, r_u)
        value = np.concatenate([z_x, z_lam, z_u], axis=0)
        if not np.all(np.isfinite(value)):
            bad = int(np.argwhere(~np.isfinite(value))[0][1])
            raise NonFiniteEvaluation("z is not finite", node=bad, term="z")
        return value

    def h(self, w):
        prob = self.prob
        if not prob.terminal_mode.free_tf:
            raise ModeError("h does not exist when the terminal time is fixed")
        tb = self.tb
        pi = self.state.pi
        e = tb.transversality
        x_t = self.x_t[:, -1]
        lam_t = self.lam_t[:, -1]
        value = 2.0 * float(tb.gt @ w.W_xf @ tb.g) if prob.q else 0.0
        value -= 2.0 * float((tb.phixt + tb.gxt.T @ pi) @ w.W_lambda @ e)
        value += 2.0 * w.w_H * tb.r_H * (tb.Ht + tb.phitt + float(pi @ tb.gtt))
        value += float(tb.Hx @ tb.Hx + tb.f @ tb.f + tb.Hu @ tb.Hu - x_t @ x_t - lam_t @ lam_t)
        if not np.isfinite(value):
            raise NonFiniteEvaluation("h is not finite", term="h")
        return value


def z_vector(prob, state, grid):
    """
    Interior residual gradient z, shape (2n + m, N).

    z = H_yy [H_x + lam_t; f - x_t; H_u] - d/dt [x_t - f; lam_t + H_x; 0], with
    y = (x, lam, u) and H_yy the Hessian of H in y.
    """
    return PrimaryEval(prob, state, grid).z()


def h_scalar(prob, state, w, grid):
    """Terminal-time evolution scalar; dtf/dtau = -k_tf h."""
    return PrimaryEval(prob, state, grid).h(w)


def primary_rhs_from_eval(ev, prob, gains, w, moving_horizon=False):
    """
    Assemble d(flat)/dtau from an evaluated primary state.

    By default nodes stay at frozen normalized positions and the terminal
    control row is -K (z_u + u_t dtf/dtau). With moving_horizon the interior
    nodes drift with the horizon by y_t s_i dtf/dtau and the terminal control
    row becomes -K z_u + u_t dtf/dtau.
    """
    n = prob.n
    state = ev.state
    tb = ev.tb
    terms = ev.terms
    free = prob.terminal_mode.free_tf

    z = ev.z()
    dy = -_mv(gains.K, z)

    tf_dot = -gains.k_tf * ev.h(w) if free else 0.0
    if free and moving_horizon:
        y_t = np.concatenate([ev.x_t, ev.lam_t, ev.u_t], axis=0)
        dy[:, 1:-1] += y_t[:, 1:-1] * ev.grid.s[1:-1] * tf_dot

    first = np.concatenate([
        state.x[:, 0] - prob.x0,
        -(ev.lam_t[:, 0] + terms.Hx[:, 0]),
        z[2 * n:, 0],
    ])
    dy[:, 0] = -gains.K @ first

    e = tb.transversality
    b_x = tb.gx.T @ w.W_xf @ tb.g - tb.P @ w.W_lambda @ e + (ev.x_t[:, -1] - tb.f)
    b_lam = w.W_lambda @ e + (ev.lam_t[:, -1] + tb.Hx)
    if free:
        b_x = b_x + w.w_H * tb.r_H * (tb.Hx + tb.phixt + tb.gxt.T @ state.pi)
        b_lam = b_lam + w.w_H * tb.r_H * tb.f
    z_u = z[2 * n:, -1]
    if free and not moving_horizon:
        z_u = z_u + ev.u_t[:, -1] * tf_dot
    dy[:, -1] = -gains.K @ np.concatenate([b_x, b_lam, z_u])
    if free and moving_horizon:
        dy[2 * n:, -1] += ev.u_t[:, -1] * tf_dot

    pi_dot = np.zeros(0)
    if prob.q:
        pull = tb.gx @ w.W_lambda @ e
        if free:
            pull = pull - w.w_H * tb.r_H * tb.gt
        pi_dot = gains.K_pi @ pull

    return pack_primary(prob, dy[:n], dy[n:2 * n], dy[2 * n:], tf_dot, pi_dot)


def rhs_primary(state, prob, gains, w, grid_spec, moving_horizon=False):
    """
    Right-hand side of the primary evolution system.

    Args:
        state (PrimaryState | EvolutionState | np.ndarray): The evolving state.
        prob (OcpProblem): The problem.
        gains (Gains): Evolution gains (K is (2n+m) x (2n+m)).
        w (Weights): Functional weights.
        grid_spec (GridSpec): Node count, t0 and the fixed or initial tf.
        moving_horizon (bool): Let the nodes drift with the horizon when tf evolves.

    Returns:
        np.ndarray: d(flat)/dtau in the primary layout.
    """
    if not isinstance(state, PrimaryState):
        state = PrimaryState.from_flat(prob, getattr(state, "flat", state), grid_spec)
    ev = PrimaryEval(prob, state, grid_spec.grid(state.tf))
    return primary_rhs_from_eval(ev, prob, gains, w, moving_horizon)


class PrimarySystem:
    """Primary evolution system in the interface the evolve driver integrates."""

    form = "primary"

    def __init__(self, prob, gains, weights, grid_spec, moving_horizon=False):
        width = 2 * prob.n + prob.m
        if gains.K.shape != (width, width):
            raise ShapeError(f"primary gain K must be {width}x{width}, got {gains.K.shape}")
        self.prob = prob
        self.gains = gains
        self.weights = weights
        self.grid_spec = grid_spec
        self.moving_horizon = moving_horizon
        self._key = None
        self._eval = None

    def __len__(self):
        return primary_length(self.prob, self.grid_spec.N)

    def state(self, flat):
        return PrimaryState.from_flat(self.prob, flat, self.grid_spec)

    def evaluate(self, flat):
        flat = np.asarray(flat, dtype=float)
        key = flat.tobytes()
        if key != self._key:
            state = self.state(flat)
            self._eval = PrimaryEval(self.prob, state, self.grid_spec.grid(state.tf))
            self._key = key
        return self._eval

    def rhs(self, flat):
        return primary_rhs_from_eval(self.evaluate(flat), self.prob, self.gains, self.weights, self.moving_horizon)

    def lyapunov(self, flat):
        ev = self.evaluate(flat)
        return jbar_primary(self.prob, ev.state.trajectory(ev.grid), ev.state.pi, ev.grid.tf, self.weights)

    def trajectory(self, flat):
        ev = self.evaluate(flat)
        return ev.state.trajectory(ev.grid)

    def terminal(self, flat):
        state = self.state(flat)
        return state.tf, np.array(state.pi)
