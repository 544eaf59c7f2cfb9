"""
Optimal control problem model for the VEM solver.

Defines the Bolza-form problem (dynamics, running cost, terminal cost and
terminal constraints with their derivative callbacks), the Hamiltonian and its
derivatives, the classic optimality residuals, and the two Lyapunov
functionals (compact and primary) whose decrease drives the evolution.

Callbacks take single points: f(x, u, t) with x an n-vector, u an m-vector
and t a scalar. A problem flagged ``vectorized`` promises that its callbacks
also accept node-stacked arrays (node axis last, e.g. x of shape (n, N) and t
of shape (N,)) and return outputs with the node axis last.
"""

import logging
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np

from solver_errors import GridTooSmall, NonFiniteEvaluation, ShapeError
from time_grid import derivative, trapz

logger = logging.getLogger(__name__)

FD_STEP = 1e-6


class TerminalMode(Enum):
    """How the terminal time and terminal state are treated."""

    FREE_TF_WITH_CONSTRAINT = "FreeTf_WithConstraint"
    FIXED_TF_WITH_CONSTRAINT = "FixedTf_WithConstraint"
    FREE_TF_FREE_TERMINAL = "FreeTf_FreeTerminalState"

    @property
    def free_tf(self):
        return self is not TerminalMode.FIXED_TF_WITH_CONSTRAINT

    @property
    def constrained(self):
        return self is not TerminalMode.FREE_TF_FREE_TERMINAL


# ---------------------------------------------------------------------------
# Finite-difference helpers. They work for single points and for node-stacked
# arrays alike; ``t`` tells which one is being handled.
# ---------------------------------------------------------------------------

def _steps(z, rel=FD_STEP):
    return rel * np.maximum(1.0, np.abs(z))


def fd_partial(fn, args, slot, t, rel=FD_STEP):
    """Central-difference Jacobian of fn(*args) with respect to args[slot]."""
    z = np.asarray(args[slot], dtype=float)
    batched = np.ndim(t) > 0
    cols = []
    for k in range(z.shape[0]):
        eps = _steps(z[k], rel)
        zp = z.copy()
        zm = z.copy()
        zp[k] = zp[k] + eps
        zm[k] = zm[k] - eps
        hi = list(args)
        lo = list(args)
        hi[slot] = zp
        lo[slot] = zm
        cols.append((np.asarray(fn(*hi), dtype=float) - np.asarray(fn(*lo), dtype=float)) / (2.0 * eps))
    base_ndim = cols[0].ndim - (1 if batched else 0)
    return np.stack(cols, axis=1 if base_ndim >= 1 else 0)


def fd_time(fn, args, rel=FD_STEP):
    """Central-difference derivative of fn(*args) with respect to its last argument."""
    t = np.asarray(args[-1], dtype=float)
    eps = _steps(t, rel)
    hi = list(args[:-1]) + [t + eps]
    lo = list(args[:-1]) + [t - eps]
    return (np.asarray(fn(*hi), dtype=float) - np.asarray(fn(*lo), dtype=float)) / (2.0 * eps)


# ---------------------------------------------------------------------------
# Problem definition
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OcpProblem:
    """
    Bolza-form optimal control problem.

    Minimize phi(x(tf), tf) + integral of L(x, u, t) subject to x' = f(x, u, t),
    x(t0) = x0 and, in the constrained modes, g(x(tf), tf) = 0.

    Second-derivative callbacks are contracted (Hxx, Hux, Huu include the
    costate-weighted second derivatives of f; gxx_pi is the x-Jacobian of
    gx^T pi). Any of the optional callbacks left as None is filled with central
    finite differences of the first-derivative callbacks.
    """

    n: int
    m: int
    q: int
    t0: float
    x0: np.ndarray
    terminal_mode: TerminalMode
    f: Callable
    fx: Callable
    fu: Callable
    L: Callable
    Lx: Callable
    Lu: Callable
    phi: Callable
    phix: Callable
    phit: Callable
    g: Optional[Callable] = None
    gx: Optional[Callable] = None
    gt: Optional[Callable] = None
    phixx: Optional[Callable] = None
    phixt: Optional[Callable] = None
    phitt: Optional[Callable] = None
    gxt: Optional[Callable] = None
    gtt: Optional[Callable] = None
    Hxx: Optional[Callable] = None
    Hux: Optional[Callable] = None
    Huu: Optional[Callable] = None
    gxx_pi: Optional[Callable] = None
    Ht: Optional[Callable] = None
    tf: float = 1.0
    name: str = "ocp"
    state_names: Tuple[str, ...] = ()
    control_names: Tuple[str, ...] = ()
    vectorized: bool = False
    filled: Tuple[str, ...] = field(default=(), init=False)

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.n,):
            raise ShapeError(f"x0 has {x0.size} entries, expected {self.n}")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)

        mode = TerminalMode(self.terminal_mode)
        object.__setattr__(self, "terminal_mode", mode)
        if mode.constrained:
            if self.q < 1 or self.g is None or self.gx is None or self.gt is None:
                raise ShapeError(f"mode {mode.value} needs q >= 1 and the g, gx, gt callbacks")
        else:
            object.__setattr__(self, "q", 0)

        if not self.state_names:
            object.__setattr__(self, "state_names", tuple(f"x{i + 1}" for i in range(self.n)))
        if not self.control_names:
            object.__setattr__(self, "control_names", tuple(f"u{j + 1}" for j in range(self.m)))

        filled = []
        for name, maker in _FILLERS.items():
            if name.startswith("g") and not mode.constrained:
                continue
            if getattr(self, name) is None:
                object.__setattr__(self, name, maker(self))
                filled.append(name)
        object.__setattr__(self, "filled", tuple(filled))
        if filled:
            logger.warning(f"Problem '{self.name}': finite-difference fill for {', '.join(filled)}")

    def with_callbacks(self, **overrides):
        """Return a copy of this problem with some callbacks replaced."""
        values = {f_.name: getattr(self, f_.name) for f_ in fields(self) if f_.init}
        for name in self.filled:
            values[name] = None
        values.update(overrides)
        return OcpProblem(**values)


def _fill_hxx(prob):
    return lambda x, lam, u, t: fd_partial(lambda x_: hx(prob, x_, lam, u, t), (x,), 0, t)


def _fill_hux(prob):
    return lambda x, lam, u, t: fd_partial(lambda x_: hu(prob, x_, lam, u, t), (x,), 0, t)


def _fill_huu(prob):
    return lambda x, lam, u, t: fd_partial(lambda u_: hu(prob, x, lam, u_, t), (u,), 0, t)


def _fill_gxx_pi(prob):
    def gxx_pi(x, t, pi):
        return fd_partial(lambda x_: np.einsum("qn...,q->n...", prob.gx(x_, t), pi), (x,), 0, t)
    return gxx_pi


def _fill_phixx(prob):
    return lambda x, t: fd_partial(lambda x_: prob.phix(x_, t), (x,), 0, t)


def _fill_phixt(prob):
    return lambda x, t: fd_time(prob.phix, (x, t))


def _fill_phitt(prob):
    return lambda x, t: fd_time(prob.phit, (x, t))


def _fill_gxt(prob):
    return lambda x, t: fd_time(prob.gx, (x, t))


def _fill_gtt(prob):
    return lambda x, t: fd_time(prob.gt, (x, t))


def _fill_ht(prob):
    return lambda x, lam, u, t: fd_time(lambda x_, l_, u_, t_: hamiltonian(prob, x_, l_, u_, t_), (x, lam, u, t))


_FILLERS = {
    "Hxx": _fill_hxx,
    "Hux": _fill_hux,
    "Huu": _fill_huu,
    "phixx": _fill_phixx,
    "phixt": _fill_phixt,
    "phitt": _fill_phitt,
    "gxt": _fill_gxt,
    "gtt": _fill_gtt,
    "gxx_pi": _fill_gxx_pi,
    "Ht": _fill_ht,
}


# ---------------------------------------------------------------------------
# Weights and reports
# ---------------------------------------------------------------------------

def _as_spd(value, size, name):
    matrix = np.asarray(value, dtype=float)
    if matrix.ndim == 0:
        matrix = float(matrix) * np.eye(size)
    if matrix.shape != (size, size):
        raise ShapeError(f"{name} has shape {matrix.shape}, expected ({size}, {size})")
    if size and not np.allclose(matrix, matrix.T):
        raise ShapeError(f"{name} must be symmetric")
    if size and np.min(np.linalg.eigvalsh(matrix)) <= 0.0:
        raise ShapeError(f"{name} must be positive definite")
    matrix.setflags(write=False)
    return matrix


@dataclass(frozen=True, eq=False)
class Weights:
    """Weights of the Lyapunov functionals."""

    W_xf: np.ndarray
    w_H: float
    W_x0: np.ndarray
    W_lambda: np.ndarray

    @classmethod
    def for_problem(cls, prob, W_xf=1.0, w_H=1.0, W_x0=1.0, W_lambda=1.0):
        """Build weights sized for a problem; scalars mean multiples of the identity."""
        if float(w_H) <= 0.0:
            raise ShapeError(f"w_H must be positive, got {w_H}")
        return cls(
            W_xf=_as_spd(W_xf, prob.q, "W_xf"),
            w_H=float(w_H),
            W_x0=_as_spd(W_x0, prob.n, "W_x0"),
            W_lambda=_as_spd(W_lambda, prob.n, "W_lambda"),
        )


@dataclass(frozen=True, eq=False)
class Gains:
    """Evolution gains: K on the distributed variables, k_tf on tf, K_pi on pi."""

    K: np.ndarray
    k_tf: float
    K_pi: np.ndarray

    @classmethod
    def build(cls, K_size, q, K=1.0, k_tf=1.0, K_pi=1.0):
        """Build gains; scalars mean multiples of the identity."""
        if float(k_tf) <= 0.0:
            raise ShapeError(f"k_tf must be positive, got {k_tf}")
        return cls(K=_as_spd(K, K_size, "K"), k_tf=float(k_tf), K_pi=_as_spd(K_pi, q, "K_pi"))

    def scaled(self, factor):
        """Multiply every gain by a positive factor."""
        return Gains(K=self.K * factor, k_tf=self.k_tf * factor, K_pi=self.K_pi * factor)


@dataclass(frozen=True)
class ResidualReport:
    """Max-norm optimality residuals of a trajectory."""

    dyn_res: float
    costate_res: float
    hu_res: float
    g_res: float
    transversality_res: float
    h_terminal_res: float
    x0_res: float

    def as_dict(self):
        return {f_.name: getattr(self, f_.name) for f_ in fields(self)}

    def worst(self):
        return max(self.as_dict().values())


@dataclass(frozen=True)
class DerivativeCheckReport:
    """Worst scaled finite-difference error per derivative callback."""

    errors: dict
    samples: int
    step: float

    def worst(self):
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def passed(self, tol):
        return all(err <= tol for err in self.errors.values())


# ---------------------------------------------------------------------------
# Hamiltonian and node-wise evaluation
# ---------------------------------------------------------------------------

def _finite(value, term):
    value = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(value)):
        raise NonFiniteEvaluation("callback returned a non-finite value", term=term)
    return value


def hamiltonian(prob, x, lam, u, t):
    """H = L + lam^T f."""
    value = np.asarray(prob.L(x, u, t), dtype=float) + np.einsum("i...,i...->...", lam, prob.f(x, u, t))
    return _finite(value, "H")


def hu(prob, x, lam, u, t):
    """H_u = L_u + f_u^T lam."""
    value = np.asarray(prob.Lu(x, u, t), dtype=float) + np.einsum("ij...,i...->j...", prob.fu(x, u, t), lam)
    return _finite(value, "H_u")


def hx(prob, x, lam, u, t):
    """H_x = L_x + f_x^T lam."""
    value = np.asarray(prob.Lx(x, u, t), dtype=float) + np.einsum("ij...,i...->j...", prob.fx(x, u, t), lam)
    return _finite(value, "H_x")


def at_nodes(prob, fn, *args, term=None):
    """
    Evaluate a pointwise function at every grid node.

    Every argument carries the node axis last (t has shape (N,)); the result
    does too. Vectorized problems are evaluated in one call.
    """
    if prob.vectorized:
        out = np.asarray(fn(*args), dtype=float)
    else:
        count = np.shape(args[-1])[-1]
        out = np.stack([np.asarray(fn(*(a[..., i] for a in args)), dtype=float) for i in range(count)], axis=-1)
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out.reshape(-1, out.shape[-1])))[0][1]
        raise NonFiniteEvaluation("non-finite value on the grid", node=int(bad), term=term or getattr(fn, "__name__", None))
    return out


@dataclass(frozen=True, eq=False)
class NodeTerms:
    """Dynamics and Hamiltonian derivatives sampled at every node."""

    f: np.ndarray
    fx: np.ndarray
    fu: np.ndarray
    Hx: np.ndarray
    Hu: np.ndarray
    Hxx: np.ndarray
    Hux: np.ndarray
    Huu: np.ndarray


def node_terms(prob, x, lam, u, t):
    """Sample f, its Jacobians and the Hamiltonian derivatives on the grid."""
    return NodeTerms(
        f=at_nodes(prob, prob.f, x, u, t, term="f"),
        fx=at_nodes(prob, prob.fx, x, u, t, term="fx"),
        fu=at_nodes(prob, prob.fu, x, u, t, term="fu"),
        Hx=at_nodes(prob, lambda *a: hx(prob, *a), x, lam, u, t, term="H_x"),
        Hu=at_nodes(prob, lambda *a: hu(prob, *a), x, lam, u, t, term="H_u"),
        Hxx=at_nodes(prob, prob.Hxx, x, lam, u, t, term="Hxx"),
        Hux=at_nodes(prob, prob.Hux, x, lam, u, t, term="Hux"),
        Huu=at_nodes(prob, prob.Huu, x, lam, u, t, term="Huu"),
    )


@dataclass(frozen=True, eq=False)
class TerminalBlock:
    """Every terminal quantity the residuals and evolution equations need."""

    x: np.ndarray
    lam: np.ndarray
    u: np.ndarray
    tf: float
    pi: np.ndarray
    f: np.ndarray
    fx: np.ndarray
    H: float
    Hx: np.ndarray
    Hu: np.ndarray
    Ht: float
    phix: np.ndarray
    phit: float
    phixx: np.ndarray
    phixt: np.ndarray
    phitt: float
    g: np.ndarray
    gx: np.ndarray
    gt: np.ndarray
    gxt: np.ndarray
    gtt: np.ndarray
    P: np.ndarray
    lam_target: np.ndarray
    r_H: float

    @property
    def transversality(self):
        return self.lam - self.lam_target


def terminal_block(prob, x, lam, u, tf, pi):
    """Evaluate the terminal quantities at (x(tf), lam(tf), u(tf), tf) for multipliers pi."""
    n, q = prob.n, prob.q
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    u = np.asarray(u, dtype=float)
    pi = np.asarray(pi, dtype=float).reshape(-1)
    if pi.shape != (q,):
        raise ShapeError(f"pi has {pi.size} entries, expected {q}")

    f = _finite(prob.f(x, u, tf), "f")
    if q:
        g = _finite(prob.g(x, tf), "g").reshape(q)
        gx = _finite(prob.gx(x, tf), "gx").reshape(q, n)
        gt = _finite(prob.gt(x, tf), "gt").reshape(q)
        gxt = _finite(prob.gxt(x, tf), "gxt").reshape(q, n)
        gtt = _finite(prob.gtt(x, tf), "gtt").reshape(q)
        gxx_pi = _finite(prob.gxx_pi(x, tf, pi), "gxx_pi").reshape(n, n)
    else:
        g, gt, gtt = np.zeros(0), np.zeros(0), np.zeros(0)
        gx, gxt = np.zeros((0, n)), np.zeros((0, n))
        gxx_pi = np.zeros((n, n))

    phix = _finite(prob.phix(x, tf), "phix").reshape(n)
    phit = float(_finite(prob.phit(x, tf), "phit"))
    phixx = _finite(prob.phixx(x, tf), "phixx").reshape(n, n)
    phixt = _finite(prob.phixt(x, tf), "phixt").reshape(n)
    phitt = float(_finite(prob.phitt(x, tf), "phitt"))

    H = float(hamiltonian(prob, x, lam, u, tf))
    lam_target = phix + gx.T @ pi
    return TerminalBlock(
        x=x, lam=lam, u=u, tf=float(tf), pi=pi, f=f,
        fx=_finite(prob.fx(x, u, tf), "fx").reshape(n, n),
        H=H, Hx=hx(prob, x, lam, u, tf), Hu=hu(prob, x, lam, u, tf),
        Ht=float(_finite(prob.Ht(x, lam, u, tf), "Ht")),
        phix=phix, phit=phit, phixx=phixx, phixt=phixt, phitt=phitt,
        g=g, gx=gx, gt=gt, gxt=gxt, gtt=gtt,
        P=phixx + gxx_pi,
        lam_target=lam_target,
        r_H=H + phit + float(pi @ gt),
    )


def _terminal_of(traj, pi, prob):
    return terminal_block(prob, traj.x[:, -1], traj.lam[:, -1], traj.u[:, -1], traj.grid.tf, pi)


def _check_trajectory(prob, traj):
    if traj.grid.N < 3:
        raise GridTooSmall(f"a trajectory needs at least 3 nodes, got {traj.grid.N}")
    for name, rows in (("x", prob.n), ("lam", prob.n), ("u", prob.m)):
        values = np.asarray(getattr(traj, name))
        if values.shape != (rows, traj.grid.N):
            raise ShapeError(f"trajectory {name} has shape {values.shape}, expected ({rows}, {traj.grid.N})")
        if not np.all(np.isfinite(values)):
            bad = int(np.argwhere(~np.isfinite(values))[0][1])
            raise NonFiniteEvaluation("trajectory holds a non-finite sample", node=bad, term=name)


# ---------------------------------------------------------------------------
# Residuals and Lyapunov functionals
# ---------------------------------------------------------------------------

def optimality_report(prob, traj, pi, tf=None):
    """
    Evaluate the classic optimality conditions on a gridded trajectory.

    Args:
        prob (OcpProblem): The problem.
        traj (Trajectory): States, costates and controls on a grid ending at tf.
        pi (np.ndarray): Terminal-constraint multipliers (length q).
        tf (float, optional): Terminal time; defaults to the grid's last node.

    Returns:
        ResidualReport: Max-norm residuals of every condition.
    """
    _check_trajectory(prob, traj)
    grid = traj.grid
    t = grid.t
    terms = node_terms(prob, traj.x, traj.lam, traj.u, t)
    tb = _terminal_of(traj, pi, prob)

    dyn = derivative(traj.x, grid) - terms.f
    costate = derivative(traj.lam, grid) + terms.Hx
    return ResidualReport(
        dyn_res=float(np.max(np.abs(dyn))),
        costate_res=float(np.max(np.abs(costate))),
        hu_res=float(np.max(np.abs(terms.Hu))),
        g_res=float(np.linalg.norm(tb.g)),
        transversality_res=float(np.linalg.norm(tb.transversality)),
        h_terminal_res=abs(tb.r_H) if prob.terminal_mode.free_tf else 0.0,
        x0_res=float(np.linalg.norm(traj.x[:, 0] - prob.x0)),
    )


def _terminal_penalty(prob, tb, w):
    value = 0.0
    if prob.q:
        value += float(tb.g @ w.W_xf @ tb.g)
    if prob.terminal_mode.free_tf:
        value += w.w_H * tb.r_H ** 2
    return value


def jbar_compact(prob, traj, pi, tf, w):
    """
    Compact-form Lyapunov functional.

    g^T W_xf g + w_H (H + phi_t + pi^T g_t)^2 at tf, plus the integral of
    H_u^T H_u. The terminal-Hamiltonian term is present only with free tf and
    the constraint term only in the constrained modes.
    """
    _check_trajectory(prob, traj)
    Hu = at_nodes(prob, lambda *a: hu(prob, *a), traj.x, traj.lam, traj.u, traj.grid.t, term="H_u")
    tb = _terminal_of(traj, pi, prob)
    value = _terminal_penalty(prob, tb, w) + float(trapz(np.sum(Hu * Hu, axis=0), traj.grid))
    if not np.isfinite(value):
        raise NonFiniteEvaluation("compact functional is not finite", term="jbar")
    return value


def jbar_primary(prob, traj, pi, tf, w):
    """Primary-form Lyapunov functional: every optimality residual squared and weighted."""
    _check_trajectory(prob, traj)
    grid = traj.grid
    terms = node_terms(prob, traj.x, traj.lam, traj.u, grid.t)
    tb = _terminal_of(traj, pi, prob)

    dx0 = traj.x[:, 0] - prob.x0
    e = tb.transversality
    r_x = derivative(traj.x, grid) - terms.f
    r_lam = derivative(traj.lam, grid) + terms.Hx
    integrand = np.sum(r_x * r_x, axis=0) + np.sum(r_lam * r_lam, axis=0) + np.sum(terms.Hu * terms.Hu, axis=0)

    value = (float(dx0 @ w.W_x0 @ dx0) + _terminal_penalty(prob, tb, w)
             + float(e @ w.W_lambda @ e) + float(trapz(integrand, grid)))
    if not np.isfinite(value):
        raise NonFiniteEvaluation("primary functional is not finite", term="jbar")
    return value


def bolza_cost(prob, traj, tf=None):
    """Original performance index phi(x(tf), tf) + integral of L."""
    t = traj.grid.t
    running = at_nodes(prob, prob.L, traj.x, traj.u, t, term="L")
    tf = traj.grid.tf if tf is None else float(tf)
    return float(prob.phi(traj.x[:, -1], tf)) + float(trapz(running, traj.grid))


# ---------------------------------------------------------------------------
# Derivative oracle
# ---------------------------------------------------------------------------

def _scaled_error(analytic, reference):
    analytic = np.asarray(analytic, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if analytic.size == 0:
        return 0.0
    diff = np.max(np.abs(analytic.reshape(reference.shape) - reference))
    return float(diff / max(1.0, np.max(np.abs(reference))))


def fd_check(prob, samples=5, seed=0, step=FD_STEP):
    """
    Compare every derivative callback with central finite differences.

    Points are drawn around x0 over the initial horizon [t0, t0 + tf]. The
    error is the max-norm difference divided by max(1, max-norm of the
    finite-difference value).

    Args:
        prob (OcpProblem): Problem to audit.
        samples (int): Number of random points.
        seed (int): Seed of the point generator.
        step (float): Relative finite-difference step.

    Returns:
        DerivativeCheckReport: Worst error per callback.
    """
    rng = np.random.default_rng(seed)
    n, m, q = prob.n, prob.m, prob.q
    errors = {}

    def record(name, analytic, reference):
        errors[name] = max(errors.get(name, 0.0), _scaled_error(analytic, reference))

    for _ in range(samples):
        x = prob.x0 + rng.uniform(-1.0, 1.0, n)
        u = rng.uniform(-1.0, 1.0, m)
        lam = rng.uniform(-1.0, 1.0, n)
        t = prob.t0 + rng.uniform(0.05, 1.0) * prob.tf
        pi = rng.uniform(-1.0, 1.0, q)

        record("fx", prob.fx(x, u, t), fd_partial(prob.f, (x, u, t), 0, t, step))
        record("fu", prob.fu(x, u, t), fd_partial(prob.f, (x, u, t), 1, t, step))
        record("Lx", prob.Lx(x, u, t), fd_partial(prob.L, (x, u, t), 0, t, step))
        record("Lu", prob.Lu(x, u, t), fd_partial(prob.L, (x, u, t), 1, t, step))
        record("phix", prob.phix(x, t), fd_partial(prob.phi, (x, t), 0, t, step))
        record("phit", prob.phit(x, t), fd_time(prob.phi, (x, t), step))
        record("phixx", prob.phixx(x, t), fd_partial(prob.phix, (x, t), 0, t, step))
        record("phixt", prob.phixt(x, t), fd_time(prob.phix, (x, t), step))
        record("phitt", prob.phitt(x, t), fd_time(prob.phit, (x, t), step))
        record("Hxx", prob.Hxx(x, lam, u, t),
               fd_partial(lambda x_: hx(prob, x_, lam, u, t), (x,), 0, t, step))
        record("Hux", prob.Hux(x, lam, u, t),
               fd_partial(lambda x_: hu(prob, x_, lam, u, t), (x,), 0, t, step))
        record("Huu", prob.Huu(x, lam, u, t),
               fd_partial(lambda u_: hu(prob, x, lam, u_, t), (u,), 0, t, step))
        record("Ht", prob.Ht(x, lam, u, t),
               fd_time(lambda *a: hamiltonian(prob, *a), (x, lam, u, t), step))
        if q:
            record("gx", prob.gx(x, t), fd_partial(prob.g, (x, t), 0, t, step))
            record("gt", prob.gt(x, t), fd_time(prob.g, (x, t), step))
            record("gxt", prob.gxt(x, t), fd_time(prob.gx, (x, t), step))
            record("gtt", prob.gtt(x, t), fd_time(prob.gt, (x, t), step))
            record("gxx_pi", prob.gxx_pi(x, t, pi),
                   fd_partial(lambda x_: np.asarray(prob.gx(x_, t)).T @ pi, (x,), 0, t, step))

    name, worst = max(errors.items(), key=lambda item: item[1])
    logger.info(f"Derivative check of '{prob.name}': worst {name} = {worst:.3e}")
    return DerivativeCheckReport(errors=errors, samples=samples, step=step)
