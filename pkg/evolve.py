"""
Variation-time driver.

Integrates an evolution system (compact form, primary form, or any object
with ``rhs`` and ``lyapunov``) with the Dormand-Prince 5(4) pair under PI step
control. A step is accepted only when the embedded error estimate passes and
the Lyapunov functional has not grown; otherwise the step is retried at a
smaller size. Trace rows are written at every multiple of ``trace_every``.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

import compact_form
from compact_form import CompactSystem, compact_jbar, compact_length, pack_compact
from ocp_model import Gains, Weights
from primary_form import PrimarySystem, pack_primary, primary_length
from solver_errors import (
    BadHorizon,
    ConfigError,
    Divergence,
    IllConditionedTransition,
    NonFiniteEvaluation,
    StiffnessFailure,
)
from time_grid import GridSpec, make_grid

logger = logging.getLogger(__name__)

COMPACT = "compact"
PRIMARY = "primary"
FORMS = (COMPACT, PRIMARY)

# Dormand-Prince 5(4) tableau
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

SAFETY = 0.9
PI_ALPHA = 0.7 / 5
PI_BETA = 0.4 / 5
MIN_FACTOR = 0.1
MAX_FACTOR = 4.0
MIN_STEP = 1e-12
GUARD_REL = 1e-9
GUARD_ABS = 1e-20

# failures of a trial stage that shrink the step instead of ending the run
_RECOVERABLE = (NonFiniteEvaluation, BadHorizon, IllConditionedTransition)


@dataclass(frozen=True, eq=False)
class EvolutionState:
    """A point of the evolution: the flat vector plus everything needed to interpret it."""

    prob: object
    form: str
    flat: np.ndarray
    grid_spec: GridSpec
    gains: Gains
    weights: Weights
    moving_horizon: bool = False

    def __post_init__(self):
        if self.form not in FORMS:
            raise ConfigError(f"unknown form '{self.form}', expected one of {', '.join(FORMS)}")
        flat = np.array(self.flat, dtype=float)
        expected = (compact_length if self.form == COMPACT else primary_length)(self.prob, self.grid_spec.N)
        if flat.shape != (expected,):
            raise ConfigError(f"{self.form} state needs {expected} entries, got {flat.size}")
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    def system(self):
        cls = CompactSystem if self.form == COMPACT else PrimarySystem
        return cls(self.prob, self.gains, self.weights, self.grid_spec, moving_horizon=self.moving_horizon)

    def with_flat(self, flat):
        return replace(self, flat=flat)


def initial_state(prob, form, grid_spec, gains, weights, u0=0.0, tf=None, pi=None, x0=None, lam0=0.0,
                  moving_horizon=False):
    """
    Build a starting state.

    Args:
        prob (OcpProblem): The problem.
        form (str): 'compact' or 'primary'.
        grid_spec (GridSpec): Grid recipe; its tf is the starting horizon.
        gains (Gains): Evolution gains.
        weights (Weights): Functional weights.
        u0 (float | np.ndarray): Initial control, constant or (m, N).
        tf (float, optional): Starting terminal time, defaults to grid_spec.tf.
        pi (np.ndarray, optional): Starting multipliers, defaults to zero.
        x0 (np.ndarray, optional): Primary form only; nodal states, defaults to x0 held constant.
        lam0 (float | np.ndarray): Primary form only; nodal costates.
        moving_horizon (bool): Let the nodes drift with the horizon when tf evolves.

    Returns:
        EvolutionState: The initial state.
    """
    N = grid_spec.N
    tf = grid_spec.tf if tf is None else tf
    pi = np.zeros(prob.q) if pi is None else pi
    u = np.broadcast_to(np.asarray(u0, dtype=float), (prob.m, N)) if np.ndim(u0) < 2 else u0
    if form == COMPACT:
        flat = pack_compact(prob, u, tf, pi)
    elif form == PRIMARY:
        x = np.repeat(prob.x0[:, None], N, axis=1) if x0 is None else x0
        lam = np.broadcast_to(np.asarray(lam0, dtype=float), (prob.n, N)) if np.ndim(lam0) < 2 else lam0
        flat = pack_primary(prob, x, lam, u, tf, pi)
    else:
        raise ConfigError(f"unknown form '{form}'")
    return EvolutionState(prob=prob, form=form, flat=flat, grid_spec=grid_spec, gains=gains, weights=weights,
                          moving_horizon=moving_horizon)


@dataclass(frozen=True)
class TraceRow:
    tau: float
    jbar: float
    rhs_inf_norm: float
    tf: Optional[float]
    pi: tuple
    step: float


@dataclass
class EvolveTrace:
    """Trace rows, checkpoints and integrator statistics of one run."""

    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    failure: Optional[str] = None
    accepted: int = 0
    rejected: int = 0
    guard_rejections: int = 0
    rhs_evals: int = 0

    def record(self, tau, jbar, rhs_norm, tf, pi, step):
        self.rows.append(TraceRow(float(tau), float(jbar), float(rhs_norm), None if tf is None else float(tf),
                                  tuple(float(v) for v in pi), float(step)))

    @property
    def last(self):
        return self.rows[-1] if self.rows else None

    def stats(self):
        return {
            "accepted_steps": self.accepted,
            "rejected_steps": self.rejected,
            "guard_rejections": self.guard_rejections,
            "rhs_evaluations": self.rhs_evals,
        }


@dataclass(frozen=True)
class Convergence:
    converged: bool
    rhs_inf_norm: float
    jbar: float
    reason: str

    def __bool__(self):
        return self.converged


def converged(trace, tol_residual):
    """
    Decide convergence from the last trace row.

    True iff the last RHS max-norm is at most tol_residual and Jbar at most
    tol_residual squared. A failed run or a trace holding only the initial row
    never counts as converged.
    """
    if trace.failure:
        return Convergence(False, float("nan"), float("nan"), f"run failed: {trace.failure}")
    if len(trace.rows) < 2:
        row = trace.last
        norm = row.rhs_inf_norm if row else float("nan")
        jbar = row.jbar if row else float("nan")
        return Convergence(False, norm, jbar, "no evolution step taken")
    row = trace.last
    ok = row.rhs_inf_norm <= tol_residual and row.jbar <= tol_residual ** 2
    reason = "residuals below tolerance" if ok else (
        f"rhs norm {row.rhs_inf_norm:.3e} / jbar {row.jbar:.3e} above tolerance {tol_residual:.1e}"
    )
    return Convergence(ok, row.rhs_inf_norm, row.jbar, reason)


def _rms(values):
    return float(np.sqrt(np.mean(values * values))) if values.size else 0.0


def _terminal(system, y):
    if hasattr(system, "terminal"):
        return system.terminal(y)
    return None, ()


def _initial_step(rhs, y, k1, rtol, atol):
    scale = atol + rtol * np.abs(y)
    d0 = _rms(y / scale)
    d1 = _rms(k1 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    try:
        k2 = rhs(y + h0 * k1)
    except _RECOVERABLE:
        return h0
    d2 = _rms((k2 - k1) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100.0 * h0, h1)


def integrate_flow(system, y0, tau_end, rtol=1e-5, atol=1e-8, trace_every=1.0,
                   stop_tol=None, checkpoint_every=None, h0=None, min_step=MIN_STEP):
    """
    Integrate dy/dtau = system.rhs(y) from tau = 0 to tau_end.

    Args:
        system: Object with rhs(y) and lyapunov(y), optionally terminal(y) -> (tf, pi).
        y0 (np.ndarray): Initial flat state.
        tau_end (float): Variation-time budget.
        rtol (float): Relative tolerance of the embedded error test.
        atol (float): Absolute tolerance of the embedded error test.
        trace_every (float): Spacing of the trace rows in tau.
        stop_tol (float, optional): Stop early once converged(trace, stop_tol) holds.
        checkpoint_every (float, optional): Spacing of stored checkpoints in tau.
        h0 (float, optional): First step size; estimated when omitted.
        min_step (float): Step size below which the run fails as stiff.

    Returns:
        tuple: (final flat state, EvolveTrace).
    """
    if rtol <= 0 or atol <= 0:
        raise ConfigError(f"tolerances must be positive, got rtol={rtol}, atol={atol}")
    if tau_end <= 0 or trace_every <= 0:
        raise ConfigError(f"tau_end and trace_every must be positive, got {tau_end} and {trace_every}")

    trace = EvolveTrace()

    def rhs(y):
        trace.rhs_evals += 1
        return np.asarray(system.rhs(y), dtype=float)

    def fail(message, y_good):
        trace.failure = message
        logger.error(message)
        raise Divergence(message, checkpoint=np.array(y_good), trace=trace)

    y = np.array(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        fail("initial state is not finite", y)
    k1 = rhs(y)
    if not np.all(np.isfinite(k1)):
        fail("right-hand side is not finite at the initial state", y)
    jbar = float(system.lyapunov(y))
    tf, pi = _terminal(system, y)
    trace.record(0.0, jbar, np.max(np.abs(k1), initial=0.0), tf, pi, 0.0)
    trace.checkpoints.append((0.0, y.copy()))
    logger.info(f"Evolution start: {y.size} states, jbar={jbar:.6e}, tau_end={tau_end}")

    h = h0 if h0 is not None else _initial_step(rhs, y, k1, rtol, atol)
    tau = 0.0
    next_mark = min(trace_every, tau_end)
    next_checkpoint = checkpoint_every if checkpoint_every else None
    err_prev = 1e-4

    while tau < tau_end:
        target = next_mark
        landing = tau + h >= target * (1.0 - 1e-14)
        h_try = target - tau if landing else h

        try:
            stages = [k1]
            for i in range(1, 7):
                increment = sum(a * k for a, k in zip(_A[i], stages) if a != 0.0)
                y_stage = y + h_try * increment
                if not np.all(np.isfinite(y_stage)):
                    fail(f"state became non-finite at tau={tau:.6g}", y)
                if i == 6:
                    y_new = y_stage
                stages.append(rhs(y_stage))
        except _RECOVERABLE as exc:
            trace.rejected += 1
            logger.debug(f"Trial step {h_try:.3e} at tau={tau:.6g} failed ({exc}); halving")
            h = 0.5 * h_try
            if h < min_step:
                raise StiffnessFailure(
                    f"step size {h:.2e} below {min_step:.0e} at tau={tau:.6g}; reduce the evolution gains"
                ) from exc
            continue

        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_vec = h_try * sum(e * k for e, k in zip(_E, stages) if e != 0.0)
        err = _rms(err_vec / scale)

        if err > 1.0:
            trace.rejected += 1
            h = h_try * max(MIN_FACTOR, SAFETY * err ** (-1.0 / 5.0))
            logger.debug(f"Rejected step {h_try:.3e} at tau={tau:.6g} (error {err:.3e})")
        else:
            try:
                jbar_new = float(system.lyapunov(y_new))
            except NonFiniteEvaluation:
                jbar_new = float("nan")
            if not np.isfinite(jbar_new):
                fail(f"Lyapunov functional became non-finite at tau={tau:.6g}", y)
            if jbar_new > jbar * (1.0 + GUARD_REL) + GUARD_ABS:
                trace.rejected += 1
                trace.guard_rejections += 1
                logger.warning(
                    f"Monotonicity guard rejected step {h_try:.3e} at tau={tau:.6g} "
                    f"(jbar {jbar:.6e} -> {jbar_new:.6e})"
                )
                h = 0.5 * h_try
            else:
                trace.accepted += 1
                tau = target if landing else tau + h_try
                y, k1, jbar = y_new, stages[-1], jbar_new
                safe_err = max(err, 1e-10)
                factor = SAFETY * safe_err ** (-PI_ALPHA) * err_prev ** PI_BETA
                factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
                err_prev = max(err, 1e-4)
                h = max(h, h_try) * factor if landing else h_try * factor

                if landing:
                    tf, pi = _terminal(system, y)
                    trace.record(tau, jbar, np.max(np.abs(k1), initial=0.0), tf, pi, h_try)
                    logger.debug(f"tau={tau:.6g} jbar={jbar:.6e} step={h_try:.3e}")
                    if next_checkpoint is not None and tau >= next_checkpoint * (1.0 - 1e-12):
                        trace.checkpoints.append((tau, y.copy()))
                        next_checkpoint += checkpoint_every
                    next_mark = min(next_mark + trace_every, tau_end)
                    if stop_tol is not None and converged(trace, stop_tol):
                        logger.info(f"Converged at tau={tau:.6g} (jbar={jbar:.6e})")
                        break

        if h < min_step:
            raise StiffnessFailure(
                f"step size {h:.2e} below {min_step:.0e} at tau={tau:.6g}; reduce the evolution gains"
            )

    if trace.checkpoints[-1][0] != tau:
        trace.checkpoints.append((tau, y.copy()))
    logger.info(
        f"Evolution end: tau={tau:.6g}, jbar={jbar:.6e}, "
        f"{trace.accepted} accepted / {trace.rejected} rejected steps"
    )
    return y, trace


def evolve(initial, tau_end, rtol=1e-5, atol=1e-8, trace_every=1.0, stop_tol=None, checkpoint_every=None):
    """
    Integrate an evolution state forward in variation time.

    Args:
        initial (EvolutionState): Starting state.
        tau_end (float): Variation-time budget.
        rtol (float): Relative tolerance.
        atol (float): Absolute tolerance.
        trace_every (float): Spacing of trace rows.
        stop_tol (float, optional): Residual tolerance for an early stop.
        checkpoint_every (float, optional): Spacing of stored checkpoints.

    Returns:
        tuple: (final EvolutionState, EvolveTrace).
    """
    system = initial.system()
    try:
        flat, trace = integrate_flow(system, initial.flat, tau_end, rtol, atol, trace_every,
                                     stop_tol=stop_tol, checkpoint_every=checkpoint_every)
    except Divergence as exc:
        checkpoint = initial.with_flat(exc.checkpoint) if exc.checkpoint is not None else None
        raise Divergence(str(exc), checkpoint=checkpoint, trace=exc.trace) from exc
    return initial.with_flat(flat), trace


# ---------------------------------------------------------------------------
# Gradient audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuditReport:
    """Relative mismatch per gradient block between assembly and finite differences."""

    blocks: dict
    samples: dict

    def worst(self):
        name = max(self.blocks, key=self.blocks.get)
        return name, self.blocks[name]

    def passed(self, tol):
        return all(value <= tol for value in self.blocks.values())


def _mismatch(fd, an, floor):
    fd = np.atleast_1d(np.asarray(fd, dtype=float))
    an = np.atleast_1d(np.asarray(an, dtype=float))
    return float(np.linalg.norm(fd - an) / max(np.linalg.norm(fd), np.linalg.norm(an), floor))


def smooth_directions(grid, m, count=4, extra=2, seed=0):
    """Cosine directions on the normalized grid plus seeded random combinations of them."""
    base = [np.cos(k * np.pi * grid.s) for k in range(count)]
    rng = np.random.default_rng(seed)
    directions = []
    for channel in range(m):
        for shape in base + [rng.standard_normal(count) @ np.array(base) for _ in range(extra)]:
            d = np.zeros((m, grid.N))
            d[channel] = shape
            directions.append(d)
    return directions


def gradient_audit(prob, state, w=None, seed=0, step=1e-5, directions=4, random_directions=2):
    """
    Compare the compact-form gradient assembly with finite differences of Jbar.

    The control block is checked along smooth directions d and compared with
    2 sum_i w_i n_u(t_i) d_i; the tf block extends the horizon while keeping
    u(t) as a function of t and is compared with 2 n_tf; the pi block is
    checked per component against 2 n_pi. Each block collects the derivatives
    of all its directions into one vector and reports
    ||fd - analytic|| / max(||fd||, ||analytic||, 1e-6 max(1, Jbar)), so a
    direction whose true derivative vanishes is judged against the whole
    gradient instead of against itself.

    Args:
        prob (OcpProblem): The problem.
        state (EvolutionState): A compact-form state.
        w (Weights, optional): Defaults to the state's weights.
        seed (int): Seed of the random directions.
        step (float): Relative finite-difference step.
        directions (int): Number of cosine directions per control channel.
        random_directions (int): Number of random smooth directions per channel.

    Returns:
        AuditReport: Relative mismatch per block.
    """
    w = w or state.weights
    spec = state.grid_spec
    system = CompactSystem(prob, state.gains, w, spec)
    flat = np.array(state.flat, dtype=float)
    cache = system.cache(flat)
    u_nodes, tf, pi = system.unpack(flat)
    u_nodes = np.array(u_nodes)
    pi = np.array(pi)

    def jbar(candidate):
        return compact_jbar(prob, candidate, w, spec)

    floor = 1e-6 * max(1.0, jbar(flat))
    blocks = {}
    samples = {}

    nu = compact_form.n_u(cache, prob, w)
    eps = step * max(1.0, float(np.max(np.abs(u_nodes), initial=0.0)))
    fd_u, an_u = [], []
    for d in smooth_directions(cache.grid, prob.m, directions, random_directions, seed):
        fd_u.append((jbar(system.pack(u_nodes + eps * d, tf, pi)) - jbar(system.pack(u_nodes - eps * d, tf, pi))) / (2 * eps))
        an_u.append(2.0 * float(np.sum(cache.quad_w * nu * d)))
    blocks["n_u"] = _mismatch(fd_u, an_u, floor)
    samples["n_u"] = len(fd_u)

    if prob.terminal_mode.free_tf:
        eps = step * max(1.0, abs(tf))
        values = []
        for sign in (1.0, -1.0):
            shifted = tf + sign * eps
            grid = make_grid(spec.N, spec.t0, shifted)
            values.append(jbar(system.pack(np.atleast_2d(cache.control(grid.t)), shifted, pi)))
        fd = (values[0] - values[1]) / (2 * eps)
        an = 2.0 * compact_form.n_tf(cache, prob, w)
        blocks["n_tf"] = _mismatch(fd, an, floor)
        samples["n_tf"] = 1

    if prob.q:
        npi = compact_form.n_pi(cache, prob, w)
        fd_pi = np.zeros(prob.q)
        for k in range(prob.q):
            e_k = np.zeros(prob.q)
            e_k[k] = 1.0
            eps = step * max(1.0, abs(pi[k]))
            fd_pi[k] = (jbar(system.pack(u_nodes, tf, pi + eps * e_k)) - jbar(system.pack(u_nodes, tf, pi - eps * e_k))) / (2 * eps)
        blocks["n_pi"] = _mismatch(fd_pi, 2.0 * npi, floor)
        samples["n_pi"] = prob.q

    name, value = max(blocks.items(), key=lambda item: item[1])
    logger.info(f"Gradient audit of '{prob.name}': worst block {name} = {value:.3e}")
    return AuditReport(blocks=blocks, samples=samples)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_record(state, tau=None):
    """Self-describing record of an evolution state."""
    prob = state.prob
    if state.form == COMPACT:
        layout = ["u[node]"] + (["t_f"] if prob.terminal_mode.free_tf else []) + (["pi"] if prob.q else [])
    else:
        layout = ["x,lambda,u[node]"] + (["t_f"] if prob.terminal_mode.free_tf else []) + (["pi"] if prob.q else [])
    spec = state.grid_spec
    return {
        "problem": prob.name,
        "form": state.form,
        "terminal_mode": prob.terminal_mode.value,
        "layout": layout,
        "dimensions": {"n": prob.n, "m": prob.m, "q": prob.q},
        "grid_spec": {"N": spec.N, "t0": spec.t0, "tf": spec.tf, "substeps": spec.substeps},
        "moving_horizon": state.moving_horizon,
        "tau": tau,
        "flat": [float(v) for v in state.flat],
    }


def write_checkpoint(path, state, tau=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_record(state, tau), fh, indent=2)
        fh.write("\n")


def read_checkpoint(path, prob, gains, weights):
    """Load a checkpoint written by write_checkpoint back into an EvolutionState."""
    with open(path, "r", encoding="utf-8") as fh:
        record = json.load(fh)
    if record.get("problem") != prob.name:
        raise ConfigError(f"checkpoint belongs to problem '{record.get('problem')}', not '{prob.name}'")
    spec = GridSpec(**record["grid_spec"])
    return EvolutionState(prob=prob, form=record["form"], flat=np.array(record["flat"]),
                          grid_spec=spec, gains=gains, weights=weights,
                          moving_horizon=bool(record.get("moving_horizon", False)))
