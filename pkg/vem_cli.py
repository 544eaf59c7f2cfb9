#!/usr/bin/env python3
"""
Command-line front end for the variation evolving solvers.

Commands:
    solve      Evolve a built-in or file-defined problem and write its results.
    check      Audit the derivative callbacks and the compact gradient assembly.
    reference  Write the reference solution of a built-in problem on a grid.

Exit codes: 0 success, 1 evolution budget exhausted, 2 invalid configuration,
3 numerical failure, 4 audit failure.
"""

import csv
import json
import logging
import os
import sys

import click
import numpy as np

from evolve import COMPACT, FORMS, converged, evolve, gradient_audit, initial_state, write_checkpoint
from ocp_model import Gains, fd_check, optimality_report
from problems import BUILTIN_CONFIGS, error_metrics
from run_config import build_run_config, resolve
from solver_errors import (
    BadHorizon,
    ConfigError,
    Divergence,
    GridTooSmall,
    IllConditionedTransition,
    ModeError,
    NonFiniteEvaluation,
    ShapeError,
    StiffnessFailure,
)
from time_grid import make_grid

logger = logging.getLogger("vem_cli")

EXIT_OK = 0
EXIT_BUDGET = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_AUDIT = 4

AUDIT_TOL = 1e-3

CONFIG_ERRORS = (ConfigError, GridTooSmall, BadHorizon, ShapeError, ModeError)
NUMERICAL_ERRORS = (StiffnessFailure, Divergence, NonFiniteEvaluation, IllConditionedTransition)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(verbose=False):
    level = logging.DEBUG if verbose else os.environ.get("VEM_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger().setLevel(level)


def fail(message, code):
    logger.error(message)
    click.echo(f"error: {message}", err=True)
    return code


def _number(value):
    return format(float(value), ".17g")


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

def trajectory_rows(prob, traj):
    """Header and rows of a trajectory CSV: t, x_1..x_n, lambda_1..lambda_n, u_1..u_m."""
    header = (["t"] + [f"x_{i + 1}" for i in range(prob.n)] + [f"lambda_{i + 1}" for i in range(prob.n)]
              + [f"u_{i + 1}" for i in range(prob.m)])
    lam = traj.lam if traj.lam is not None else np.full_like(traj.x, np.nan)
    block = np.vstack([traj.grid.t[None, :], traj.x, lam, traj.u])
    return header, [[_number(v) for v in column] for column in block.T]


def trace_rows(trace, q):
    """Header and rows of a trace CSV: tau, jbar, rhs_inf_norm, t_f, pi_1..pi_q, step."""
    header = ["tau", "jbar", "rhs_inf_norm", "t_f"] + [f"pi_{i + 1}" for i in range(q)] + ["step"]
    rows = []
    for row in trace.rows:
        tf = row.tf if row.tf is not None else float("nan")
        values = [row.tau, row.jbar, row.rhs_inf_norm, tf, *row.pi, row.step]
        rows.append([_number(v) for v in values])
    return header, rows


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    logger.info(f"Wrote {path}")


def write_json(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info(f"Wrote {path}")


def _finite_or_none(value):
    value = float(value)
    return value if np.isfinite(value) else None


def build_summary(config, prob, traj, tf, pi, trace, verdict, reference):
    summary = {
        "problem": prob.name,
        "form": config.form,
        "nodes": config.nodes,
        "terminal_mode": prob.terminal_mode.value,
        "moving_horizon": config.moving_horizon,
        "converged": bool(verdict),
        "reason": verdict.reason,
        "tau": trace.last.tau if trace.last else 0.0,
        "t_f": float(tf),
        "pi": [float(v) for v in pi],
        "jbar": _finite_or_none(verdict.jbar),
        "rhs_inf_norm": _finite_or_none(verdict.rhs_inf_norm),
        "residuals": optimality_report(prob, traj, pi, tf).as_dict(),
        "integrator": trace.stats(),
    }
    if reference is not None:
        summary["metrics"] = error_metrics(prob, traj, pi, tf, reference)
    return summary


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def problem_options(command):
    command = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                           help="JSON problem-config file.")(command)
    command = click.option("--problem", type=str, help=f"Built-in problem ({', '.join(sorted(BUILTIN_CONFIGS))}).")(command)
    return command


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Solve optimal control problems by variation evolution."""


@cli.command()
@problem_options
@click.option("--form", type=str, default=None, help=f"Evolution form ({', '.join(FORMS)}).")
@click.option("--nodes", type=int, default=None, help="Number of time nodes.")
@click.option("--tau-end", type=float, default=None, help="Variation-time budget.")
@click.option("--rtol", type=float, default=None, help="Relative integrator tolerance.")
@click.option("--atol", type=float, default=None, help="Absolute integrator tolerance.")
@click.option("--trace-every", type=float, default=None, help="Variation-time spacing of trace rows.")
@click.option("--tol", type=float, default=None, help="Residual tolerance for convergence (default 1e-4).")
@click.option("--substeps", type=int, default=None, help="RK4 substeps per grid interval.")
@click.option("--seed", type=int, default=None, help="Seed of the pre-flight audit directions.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None,
              help="Output directory (default $VEM_OUT_DIR or vem_output).")
@click.option("--K", "K", type=float, default=None, help="Control (or primary) evolution gain.")
@click.option("--k-tf", "k_tf", type=float, default=None, help="Terminal-time evolution gain.")
@click.option("--K-pi", "K_pi", type=float, default=None, help="Multiplier evolution gain.")
@click.option("--W-xf", "W_xf", type=float, default=None, help="Terminal-constraint weight.")
@click.option("--w-H", "w_H", type=float, default=None, help="Terminal-Hamiltonian weight.")
@click.option("--moving-horizon/--frozen-nodes", "moving_horizon", default=None,
              help="Let nodes drift with the horizon while t_f evolves (default: frozen nodes).")
@click.option("--preflight", is_flag=True, help="Run the gradient audit before evolving.")
@click.option("--verbose", is_flag=True, help="Log at DEBUG level.")
def solve(problem, config_path, preflight, verbose, **flags):
    """Evolve a problem until its optimality residuals vanish."""
    configure_logging(verbose)
    try:
        config = build_run_config(problem=problem, config_path=config_path, **flags)
        prob, reference, gains, weights, spec = resolve(config)
        state = initial_state(prob, config.form, spec, gains, weights, moving_horizon=config.moving_horizon)
    except CONFIG_ERRORS as exc:
        return fail(str(exc), EXIT_CONFIG)

    if preflight:
        try:
            audit_state = initial_state(prob, COMPACT, spec, Gains.build(prob.m, prob.q), weights)
            report = gradient_audit(prob, audit_state, seed=config.seed)
        except NUMERICAL_ERRORS as exc:
            return fail(str(exc), EXIT_NUMERICAL)
        if not report.passed(AUDIT_TOL):
            name, value = report.worst()
            return fail(f"pre-flight gradient audit failed: {name} mismatch {value:.3e}", EXIT_AUDIT)

    os.makedirs(config.out_dir, exist_ok=True)
    logger.info(f"Solving '{prob.name}' in {config.form} form on {config.nodes} nodes to tau={config.tau_end}")
    try:
        final, trace = evolve(state, config.tau_end, config.rtol, config.atol, config.trace_every,
                              stop_tol=config.tol)
    except Divergence as exc:
        if exc.trace is not None:
            write_csv(os.path.join(config.out_dir, "trace.csv"), *trace_rows(exc.trace, prob.q))
        if exc.checkpoint is not None:
            write_checkpoint(os.path.join(config.out_dir, "checkpoint.json"), exc.checkpoint)
        return fail(str(exc), EXIT_NUMERICAL)
    except NUMERICAL_ERRORS as exc:
        return fail(str(exc), EXIT_NUMERICAL)

    system = final.system()
    try:
        traj = system.trajectory(final.flat)
        tf, pi = system.terminal(final.flat)
        verdict = converged(trace, config.tol)
        summary = build_summary(config, prob, traj, tf, pi, trace, verdict, reference)
    except NUMERICAL_ERRORS as exc:
        return fail(str(exc), EXIT_NUMERICAL)

    write_csv(os.path.join(config.out_dir, "trajectory.csv"), *trajectory_rows(prob, traj))
    write_csv(os.path.join(config.out_dir, "trace.csv"), *trace_rows(trace, prob.q))
    write_json(os.path.join(config.out_dir, "summary.json"), summary)
    write_checkpoint(os.path.join(config.out_dir, "checkpoint.json"), final, summary["tau"])

    if not verdict:
        click.echo(f"not converged: {verdict.reason}", err=True)
        return EXIT_BUDGET
    click.echo(f"converged: jbar={verdict.jbar:.3e} rhs_inf_norm={verdict.rhs_inf_norm:.3e} t_f={float(tf):.6f}")
    return EXIT_OK


@cli.command()
@problem_options
@click.option("--nodes", type=int, default=161, show_default=True, help="Number of time nodes.")
@click.option("--samples", type=int, default=5, show_default=True, help="Random points of the derivative check.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of points and directions.")
@click.option("--tolerance", type=float, default=AUDIT_TOL, show_default=True, help="Gradient audit tolerance.")
@click.option("--derivative-tolerance", type=float, default=1e-5, show_default=True,
              help="Derivative check tolerance.")
@click.option("--verbose", is_flag=True, help="Log at DEBUG level.")
def check(problem, config_path, nodes, samples, seed, tolerance, derivative_tolerance, verbose):
    """Audit derivative callbacks and the gradient assembly against finite differences."""
    configure_logging(verbose)
    try:
        if samples < 1:
            raise ConfigError(f"--samples must be positive, got {samples}")
        config = build_run_config(problem=problem, config_path=config_path, nodes=nodes, seed=seed,
                                  form=COMPACT, out_dir=".")
        prob, _, gains, weights, spec = resolve(config)
        state = initial_state(prob, COMPACT, spec, gains, weights)
    except CONFIG_ERRORS as exc:
        return fail(str(exc), EXIT_CONFIG)

    try:
        derivatives = fd_check(prob, samples=samples, seed=seed)
        audit = gradient_audit(prob, state, seed=seed)
    except NUMERICAL_ERRORS as exc:
        return fail(str(exc), EXIT_NUMERICAL)

    click.echo(f"Derivative check of '{prob.name}' ({derivatives.samples} samples)")
    for name in sorted(derivatives.errors):
        value = derivatives.errors[name]
        click.echo(f"  {name:<10} {value:.3e}  {'ok' if value <= derivative_tolerance else 'FAIL'}")
    click.echo(f"Gradient audit on {nodes} nodes")
    for name, value in audit.blocks.items():
        click.echo(f"  {name:<10} {value:.3e}  {'ok' if value <= tolerance else 'FAIL'}")

    if not derivatives.passed(derivative_tolerance):
        name, value = derivatives.worst()
        return fail(f"derivative check failed: {name} error {value:.3e}", EXIT_AUDIT)
    if not audit.passed(tolerance):
        name, value = audit.worst()
        return fail(f"gradient audit failed: {name} mismatch {value:.3e}", EXIT_AUDIT)
    return EXIT_OK


@cli.command()
@click.option("--problem", type=str, required=True, help=f"Built-in problem ({', '.join(sorted(BUILTIN_CONFIGS))}).")
@click.option("--nodes", type=int, default=401, show_default=True, help="Number of time nodes.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None,
              help="Output directory (default $VEM_OUT_DIR or vem_output).")
@click.option("--verbose", is_flag=True, help="Log at DEBUG level.")
def reference(problem, nodes, out_dir, verbose):
    """Write the reference solution of a built-in problem."""
    configure_logging(verbose)
    try:
        config = build_run_config(problem=problem, nodes=nodes, out_dir=out_dir)
        prob, ref, _, _, _ = resolve(config)
        if ref is None:
            raise ConfigError(f"problem '{problem}' has no reference solution")
        traj = ref.trajectory(make_grid(nodes, ref.t0, ref.tf_hat))
    except CONFIG_ERRORS as exc:
        return fail(str(exc), EXIT_CONFIG)

    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "reference_trajectory.csv")
    write_csv(path, *trajectory_rows(prob, traj))
    report = optimality_report(prob, traj, ref.pi_hat, ref.tf_hat)
    click.echo(f"{path}: worst optimality residual {report.worst():.3e}, J={ref.J_hat:.6f}, t_f={ref.tf_hat:.6f}")
    return EXIT_OK


def main(argv=None):
    """Run the CLI and return its exit code."""
    try:
        code = cli.main(args=argv, prog_name="vem-solve", standalone_mode=False)
    except click.exceptions.Abort:
        return fail("aborted", EXIT_CONFIG)
    except click.ClickException as exc:
        return fail(exc.format_message(), EXIT_CONFIG)
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
