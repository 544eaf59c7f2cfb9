import unittest
import os
import sys

import numpy as np

# Add the parent directory to the path so we can import the modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from ocp_model import (
    Gains,
    OcpProblem,
    TerminalMode,
    Weights,
    at_nodes,
    bolza_cost,
    fd_check,
    hamiltonian,
    hu,
    jbar_compact,
    jbar_primary,
    optimality_report,
    terminal_block,
)
from problems import example1, example2
from propagate import Trajectory
from solver_errors import NonFiniteEvaluation, ShapeError
from time_grid import make_grid


def scalar_problem(**overrides):
    """x' = -x + u with cost 1/2 integral of (x^2 + u^2), free terminal state and time."""
    values = dict(
        n=1, m=1, q=0, t0=0.0, x0=[1.0],
        terminal_mode=TerminalMode.FREE_TF_FREE_TERMINAL,
        f=lambda x, u, t: -x + u,
        fx=lambda x, u, t: np.array([[-1.0]]),
        fu=lambda x, u, t: np.array([[1.0]]),
        L=lambda x, u, t: 0.5 * (x[0] ** 2 + u[0] ** 2),
        Lx=lambda x, u, t: np.array([x[0]]),
        Lu=lambda x, u, t: np.array([u[0]]),
        phi=lambda x, t: 0.0,
        phix=lambda x, t: np.zeros(1),
        phit=lambda x, t: 0.0,
        name="scalar",
    )
    values.update(overrides)
    return OcpProblem(**values)


class TestOcpModel(unittest.TestCase):
    """Test cases for the problem model, residuals and functionals."""

    def setUp(self):
        self.prob, self.ref = example1()
        self.w = Weights.for_problem(self.prob)

    def test_terminal_mode_flags(self):
        """Only the fixed-time mode has a fixed tf; only the free-terminal mode is unconstrained."""
        self.assertFalse(TerminalMode.FIXED_TF_WITH_CONSTRAINT.free_tf)
        self.assertTrue(TerminalMode.FREE_TF_WITH_CONSTRAINT.free_tf)
        self.assertFalse(TerminalMode.FREE_TF_FREE_TERMINAL.constrained)
        self.assertEqual(TerminalMode("FreeTf_WithConstraint"), TerminalMode.FREE_TF_WITH_CONSTRAINT)

    def test_x0_shape_checked(self):
        """An initial state of the wrong length is rejected."""
        with self.assertRaises(ShapeError):
            scalar_problem(x0=[1.0, 2.0])

    def test_missing_second_derivatives_are_filled(self):
        """Omitted second-derivative callbacks are filled by finite differences with a warning."""
        with self.assertLogs("ocp_model", level="WARNING"):
            prob = scalar_problem()
        self.assertIn("Hxx", prob.filled)
        self.assertEqual(prob.q, 0)
        x, lam, u = np.array([0.3]), np.array([0.2]), np.array([0.1])
        np.testing.assert_allclose(prob.Hxx(x, lam, u, 0.5), [[1.0]], atol=1e-6)
        np.testing.assert_allclose(prob.Huu(x, lam, u, 0.5), [[1.0]], atol=1e-6)
        np.testing.assert_allclose(prob.Hux(x, lam, u, 0.5), [[0.0]], atol=1e-6)

    def test_hamiltonian_and_hu(self):
        """H = u^2/2 + lam^T (A x + B u) and H_u = u + lam_2 for the double integrator."""
        x, lam, u = np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.array([3.0])
        self.assertAlmostEqual(float(hamiltonian(self.prob, x, lam, u, 0.0)), 4.5 + 1.0 - 3.0)
        np.testing.assert_allclose(hu(self.prob, x, lam, u, 0.0), [2.0])

    def test_reference_is_optimal(self):
        """The closed-form optimum of Example 1 satisfies every optimality condition."""
        grid = make_grid(41, 0.0, 2.0)
        traj = self.ref.trajectory(grid)
        report = optimality_report(self.prob, traj, self.ref.pi_hat)
        self.assertLess(report.worst(), 1e-10)
        self.assertLess(jbar_compact(self.prob, traj, self.ref.pi_hat, 2.0, self.w), 1e-20)
        self.assertLess(jbar_primary(self.prob, traj, self.ref.pi_hat, 2.0, self.w), 1e-18)

    def test_jbar_compact_at_zero_control(self):
        """With u = 0 the double integrator ends at (3, 1), so Jbar = 10."""
        grid = make_grid(41, 0.0, 2.0)
        x = np.stack([1.0 + grid.t, np.ones(grid.N)])
        traj = Trajectory(grid=grid, x=x, lam=np.zeros((2, grid.N)), u=np.zeros((1, grid.N)))
        self.assertAlmostEqual(jbar_compact(self.prob, traj, np.zeros(2), 2.0, self.w), 10.0, places=12)

    def test_bolza_cost_of_reference(self):
        """The reference cost approaches 3.25 on a fine grid."""
        grid = make_grid(401, 0.0, 2.0)
        self.assertAlmostEqual(bolza_cost(self.prob, self.ref.trajectory(grid)), 3.25, places=3)

    def test_trajectory_shape_checked(self):
        """A trajectory with the wrong number of state rows is rejected."""
        grid = make_grid(11, 0.0, 2.0)
        traj = Trajectory(grid=grid, x=np.zeros((3, 11)), lam=np.zeros((2, 11)), u=np.zeros((1, 11)))
        with self.assertRaises(ShapeError):
            optimality_report(self.prob, traj, np.zeros(2))

    def test_at_nodes_reports_bad_node(self):
        """A non-finite value on the grid names the first offending node."""
        grid = make_grid(11, 0.0, 1.0)
        x = np.zeros((2, grid.N))
        with self.assertRaises(NonFiniteEvaluation) as ctx:
            at_nodes(self.prob, lambda x_, t: np.where(t > 0.55, np.inf, x_[0]), x, grid.t, term="spike")
        self.assertEqual(ctx.exception.node, 6)
        self.assertEqual(ctx.exception.term, "spike")

    def test_terminal_block_transversality(self):
        """At the optimum lam(tf) equals gx^T pi."""
        grid = make_grid(41, 0.0, 2.0)
        traj = self.ref.trajectory(grid)
        tb = terminal_block(self.prob, traj.x[:, -1], traj.lam[:, -1], traj.u[:, -1], 2.0, self.ref.pi_hat)
        np.testing.assert_allclose(tb.transversality, 0.0, atol=1e-12)
        np.testing.assert_allclose(tb.g, 0.0, atol=1e-12)
        with self.assertRaises(ShapeError):
            terminal_block(self.prob, traj.x[:, -1], traj.lam[:, -1], traj.u[:, -1], 2.0, np.zeros(3))

    def test_fd_check_passes_for_builtins(self):
        """Hand-written derivatives of both examples agree with finite differences."""
        for prob in (self.prob, example2()[0]):
            report = fd_check(prob, samples=5, seed=3)
            self.assertTrue(report.passed(1e-6), report.errors)

    def test_fd_check_flags_wrong_sign(self):
        """A sign-flipped f_u is named as the worst derivative."""
        prob, _ = example2()
        broken = prob.with_callbacks(fu=lambda x, u, t: -prob.fu(x, u, t))
        report = fd_check(broken, samples=3)
        self.assertFalse(report.passed(1e-6))
        self.assertEqual(report.worst()[0], "fu")

    def test_weights_and_gains_validation(self):
        """Weights and gains must be symmetric positive definite of the right size."""
        with self.assertRaises(ShapeError):
            Weights.for_problem(self.prob, W_xf=[[1.0, 2.0], [0.0, 1.0]])
        with self.assertRaises(ShapeError):
            Weights.for_problem(self.prob, w_H=0.0)
        gains = Gains.build(1, 2, K=0.5, K_pi=0.1)
        np.testing.assert_allclose(gains.K, [[0.5]])
        np.testing.assert_allclose(gains.scaled(2.0).K_pi, 0.2 * np.eye(2))
        with self.assertRaises(ShapeError):
            Gains.build(1, 2, K=-1.0)


if __name__ == '__main__':
    unittest.main()
