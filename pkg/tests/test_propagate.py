import unittest
import os
import sys

import numpy as np

# Add the parent directory to the path so we can import the modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from ocp_model import OcpProblem, TerminalMode
from problems import example1
from propagate import (
    ControlInterpolant,
    Trajectory,
    costate_terminal,
    costates_explicit,
    lbar_derivs,
    propagate_costates,
    propagate_states,
)
from solver_errors import ShapeError
from time_grid import make_grid
from transition import fundamental_set


def tracking_problem():
    """x' = -x + u, L = (x^2 + u^2) / 2, phi = x^2 / 2, free terminal state."""
    return OcpProblem(
        n=1, m=1, q=0, t0=0.0, x0=[1.0],
        terminal_mode=TerminalMode.FREE_TF_FREE_TERMINAL,
        f=lambda x, u, t: -x + u,
        fx=lambda x, u, t: np.array([[-1.0]]),
        fu=lambda x, u, t: np.array([[1.0]]),
        L=lambda x, u, t: 0.5 * (x[0] ** 2 + u[0] ** 2),
        Lx=lambda x, u, t: np.array([x[0]]),
        Lu=lambda x, u, t: np.array([u[0]]),
        phi=lambda x, t: 0.5 * x[0] ** 2,
        phix=lambda x, t: np.array([x[0]]),
        phit=lambda x, t: 0.0,
        phixx=lambda x, t: np.array([[1.0]]),
        name="tracking",
    )


class TestPropagate(unittest.TestCase):
    """Test cases for the state and costate sweeps."""

    def setUp(self):
        self.prob, self.ref = example1()
        self.grid = make_grid(41, 0.0, 2.0)
        self.expected = self.ref.trajectory(self.grid)

    def test_control_spline_interpolates_nodes(self):
        """The natural spline passes through the nodes and reproduces a linear control."""
        spline = ControlInterpolant(self.expected.u, self.grid)
        np.testing.assert_allclose(spline(self.grid.t), self.expected.u, atol=1e-13)
        np.testing.assert_allclose(spline(0.123), [3.0 * 0.123 - 3.5], atol=1e-12)
        np.testing.assert_allclose(spline.derivative(1.0), [3.0], atol=1e-10)

    def test_states_follow_optimal_control(self):
        """Integrating the optimal control reproduces the reference states."""
        x = propagate_states(self.prob, ControlInterpolant(self.expected.u, self.grid), self.grid)
        np.testing.assert_allclose(x, self.expected.x, atol=1e-12)
        np.testing.assert_array_equal(x[:, 0], self.prob.x0)

    def test_costate_sweep_matches_reference(self):
        """The backward sweep from gx^T pi reproduces lam = (3, 3.5 - 3t)."""
        traj = Trajectory(grid=self.grid, x=self.expected.x, lam=None, u=self.expected.u)
        lam = propagate_costates(self.prob, traj, self.ref.pi_hat, substeps=2)
        np.testing.assert_allclose(lam, self.expected.lam, atol=1e-12)

    def test_explicit_costates_agree_with_sweep(self):
        """The transition-matrix costates equal the backward sweep."""
        traj = Trajectory(grid=self.grid, x=self.expected.x, lam=None, u=self.expected.u)
        fs = fundamental_set(self.prob, traj)
        lam = costates_explicit(self.prob, traj, self.ref.pi_hat, fs)
        np.testing.assert_allclose(lam, self.expected.lam, atol=1e-12)

    def test_costate_terminal_checks_pi(self):
        """The transversality value needs exactly q multipliers."""
        np.testing.assert_allclose(costate_terminal(self.prob, np.zeros(2), 2.0, [3.0, -2.5]), [3.0, -2.5])
        with self.assertRaises(ShapeError):
            costate_terminal(self.prob, np.zeros(2), 2.0, [1.0])

    def test_explicit_costates_with_terminal_cost(self):
        """With phi = x^2 / 2 both costate constructions agree to discretization accuracy."""
        prob = tracking_problem()
        grid = make_grid(81, 0.0, 1.0)
        u = np.sin(grid.t)[None]
        x = propagate_states(prob, ControlInterpolant(u, grid), grid)
        traj = Trajectory(grid=grid, x=x, lam=None, u=u)
        swept = propagate_costates(prob, traj, np.zeros(0))
        explicit = costates_explicit(prob, traj, np.zeros(0), fundamental_set(prob, traj))
        np.testing.assert_allclose(explicit, swept, atol=1e-4)
        np.testing.assert_allclose(swept[:, -1], x[:, -1], atol=1e-14)

    def test_lbar_derivatives(self):
        """Lbar = x f + L has Lbar_x = u - x, Lbar_xx = -1 and Lbar_xu = 1."""
        prob = tracking_problem()
        x, u = np.array([0.4]), np.array([-0.3])
        derivs = lbar_derivs(prob, x, u, 0.5)
        self.assertAlmostEqual(derivs.Lbar, 0.4 * (-0.7) + 0.5 * (0.16 + 0.09), places=12)
        np.testing.assert_allclose(derivs.Lbar_x, [-0.7], atol=1e-12)
        np.testing.assert_allclose(derivs.Lbar_xx, [[-1.0]], atol=1e-5)
        np.testing.assert_allclose(derivs.Lbar_xu, [[1.0]], atol=1e-5)


if __name__ == '__main__':
    unittest.main()
