import unittest
import os
import sys

import numpy as np

# Add the parent directory to the path so we can import the modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from ocp_model import Gains, Weights
from primary_form import (
    PrimaryEval,
    PrimaryState,
    PrimarySystem,
    h_scalar,
    pack_primary,
    primary_length,
    rhs_primary,
    z_vector,
)
from problems import example1, example2
from solver_errors import ModeError, ShapeError
from time_grid import GridSpec, make_grid


def state_from_reference(reference, grid):
    traj = reference.trajectory(grid)
    return PrimaryState(x=traj.x, lam=traj.lam, u=traj.u, tf=grid.tf, pi=np.array(reference.pi_hat))


class TestPrimaryForm(unittest.TestCase):
    """Test cases for the primary evolution equations."""

    def setUp(self):
        self.prob1, self.ref1 = example1()
        self.prob2, self.ref2 = example2()
        self.w1 = Weights.for_problem(self.prob1)
        self.w2 = Weights.for_problem(self.prob2)
        self.spec1 = GridSpec(N=41, t0=0.0, tf=2.0)

    def test_flat_lengths(self):
        """Example 1 has 207 primary entries on 41 nodes and Example 2 has 710 on 101."""
        self.assertEqual(primary_length(self.prob1, 41), 207)
        self.assertEqual(primary_length(self.prob2, 101), 710)

    def test_pack_and_unpack_agree(self):
        """A packed state unpacks to the same nodal arrays."""
        grid = make_grid(41, 0.0, 2.0)
        state = state_from_reference(self.ref1, grid)
        again = PrimaryState.from_flat(self.prob1, state.pack(self.prob1), self.spec1)
        np.testing.assert_array_equal(again.x, state.x)
        np.testing.assert_array_equal(again.lam, state.lam)
        np.testing.assert_array_equal(again.u, state.u)
        np.testing.assert_array_equal(again.pi, state.pi)
        with self.assertRaises(ShapeError):
            PrimaryState.from_flat(self.prob1, np.zeros(206), self.spec1)

    def test_initial_functional(self):
        """Holding x0 with zero costates and controls gives Jbar = 4 for Example 1."""
        N = 41
        flat = pack_primary(self.prob1, np.ones((2, N)), np.zeros((2, N)), np.zeros((1, N)), 2.0, np.zeros(2))
        system = PrimarySystem(self.prob1, Gains.build(5, 2), self.w1, self.spec1)
        self.assertAlmostEqual(system.lyapunov(flat), 4.0, delta=2e-3)

    def test_reference_is_stationary(self):
        """At the Example 1 optimum z and the whole right-hand side vanish."""
        grid = make_grid(41, 0.0, 2.0)
        state = state_from_reference(self.ref1, grid)
        z = z_vector(self.prob1, state, grid)
        self.assertEqual(z.shape, (5, 41))
        np.testing.assert_allclose(z, 0.0, atol=1e-9)
        rhs = rhs_primary(state, self.prob1, Gains.build(5, 2), self.w1, self.spec1)
        np.testing.assert_allclose(rhs, 0.0, atol=1e-9)
        with self.assertRaises(ModeError):
            h_scalar(self.prob1, state, self.w1, grid)

    def test_cycloid_terminal_scalar_vanishes(self):
        """At the cycloid the terminal-time scalar h is zero to discretization accuracy."""
        grid = self.ref2.grid(401)
        state = state_from_reference(self.ref2, grid)
        self.assertLess(abs(h_scalar(self.prob2, state, self.w2, grid)), 1e-6)

    def test_z_of_constant_states(self):
        """Holding x at (1, 1) with zero costates and control gives z = ((0, 1), (0, 0), 0)."""
        N = 41
        grid = make_grid(N, 0.0, 2.0)
        state = PrimaryState(x=np.ones((2, N)), lam=np.zeros((2, N)), u=np.zeros((1, N)), tf=2.0, pi=np.zeros(2))
        z = z_vector(self.prob1, state, grid)
        expected = np.array([0.0, 1.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(z[:, 1:-1], np.repeat(expected[:, None], N - 2, axis=1), atol=1e-12)

    def test_z_of_consistent_states(self):
        """States that follow u = 0 with zero costates leave every residual bracket at zero."""
        N = 41
        grid = make_grid(N, 0.0, 2.0)
        x = np.stack([1.0 + grid.t, np.ones(N)])
        state = PrimaryState(x=x, lam=np.zeros((2, N)), u=np.zeros((1, N)), tf=2.0, pi=np.zeros(2))
        np.testing.assert_allclose(z_vector(self.prob1, state, grid), 0.0, atol=1e-10)

    def test_euler_step_descends(self):
        """One Euler step of size 1e-3 from a perturbed optimum lowers Jbar."""
        grid = make_grid(41, 0.0, 2.0)
        base = state_from_reference(self.ref1, grid)
        rng = np.random.default_rng(3)
        bumps = np.array([np.sin(k * np.pi * grid.s) for k in (1, 2, 3)])
        x = base.x + 0.05 * rng.standard_normal((2, 3)) @ bumps
        lam = base.lam + 0.05 * rng.standard_normal((2, 3)) @ bumps
        u = base.u + 0.05 * rng.standard_normal((1, 3)) @ bumps
        system = PrimarySystem(self.prob1, Gains.build(5, 2), self.w1, self.spec1)
        flat = pack_primary(self.prob1, x, lam, u, 2.0, base.pi)
        before = system.lyapunov(flat)
        after = system.lyapunov(flat + 1e-3 * system.rhs(flat))
        self.assertGreater(before, 0.0)
        self.assertLess(after, before)

    def test_terminal_scalar_sign_matches_finite_differences(self):
        """On a stretched or squeezed cycloid, h has the sign of dJbar/dtf with frozen nodes."""
        N = 101
        spec = GridSpec(N=N, t0=0.0, tf=1.0)
        shape = self.ref2.trajectory(self.ref2.grid(N))
        gains = Gains.build(7, 2, k_tf=0.5)
        system = PrimarySystem(self.prob2, gains, self.w2, spec)
        for scale in (0.9, 1.1):
            tf = scale * self.ref2.tf_hat
            state = PrimaryState(x=shape.x, lam=shape.lam, u=shape.u, tf=tf, pi=np.array(self.ref2.pi_hat))
            h = h_scalar(self.prob2, state, self.w2, make_grid(N, 0.0, tf))
            eps = 1e-6
            plus = pack_primary(self.prob2, shape.x, shape.lam, shape.u, tf + eps, self.ref2.pi_hat)
            minus = pack_primary(self.prob2, shape.x, shape.lam, shape.u, tf - eps, self.ref2.pi_hat)
            slope = (system.lyapunov(plus) - system.lyapunov(minus)) / (2 * eps)
            self.assertEqual(np.sign(h), np.sign(slope), scale)
            self.assertEqual(np.sign(h), np.sign(scale - 1.0))
            rhs = system.rhs(state.pack(self.prob2))
            self.assertAlmostEqual(rhs[N * 7], -0.5 * h, places=12)

    def test_terminal_control_row(self):
        """The last control row is -K (z_u + u_t dtf/dtau) unless nodes drift with the horizon."""
        N = 101
        spec = GridSpec(N=N, t0=0.0, tf=1.0)
        shape = self.ref2.trajectory(self.ref2.grid(N))
        tf = 1.1 * self.ref2.tf_hat
        state = PrimaryState(x=shape.x, lam=shape.lam, u=shape.u + 0.05, tf=tf, pi=np.array(self.ref2.pi_hat))
        gains = Gains.build(7, 2, K=0.2, k_tf=0.5)
        grid = make_grid(N, 0.0, tf)
        ev = PrimaryEval(self.prob2, state, grid)
        tf_dot = -0.5 * ev.h(self.w2)
        u_t = ev.u_t[0, -1]
        last = N * 7 - 1
        frozen = rhs_primary(state, self.prob2, gains, self.w2, spec)
        drifting = rhs_primary(state, self.prob2, gains, self.w2, spec, moving_horizon=True)
        self.assertAlmostEqual(frozen[N * 7], tf_dot, places=12)
        self.assertAlmostEqual(frozen[last] - drifting[last], -0.2 * u_t * tf_dot - u_t * tf_dot, places=9)
        interior = slice(7, 7 * (N - 1))
        self.assertGreater(np.max(np.abs(drifting[interior] - frozen[interior])), 0.0)

    def test_gain_shape_checked(self):
        """The primary gain must be (2n + m) x (2n + m)."""
        with self.assertRaises(ShapeError):
            PrimarySystem(self.prob1, Gains.build(1, 2), self.w1, self.spec1)

    def test_first_row_pulls_toward_x0(self):
        """The first node's states move toward x0 at rate K."""
        N = 41
        x = np.ones((2, N))
        x[:, 0] = [1.5, 0.5]
        flat = pack_primary(self.prob1, x, np.zeros((2, N)), np.zeros((1, N)), 2.0, np.zeros(2))
        rhs = PrimarySystem(self.prob1, Gains.build(5, 2, K=2.0), self.w1, self.spec1).rhs(flat)
        np.testing.assert_allclose(rhs[:2], [-1.0, 1.0], atol=1e-12)


if __name__ == '__main__':
    unittest.main()
