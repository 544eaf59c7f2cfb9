import unittest
import os
import sys

import numpy as np

# Add the parent directory to the path so we can import the modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from compact_form import (
    CompactSystem,
    build_cache,
    compact_jbar,
    compact_length,
    n_pi,
    n_tf,
    n_u,
    pack_compact,
    rhs_compact,
    unpack_compact,
)
from evolve import COMPACT, gradient_audit, initial_state
from ocp_model import Gains, Weights
from problems import example1, example2
from solver_errors import ModeError, ShapeError
from tests.test_propagate import tracking_problem
from time_grid import GridSpec


class TestCompactForm(unittest.TestCase):
    """Test cases for the compact evolution equations."""

    def setUp(self):
        self.prob1, _ = example1()
        self.prob2, _ = example2()
        self.w1 = Weights.for_problem(self.prob1)
        self.w2 = Weights.for_problem(self.prob2)
        self.spec1 = GridSpec(N=41, t0=0.0, tf=2.0)
        self.spec2 = GridSpec(N=101, t0=0.0, tf=1.0)

    def test_flat_lengths(self):
        """Example 1 has 43 compact entries on 41 nodes and Example 2 has 104 on 101."""
        self.assertEqual(compact_length(self.prob1, 41), 43)
        self.assertEqual(compact_length(self.prob2, 101), 104)

    def test_layout_puts_tf_then_pi_last(self):
        """The flat vector ends with tf and pi when tf evolves."""
        u = np.linspace(0.0, 1.0, 101)[None]
        flat = pack_compact(self.prob2, u, 0.9, [0.1, -0.2])
        self.assertEqual(flat[101], 0.9)
        np.testing.assert_array_equal(flat[-2:], [0.1, -0.2])
        u_back, tf, pi = unpack_compact(self.prob2, flat, self.spec2)
        np.testing.assert_array_equal(u_back, u)
        self.assertEqual(tf, 0.9)
        with self.assertRaises(ShapeError):
            unpack_compact(self.prob2, flat[:-1], self.spec2)

    def test_example1_initial_gradient(self):
        """At u = 0 the double integrator has n_u = 7 - 3t and n_pi = 0."""
        cache = build_cache(self.prob1, np.zeros((1, 41)), 2.0, np.zeros(2), self.w1, self.spec1.grid())
        np.testing.assert_allclose(n_u(cache, self.prob1, self.w1)[0], 7.0 - 3.0 * cache.grid.t, atol=1e-12)
        np.testing.assert_allclose(n_pi(cache, self.prob1, self.w1), [0.0, 0.0], atol=1e-15)
        with self.assertRaises(ModeError):
            n_tf(cache, self.prob1, self.w1)

    def test_example1_initial_functional(self):
        """At u = 0 the terminal miss (3, 1) gives Jbar = 10."""
        flat = pack_compact(self.prob1, np.zeros((1, 41)), 2.0, np.zeros(2))
        self.assertAlmostEqual(compact_jbar(self.prob1, flat, self.w1, self.spec1), 10.0, places=12)

    def test_example2_initial_gradient(self):
        """At u = 0 and tf = 1 the brachistochrone has n_tf = 30, n_pi = (0, -10) and n_u = -20t."""
        cache = build_cache(self.prob2, np.zeros((1, 101)), 1.0, np.zeros(2), self.w2, self.spec2.grid())
        self.assertAlmostEqual(n_tf(cache, self.prob2, self.w2), 30.0, places=9)
        np.testing.assert_allclose(n_pi(cache, self.prob2, self.w2), [0.0, -10.0], atol=1e-9)
        np.testing.assert_allclose(n_u(cache, self.prob2, self.w2)[0], -20.0 * cache.grid.t, atol=1e-9)

    def test_rhs_is_negative_scaled_gradient(self):
        """With fixed tf the control moves along -K n_u and pi along -K_pi n_pi."""
        gains = Gains.build(1, 2, K=0.5, K_pi=2.0)
        flat = pack_compact(self.prob1, np.zeros((1, 41)), 2.0, np.zeros(2))
        rhs = rhs_compact(flat, self.prob1, gains, self.w1, self.spec1)
        t = self.spec1.grid().t
        np.testing.assert_allclose(rhs[:41], -0.5 * (7.0 - 3.0 * t), atol=1e-12)
        np.testing.assert_allclose(rhs[41:], 0.0, atol=1e-15)

    def test_free_tf_rates(self):
        """With free tf the terminal-time rate is -k_tf n_tf."""
        gains = Gains.build(1, 2, K=0.1, k_tf=0.01, K_pi=0.1)
        system = CompactSystem(self.prob2, gains, self.w2, self.spec2)
        flat = pack_compact(self.prob2, np.zeros((1, 101)), 1.0, np.zeros(2))
        rhs = system.rhs(flat)
        self.assertAlmostEqual(rhs[101], -0.3, places=9)
        np.testing.assert_allclose(rhs[-2:], [0.0, 1.0], atol=1e-9)

    def test_frozen_nodes_have_no_drift(self):
        """By default a free-tf control moves along -K n_u only, even while tf moves."""
        gains = Gains.build(1, 2, K=0.1, k_tf=0.01, K_pi=0.1)
        grid = self.spec2.grid()
        u = (0.2 + 0.8 * grid.s)[None]
        pi = np.array([0.05, -0.1])
        flat = pack_compact(self.prob2, u, 1.0, pi)
        cache = build_cache(self.prob2, u, 1.0, pi, self.w2, grid)
        rhs = rhs_compact(flat, self.prob2, gains, self.w2, self.spec2)
        np.testing.assert_allclose(rhs[:101], -0.1 * n_u(cache, self.prob2, self.w2)[0], rtol=1e-13, atol=1e-15)
        tf_dot = rhs[101]
        self.assertNotEqual(tf_dot, 0.0)
        drifting = rhs_compact(flat, self.prob2, gains, self.w2, self.spec2, moving_horizon=True)
        np.testing.assert_allclose(drifting[:101] - rhs[:101], 0.8 * grid.s * tf_dot, rtol=1e-9, atol=1e-14)
        np.testing.assert_array_equal(drifting[101:], rhs[101:])
        self.assertTrue(CompactSystem(self.prob2, gains, self.w2, self.spec2, moving_horizon=True).moving_horizon)

    def test_free_terminal_state_gradients(self):
        """With free tf and no terminal constraint n_u and n_tf match finite differences."""
        prob = tracking_problem()
        spec = GridSpec(N=101, t0=0.0, tf=1.0)
        grid = spec.grid()
        state = initial_state(prob, COMPACT, spec, Gains.build(1, 0), Weights.for_problem(prob),
                              u0=(0.3 - 0.5 * grid.s)[None])
        report = gradient_audit(prob, state)
        self.assertEqual(set(report.blocks), {"n_u", "n_tf"})
        self.assertTrue(report.passed(1e-3), report.blocks)

    def test_free_terminal_state_layout(self):
        """The free-terminal-state layout is the nodal controls then tf, with no multipliers."""
        prob = tracking_problem()
        spec = GridSpec(N=21, t0=0.0, tf=1.0)
        w = Weights.for_problem(prob)
        self.assertEqual(compact_length(prob, 21), 22)
        flat = pack_compact(prob, np.zeros((1, 21)), 1.0, np.zeros(0))
        rhs = rhs_compact(flat, prob, Gains.build(1, 0, k_tf=0.5), w, spec)
        self.assertEqual(rhs.shape, (22,))
        cache = build_cache(prob, np.zeros((1, 21)), 1.0, np.zeros(0), w, spec.grid())
        np.testing.assert_allclose(rhs[:21], -n_u(cache, prob, w)[0], rtol=1e-13, atol=1e-15)
        self.assertAlmostEqual(rhs[21], -0.5 * n_tf(cache, prob, w), places=12)
        with self.assertRaises(ModeError):
            n_pi(cache, prob, w)

    def test_system_reuses_cache(self):
        """Repeated evaluation of the same state reuses its cache."""
        system = CompactSystem(self.prob1, Gains.build(1, 2), self.w1, self.spec1)
        flat = pack_compact(self.prob1, np.zeros((1, 41)), 2.0, np.zeros(2))
        self.assertIs(system.cache(flat), system.cache(flat.copy()))
        self.assertEqual(len(system), 43)
        self.assertAlmostEqual(system.lyapunov(flat), 10.0, places=12)
        tf, pi = system.terminal(flat)
        self.assertEqual(tf, 2.0)

    def test_gain_shape_checked(self):
        """The compact gain must be m x m."""
        with self.assertRaises(ShapeError):
            CompactSystem(self.prob1, Gains.build(5, 2), self.w1, self.spec1)


if __name__ == '__main__':
    unittest.main()
