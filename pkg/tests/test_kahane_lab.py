#!/usr/bin/env python3
"""
Unit tests for the finite-dimensional comparison checks.
"""

import math
import unittest

import numpy as np

from errors import PreconditionError, SpecError
from kahane_lab import (
    GaussianVectorSpec,
    InterpolationPath,
    ProductFunctionalSpec,
    check_convex_order,
    check_derivative_consistency,
    check_kahane_variant,
    check_noise_chain,
    derivative_formula,
    finite_difference_derivative,
    grid_points,
    interpolated_expectation,
    q_functional,
)
from seed_schedule import RngStream


def _exponential_spec(points, scale=1.0, label="x"):
    return GaussianVectorSpec.from_kernel(points, lambda r: scale * np.exp(-2.0 * r), label)


class TestSpecs(unittest.TestCase):
    """Test cases for vector and functional specifications."""

    def setUp(self):
        """Set up a 2 x 2 point set."""
        self.points = grid_points(2)

    def test_grid_points(self):
        """Test cell centers of a 2 x 2 grid."""
        np.testing.assert_allclose(
            self.points, [[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]]
        )

    def test_from_kernel(self):
        """Test covariance from a radial kernel and its factor."""
        spec = _exponential_spec(self.points)
        self.assertEqual(spec.size, 4)
        np.testing.assert_allclose(spec.variances, np.ones(4))
        self.assertAlmostEqual(spec.covariance[0, 1], math.exp(-1.0))
        np.testing.assert_allclose(spec.factor @ spec.factor.T, spec.covariance, atol=1e-12)

    def test_invalid_covariances(self):
        """Test size, symmetry and PSD checks."""
        with self.assertRaises(SpecError):
            GaussianVectorSpec(grid_points(9), np.eye(81))
        with self.assertRaises(SpecError):
            GaussianVectorSpec(self.points, np.eye(3))
        asymmetric = np.eye(4)
        asymmetric[0, 1] = 0.5
        with self.assertRaises(SpecError):
            GaussianVectorSpec(self.points, asymmetric)
        with self.assertRaises(SpecError):
            GaussianVectorSpec(self.points, -np.eye(4))

    def test_functional_validation(self):
        """Test empty, mismatched and negative-weight functionals are rejected."""
        with self.assertRaises(SpecError):
            ProductFunctionalSpec(())
        with self.assertRaises(SpecError):
            ProductFunctionalSpec.build([(1, 1, [1, 1]), (1, 1, [1, 1, 1])])
        with self.assertRaises(SpecError):
            ProductFunctionalSpec.build([(1, 1, [1, -1])])
        with self.assertRaises(SpecError):
            q_functional(1.0, 1.0, [1.0])

    def test_balanced_ratio_coefficients(self):
        """Test the coefficient matrix and variant constant of Q."""
        func = q_functional(1.0, 1.5, [0.25] * 4)
        np.testing.assert_allclose(func.exponents, [3.0, -2.0])
        np.testing.assert_allclose(func.gammas, [1.0, 1.5])
        np.testing.assert_allclose(func.coefficients(), [[6.0, -9.0], [-9.0, 13.5]])
        self.assertAlmostEqual(func.variant_constant(1.0), 37.5)
        self.assertEqual(func.variant_constant(0.0), 0.0)

    def test_interpolation_path(self):
        """Test path covariance and parameter checks."""
        x = _exponential_spec(self.points)
        y = _exponential_spec(self.points, 2.0, "y")
        path = InterpolationPath(x, y, 0.25)
        np.testing.assert_allclose(path.covariance(), 1.25 * x.covariance)
        np.testing.assert_allclose(path.difference, x.covariance)
        with self.assertRaises(SpecError):
            path.at(1.5)
        with self.assertRaises(SpecError):
            InterpolationPath(x, _exponential_spec(grid_points(3)))


class TestDerivative(unittest.TestCase):
    """Test cases for the interpolation derivative."""

    def setUp(self):
        """Set up a one-point path with an exact answer."""
        x = GaussianVectorSpec(np.zeros((1, 2)), [[0.5]], "x")
        y = GaussianVectorSpec(np.zeros((1, 2)), [[1.0]], "y")
        self.path = InterpolationPath(x, y, 0.5)
        self.square = ProductFunctionalSpec.build([(2.0, 1.0, [1.0])])
        self.rng = RngStream(99, (1,))

    def test_expectation_exact(self):
        """Test E[M^2] = e^{V} for one point with unit weight."""
        estimate = interpolated_expectation(self.path, self.square, 40000, self.rng)
        self.assertLess(abs(estimate.value - math.exp(0.75)), 5 * estimate.stderr)
        self.assertEqual(estimate.replicas, 40000)

    def test_formula_exact(self):
        """Test the formula estimate against (vy - vx) e^{V}."""
        estimate = derivative_formula(self.path, self.square, 40000, self.rng)
        exact = 0.5 * math.exp(0.75)
        self.assertLess(abs(estimate.value - exact), 5 * estimate.stderr)

    def test_finite_difference_matches_formula(self):
        """Test paired finite differences agree with the formula."""
        check = check_derivative_consistency(self.path, self.square, 20000, self.rng, sigma=5.0)
        self.assertTrue(check.passed)
        self.assertEqual(check.to_dict()["passed"], check.passed)

    def test_linear_functional_has_zero_derivative(self):
        """Test p = 1 gives an exact zero formula and a flat expectation."""
        linear = ProductFunctionalSpec.build([(1.0, 1.0, [1.0])])
        formula = derivative_formula(self.path, linear, 1000, self.rng)
        self.assertEqual((formula.value, formula.stderr, formula.replicas), (0.0, 0.0, 0))
        fd = finite_difference_derivative(self.path, linear, 20000, self.rng)
        self.assertLess(abs(fd.value), 5 * fd.stderr + 1e-12)

    def test_too_few_replicas(self):
        """Test at least two replicas are needed."""
        with self.assertRaises(SpecError):
            interpolated_expectation(self.path, self.square, 1, self.rng)

    def test_common_random_numbers(self):
        """Test the same stream gives the same estimate."""
        first = interpolated_expectation(self.path, self.square, 500, self.rng)
        second = interpolated_expectation(self.path, self.square, 500, self.rng)
        self.assertEqual(first.value, second.value)


class TestComparisons(unittest.TestCase):
    """Test cases for the variant, convex-order and noise-chain checks."""

    def setUp(self):
        """Set up vectors on a 2 x 2 grid and the balanced ratio functional."""
        self.points = grid_points(2)
        self.x = _exponential_spec(self.points)
        self.func = q_functional(1.0, 1.5, [0.25] * 4)
        self.rng = RngStream(7, (2,))

    def test_variant_with_shifted_covariance(self):
        """Test a constant covariance shift satisfies both directions."""
        y = self.x.with_covariance(self.x.covariance + 0.3, "shifted")
        report = check_kahane_variant(self.x, y, self.func, 20000, self.rng, sigma=5.0)
        self.assertAlmostEqual(report.bound_a, 0.3)
        self.assertAlmostEqual(report.constant_c, 0.3 * 37.5)
        self.assertTrue(report.passed)
        self.assertAlmostEqual(report.ratio_xy * report.ratio_yx, 1.0)

    def test_variant_with_common_gaussian(self):
        """Test Y = X + a unit common Gaussian under M^2 with gamma = 1 gives C = 2."""
        y = self.x.with_covariance(self.x.covariance + 1.0, "common")
        square = ProductFunctionalSpec.build([(2.0, 1.0, [0.25] * 4)])
        report = check_kahane_variant(self.x, y, square, 100000, self.rng)

        self.assertAlmostEqual(report.bound_a, 1.0)
        self.assertAlmostEqual(report.constant_c, 2.0)
        self.assertAlmostEqual(report.to_dict()["bound_factor"], math.exp(2.0))
        self.assertTrue(report.holds_xy)
        self.assertTrue(report.holds_yx)

    def test_variant_bound_too_small(self):
        """Test a supplied A below the covariance gap is rejected."""
        y = self.x.with_covariance(self.x.covariance + 0.3, "shifted")
        with self.assertRaises(PreconditionError):
            check_kahane_variant(self.x, y, self.func, 100, self.rng, bound_a=0.1)

    def test_convex_order(self):
        """Test E[F(Q_X)] <= E[F(Q_Y)] when Cov_Y - Cov_X is PSD."""
        y = self.x.with_covariance(self.x.covariance + 0.5 * np.eye(4), "larger")
        report = check_convex_order(self.x, y, self.func, 20000, self.rng, sigma=5.0)
        self.assertEqual([row["function"] for row in report.rows],
                         ["identity", "call_at_median", "exponential"])
        self.assertTrue(report.passed)
        self.assertFalse(report.boundary_case)
        self.assertAlmostEqual(report.min_difference_eigenvalue, 0.5)

    def test_convex_order_boundary(self):
        """Test equal covariances are flagged as the boundary case."""
        report = check_convex_order(self.x, self.x, self.func, 1000, self.rng)
        self.assertTrue(report.boundary_case)
        self.assertTrue(report.passed)
        for row in report.rows:
            self.assertEqual(row["difference"]["value"], 0.0)

    def test_convex_order_requires_psd_difference(self):
        """Test a non-PSD covariance difference is rejected."""
        y = self.x.with_covariance(0.5 * self.x.covariance, "smaller")
        with self.assertRaises(PreconditionError):
            check_convex_order(self.x, y, self.func, 100, self.rng)

    def test_noise_chain(self):
        """Test E[Q] is non-decreasing in the added noise size."""
        report = check_noise_chain(
            self.x, self.x.covariance, self.func, [0.25, 0.5, 1.0], 20000, self.rng, sigma=5.0
        )
        self.assertEqual(report.variances, [0.25, 0.5, 1.0])
        self.assertEqual(len(report.step_differences), 2)
        self.assertTrue(report.passed)

    def test_noise_chain_requires_increasing_sizes(self):
        """Test decreasing or nonpositive noise sizes are rejected."""
        with self.assertRaises(SpecError):
            check_noise_chain(self.x, self.x.covariance, self.func, [0.5, 0.25], 100, self.rng)
        with self.assertRaises(SpecError):
            check_noise_chain(self.x, self.x.covariance, self.func, [0.0, 1.0], 100, self.rng)


if __name__ == "__main__":
    unittest.main()
