#!/usr/bin/env python3
"""
Unit tests for the ExperimentHandler class.
"""

import math
import unittest

import numpy as np

from config import ExperimentConfig
from experiments import ExperimentHandler, direct_balanced_ratio
from field_sampler import FieldSample, GridSpec, decode_snapshot
from gmc_core import GmcParams, balanced_ratio
from seed_schedule import SeedScheduler

SMALL_CONFIG = {
    "seed": 7,
    "kernel": {"table_resolution": 1024},
    "field": {"n": 16, "t": 1.0},
    "experiment": {
        "replicas": 100,
        "t_grid": [0.5, 1.0],
        "kernel_layers": [[0.0, 0.5], [0.5, 1.0]],
        "small_ball_n": 16,
        "small_ball_t_grid": [0.0, 0.5, 1.0],
        "grad_s_grid": [0.5, 1.0],
        "grad_m_grid": [1, 2],
        "kahane_side_points": 2,
        "kahane_replicas": 2000,
        "s_grid": [0.0, 0.5],
        "scaling_width": 0.5,
        "mu_grid": [0.0, 0.5, 1.0, 2.0, 4.0],
        "tail_quantiles": [0.5, 0.9],
        "snapshots": 2,
        "subadditivity_pairs": 5,
    },
}


def small_handler(**overrides):
    """Handler on a 16 x 16 grid with few replicas."""
    config = ExperimentConfig.from_dict(SMALL_CONFIG).with_overrides(overrides)
    return ExperimentHandler(config, SeedScheduler(config.seed))


def checks_by_name(result):
    return {check["name"]: check for check in result["checks"]}


class TestDirectOracle(unittest.TestCase):
    """Test cases for direct_balanced_ratio."""

    def test_matches_log_domain_ratio(self):
        """Test compensated summation agrees with the log-domain ratio."""
        grid = GridSpec(8)
        values = np.random.default_rng(0).standard_normal((8, 8))
        params = GmcParams(1.0, 1.5)
        expected = balanced_ratio(FieldSample(grid, values, 0.0, 1.0), params)
        oracle = direct_balanced_ratio(values, params, grid.cell_area, 1.0)
        self.assertAlmostEqual(oracle / expected, 1.0, places=12)


class TestExperimentHandler(unittest.TestCase):
    """Test cases for ExperimentHandler."""

    @classmethod
    def setUpClass(cls):
        """Build one handler (and its rho) for the whole class."""
        cls.handler = small_handler()
        cls.rho = cls.handler.rho

    def _fresh(self, **overrides):
        handler = small_handler(**overrides)
        # reuse the class rho
        handler.__dict__["rho"] = self.rho
        return handler

    def test_subcommands(self):
        """Test every subcommand is registered."""
        self.assertEqual(
            sorted(ExperimentHandler.subcommands()),
            sorted(["kernel-table", "sample", "moments", "scaling", "tail", "laplace",
                    "small-ball", "grad-moments", "cascade", "kahane", "validate"]),
        )

    def test_unknown_subcommand(self):
        """Test handling an unknown subcommand."""
        result = self.handler.handle("unknown")
        self.assertEqual(result["status"], "error")
        self.assertIn("Unknown subcommand", result["message"])

    def test_validate(self):
        """Test the dry-run report."""
        result = self.handler.handle("validate")
        self.assertEqual(result["status"], "success")
        self.assertEqual(result["type"], "validate")
        self.assertEqual(result["metadata"]["grid_n"], 16)
        self.assertEqual(result["tables"], [])

    def test_kernel_table(self):
        """Test the kernel table and its deterministic checks."""
        result = self.handler.handle("kernel-table")

        table = result["tables"][0]
        self.assertEqual(table["name"], "kernel_table")
        self.assertEqual(table["header"], ["r", "rho", "k0", "g0", "layer_0_0.5", "layer_0.5_1"])
        self.assertEqual(len(table["rows"]), 201)
        self.assertEqual(table["rows"][0][2], math.inf)
        self.assertEqual(table["rows"][100][0], 1.0)
        self.assertEqual(table["rows"][100][2], 0.0)
        self.assertEqual(table["rows"][100][3], 0.0)
        self.assertEqual(table["rows"][0][4], 0.5)

        checks = checks_by_name(result)
        for name in ("rho_normalized", "rho_support", "k0_vanishes_at_1", "k0_g0_identity",
                     "layer_additivity_0_0.5_1", "bound_a_stable"):
            self.assertTrue(checks[name]["passed"], name)
        self.assertGreater(result["metadata"]["bound_a"], 0.0)
        self.assertEqual(result["metadata"]["bound_a_band"], 2 * result["metadata"]["bound_a"])

    def test_sample(self):
        """Test snapshots are emitted and decode to the tabulated fields."""
        result = self._fresh().handle("sample")

        self.assertEqual(len(result["tables"][0]["rows"]), 2)
        names = [artifact["name"] for artifact in result["artifacts"]]
        self.assertEqual(names, ["snapshots/field_000.bin", "snapshots/field_001.bin"])
        field = decode_snapshot(result["artifacts"][1]["payload"])
        self.assertEqual(field.grid.n, 16)
        self.assertEqual(field.scale_hi, 1.0)
        self.assertAlmostEqual(float(field.values.max()), result["tables"][0]["rows"][1][5])

    def test_moments(self):
        """Test moment rows and the pathwise checks."""
        result = self._fresh().handle("moments")

        rows = result["tables"][0]["rows"]
        self.assertEqual(len(rows), 6)
        self.assertEqual([row[1] for row in rows[:3]], [0.0, 1.0, 2.0])
        self.assertEqual(rows[0][2], 1.0)
        checks = checks_by_name(result)
        for t in ("0.5", "1"):
            self.assertTrue(checks[f"holder_bound_t={t}"]["passed"])
            self.assertTrue(checks[f"subadditivity_t={t}"]["passed"])
            self.assertTrue(checks[f"finite_samples_t={t}"]["passed"])
        self.assertIn("moment_growth_n=1_t=0.5->1", checks)

    def test_moments_deterministic(self):
        """Test the same seed reproduces the same table."""
        first = self._fresh().handle("moments")["tables"]
        second = self._fresh().handle("moments")["tables"]
        self.assertEqual(first, second)
        third = self._fresh(seed=8).handle("moments")["tables"]
        self.assertNotEqual(first, third)

    def test_scaling(self):
        """Test the scaling table reports zeta for (p, q) = (1, 0)."""
        result = self._fresh(**{"experiment.replicas": 20}).handle("scaling")
        row = result["tables"][0]["rows"][0]
        self.assertEqual(row[:2], [1.0, 0.0])
        self.assertAlmostEqual(row[6], -2.0)
        self.assertIn("scaling_slope", checks_by_name(result))
        self.assertEqual(result["metadata"]["fit"]["target"], row[6])

    def test_tail_requires_replicas(self):
        """Test a tail run below 10^4 replicas is a config error."""
        result = self._fresh().handle("tail")
        self.assertEqual(result["status"], "error")
        self.assertEqual(result["error"], ExperimentHandler.ERROR_CONFIG)
        self.assertIn("10000", result["message"])

    def test_moments_require_replicas(self):
        """Test moments below 100 replicas is a config error."""
        result = self._fresh(**{"experiment.replicas": 99}).handle("moments")
        self.assertEqual(result["status"], "error")
        self.assertEqual(result["error"], ExperimentHandler.ERROR_CONFIG)

    def test_tail_without_window(self):
        """Test two quantiles are too few for a fit window and fail the check."""
        result = self._fresh(**{"experiment.replicas": 10000}).handle("tail")

        self.assertEqual(result["status"], "success")
        self.assertEqual(len(result["tables"][0]["rows"]), 2)
        self.assertEqual(result["tables"][1]["rows"], [])
        self.assertFalse(checks_by_name(result)["tail_exponent_band"]["passed"])
        self.assertIsNone(result["metadata"]["fit"])
        self.assertEqual(result["metadata"]["target_exponent"], round(4 / 1.5, 4))

    def test_laplace(self):
        """Test one Laplace row per (t, mu) and the monotonicity check."""
        result = self._fresh().handle("laplace")
        rows = result["tables"][0]["rows"]
        self.assertEqual(len(rows), 10)
        self.assertTrue(all(row[5] is None for row in rows))
        self.assertEqual(rows[0][2], 0.0)
        self.assertIn("laplace_monotone_in_t", checks_by_name(result))

    def test_laplace_lower_bound_column(self):
        """Test the lower-bound column when a small-ball probability is given."""
        result = self._fresh(**{"experiment.small_ball_probability": 0.5}).handle("laplace")
        first = result["tables"][0]["rows"][0]
        self.assertAlmostEqual(first[5], math.log(0.5))

    def test_small_ball(self):
        """Test P = 1 at t = 0 and the pathwise ratio floor."""
        result = self._fresh().handle("small-ball")
        rows = result["tables"][0]["rows"]
        self.assertEqual(len(rows), 3)
        self.assertEqual(rows[0][1], 1.0)
        self.assertTrue(checks_by_name(result)["ratio_floor"]["passed"])

    def test_grad_moments(self):
        """Test one row per (s, m) and the optional tilted table."""
        result = self._fresh(**{"experiment.tilt_slopes": [0.0, 2.0]}).handle("grad-moments")
        self.assertEqual(len(result["tables"][0]["rows"]), 4)
        self.assertEqual(result["tables"][1]["name"], "tilted_moments")
        self.assertEqual(len(result["tables"][1]["rows"]), 2)
        self.assertIn("tilted_c_bounded", checks_by_name(result))

    def test_cascade(self):
        """Test the cascade identity, subadditivity and direct oracle."""
        result = self._fresh(**{"experiment.replicas": 10}).handle("cascade")
        checks = checks_by_name(result)
        self.assertTrue(checks["cascade_subadditivity"]["passed"])
        self.assertTrue(checks["cascade_identity"]["passed"])
        self.assertTrue(checks["cascade_direct_oracle"]["passed"])
        self.assertEqual(len(result["tables"][0]["rows"]), 10)
        self.assertAlmostEqual(result["metadata"]["s"], math.log(2))
        self.assertEqual(result["metadata"]["group_separation"], math.inf)

    def test_cascade_requires_scale(self):
        """Test the cascade below t = ln es returns a precondition error."""
        result = self._fresh(**{"field.t": 0.5}).handle("cascade")
        self.assertEqual(result["status"], "error")
        self.assertEqual(result["error"], ExperimentHandler.ERROR_PRECONDITION)
        self.assertIn("ln 2", result["message"])

    def test_kahane(self):
        """Test the comparison table lists every check."""
        result = self._fresh().handle("kahane")
        checks = checks_by_name(result)
        for name in ("derivative_balanced_layers", "derivative_square_shift",
                     "derivative_balanced_shift", "variant_square_shift",
                     "variant_balanced_layers", "convex_order", "noise_chain_monotone"):
            self.assertIn(name, checks)
        self.assertEqual(len(result["tables"][0]["rows"]), 11)
        self.assertEqual(result["metadata"]["points"], 4)
        self.assertTrue(checks["variant_square_shift"]["passed"])


if __name__ == "__main__":
    unittest.main()
