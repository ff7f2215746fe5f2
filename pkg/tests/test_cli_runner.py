#!/usr/bin/env python3
"""
Tests for the command-line runner: exit codes, environment handling and
reproducible outputs.
"""

import csv
import io
import json
import os
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from artifact_store import MANIFEST_NAME, ArtifactStore
from cli_runner import (
    EXIT_ASSERTION,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_PRECONDITION,
    build_parser,
    collect_overrides,
    main,
    resolve_out_dir,
    resolve_workers,
    run,
)
from errors import (
    ConfigError,
    DivergenceError,
    ExperimentError,
    GmcLabError,
    PreconditionError,
)
from experiments import ExperimentHandler

FAST_KERNEL = ["--set", "kernel.table_resolution=1024"]


def fake_result(passed):
    return {
        "status": "success",
        "type": "kernel-table",
        "tables": [{"name": "fake", "header": ["x"], "rows": [[1.0]]}],
        "checks": [{"name": "fake_check", "passed": passed, "detail": ""}],
        "metadata": {},
        "artifacts": [],
    }


class TestArguments(unittest.TestCase):
    """Test cases for argument parsing and overrides."""

    def test_flags_override_assignments(self):
        """Test flags win over --set for the same key."""
        args = build_parser().parse_args(
            ["moments", "--set", "seed=5", "--set", "field.n=64", "--seed", "9", "--alpha", "0.5"]
        )
        self.assertEqual(
            collect_overrides(args), {"seed": 9, "field.n": 64, "gmc.alpha": 0.5}
        )

    def test_every_subcommand_parses(self):
        """Test each subcommand is accepted by the parser."""
        parser = build_parser()
        for name in ExperimentHandler.subcommands():
            self.assertEqual(parser.parse_args([name]).subcommand, name)

    def test_unknown_subcommand_rejected(self):
        """Test argparse rejects unknown subcommands."""
        with patch("sys.stderr", new_callable=io.StringIO):
            with self.assertRaises(SystemExit):
                build_parser().parse_args(["server"])


class TestEnvironment(unittest.TestCase):
    """Test cases for environment-driven settings."""

    def test_workers_precedence(self):
        """Test flag, then GMC_WORKERS, then the config value."""
        with patch.dict("os.environ", {"GMC_WORKERS": "3"}):
            self.assertEqual(resolve_workers(2, 1), 2)
            self.assertEqual(resolve_workers(None, 1), 3)
        with patch.dict("os.environ", {"GMC_WORKERS": ""}):
            self.assertEqual(resolve_workers(None, 4), 4)

    def test_invalid_workers(self):
        """Test non-integer and nonpositive worker counts."""
        with patch.dict("os.environ", {"GMC_WORKERS": "many"}):
            with self.assertRaises(ConfigError):
                resolve_workers(None, 1)
        with self.assertRaises(ConfigError):
            resolve_workers(0, 1)

    def test_out_dir_precedence(self):
        """Test --out-dir, then GMC_OUT_DIR, then ./runs."""
        with patch.dict("os.environ", {"GMC_OUT_DIR": "/tmp/gmc-env"}):
            self.assertEqual(resolve_out_dir("mine"), Path("mine"))
            self.assertEqual(resolve_out_dir(None), Path("/tmp/gmc-env"))
        with patch.dict("os.environ", {"GMC_OUT_DIR": ""}):
            self.assertEqual(resolve_out_dir(None), Path("runs"))


class TestRun(unittest.TestCase):
    """Test cases for run()."""

    def test_validate_samples_nothing(self):
        """Test validate returns the report without a store."""
        with patch.object(ExperimentHandler, "handle") as handle:
            status, result = run("validate")
        self.assertEqual(status, EXIT_OK)
        self.assertEqual(result["metadata"]["grid_n"], 256)
        handle.assert_not_called()

    def test_in_memory_store(self):
        """Test tables, sidecars, report and manifest go to the store."""
        store = ArtifactStore()
        status, result = run(
            "kernel-table", overrides={"kernel.table_resolution": 1024}, store=store
        )

        self.assertEqual(status, EXIT_OK)
        self.assertEqual(
            [entry["name"] for entry in store.listing()],
            ["kernel-table_report.json", "kernel_table.csv", "kernel_table.json"],
        )
        self.assertEqual(store.manifest["subcommand"], "kernel-table")
        self.assertEqual(store.manifest["checks_failed"], [])
        self.assertEqual(store.manifest["seed_schedule"]["bit_generator"], "PCG64")
        self.assertEqual(len(store.manifest["outputs"]), 3)

    def test_assert_flag(self):
        """Test failed checks only change the status under --assert."""
        with patch.object(ExperimentHandler, "handle", return_value=fake_result(False)):
            status, _ = run("kernel-table", store=ArtifactStore())
            self.assertEqual(status, EXIT_OK)
            status, _ = run("kernel-table", store=ArtifactStore(), assert_checks=True)
            self.assertEqual(status, EXIT_ASSERTION)
        with patch.object(ExperimentHandler, "handle", return_value=fake_result(True)):
            status, _ = run("kernel-table", store=ArtifactStore(), assert_checks=True)
            self.assertEqual(status, EXIT_OK)

    def test_handler_error_result(self):
        """Test an error result from the handler is raised as a config error."""
        error = {"status": "error", "error": "config", "message": "Unknown subcommand: nope"}
        with patch.object(ExperimentHandler, "handle", return_value=error):
            with self.assertRaises(ConfigError):
                run("kernel-table", store=ArtifactStore())

    def test_duplicate_output_names(self):
        """Test two tables with one name are refused before anything is written."""
        result = fake_result(True)
        result["tables"].append(dict(result["tables"][0]))
        store = ArtifactStore()
        with patch.object(ExperimentHandler, "handle", return_value=result):
            with self.assertRaises(ExperimentError):
                run("kernel-table", store=store)
        self.assertEqual(store.listing(), [])

    def test_disk_outputs_verified(self):
        """Test a digest mismatch on disk fails the run before the manifest."""
        with tempfile.TemporaryDirectory() as tmp:
            with patch.object(ExperimentHandler, "handle", return_value=fake_result(True)):
                with patch("cli_runner.DiskArtifactStore.verify", return_value=["fake.csv"]):
                    with self.assertRaises(GmcLabError):
                        run("kernel-table", out_dir=Path(tmp))
            self.assertFalse((Path(tmp) / MANIFEST_NAME).exists())
            self.assertTrue((Path(tmp) / "fake.csv").exists())

    def test_handler_precondition_result(self):
        """Test a precondition error result keeps its class."""
        error = {"status": "error", "error": "precondition", "message": "t < ln es"}
        with patch.object(ExperimentHandler, "handle", return_value=error):
            with self.assertRaises(PreconditionError):
                run("kernel-table", store=ArtifactStore())


@patch("cli_runner.load_dotenv")
class TestMain(unittest.TestCase):
    """Test cases for main() and its exit codes."""

    def setUp(self):
        """Set up a temporary output directory."""
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        """Remove the temporary directory."""
        self.tmp.cleanup()

    def _main(self, *argv):
        with patch.dict("os.environ", {"GMC_WORKERS": ""}):
            return main(list(argv))

    def test_invalid_parameters_exit_2(self, _dotenv):
        """Test out-of-range and equal parameters exit with status 2."""
        self.assertEqual(self._main("moments", "--alpha", "2.5"), EXIT_CONFIG)
        self.assertEqual(self._main("moments", "--alpha", "1.5", "--gamma", "1.5"), EXIT_CONFIG)
        self.assertEqual(self._main("validate", "--set", "gmc.alpha=2.5"), EXIT_CONFIG)

    def test_missing_config_exit_2(self, _dotenv):
        """Test a missing config file exits with status 2."""
        missing = str(self.root / "missing.json")
        self.assertEqual(self._main("validate", "--config", missing), EXIT_CONFIG)

    def test_precondition_exit_3(self, _dotenv):
        """Test numerical failures exit with status 3."""
        out = str(self.root / "run")
        for error in (DivergenceError("K0 diverges"), GmcLabError("other failure")):
            with patch.object(ExperimentHandler, "handle", side_effect=error):
                self.assertEqual(self._main("kernel-table", "--out-dir", out), EXIT_PRECONDITION)

    def test_precondition_result_exit_3(self, _dotenv):
        """Test a cascade run below t = ln es exits with status 3, not 2."""
        out = str(self.root / "run")
        # bypass the config-level cascade check so the handler reports the failure
        with patch("cli_runner.validate_config", return_value={}):
            status = self._main("cascade", "--out-dir", out, "--t", "0.5", *FAST_KERNEL)
        self.assertEqual(status, EXIT_PRECONDITION)

    def test_unresolved_small_ball_grid_exit_2(self, _dotenv):
        """Test a small-ball grid too coarse for its t grid exits with status 2."""
        status = self._main("validate", "--set", "experiment.small_ball_n=16")
        self.assertEqual(status, EXIT_CONFIG)

    def test_validate_prints_report(self, _dotenv):
        """Test validate prints the JSON report and exits 0."""
        with patch("sys.stdout", new_callable=io.StringIO) as stdout:
            status = self._main("validate", "--t", "1.5")
        self.assertEqual(status, EXIT_OK)
        report = json.loads(stdout.getvalue())
        self.assertEqual(report["status"], "success")
        self.assertEqual(report["t_max"], 3.0)

    def test_assert_exit_1(self, _dotenv):
        """Test --assert with a failing check exits with status 1."""
        out = str(self.root / "run")
        with patch.object(ExperimentHandler, "handle", return_value=fake_result(False)):
            self.assertEqual(self._main("kernel-table", "--out-dir", out, "--assert"), EXIT_ASSERTION)
        manifest = json.loads((self.root / "run" / MANIFEST_NAME).read_text())
        self.assertEqual(manifest["checks_failed"], ["fake_check"])

    def test_kernel_table_files(self, _dotenv):
        """Test the kernel table CSV, sidecar and manifest on disk."""
        out = self.root / "run"
        self.assertEqual(self._main("kernel-table", "--out-dir", str(out), *FAST_KERNEL), EXIT_OK)

        with open(out / "kernel_table.csv", newline="", encoding="utf-8") as stream:
            rows = list(csv.reader(stream))
        self.assertEqual(rows[0][:4], ["r", "rho", "k0", "g0"])
        self.assertEqual(len(rows), 202)
        self.assertEqual(rows[1][2], "inf")
        self.assertEqual(rows[101][0], "1.0")
        self.assertEqual(rows[101][2], "0.0")

        sidecar = json.loads((out / "kernel_table.json").read_text())
        self.assertEqual(sidecar["rows"], 201)
        report = json.loads((out / "kernel-table_report.json").read_text())
        self.assertTrue(report["passed"])
        manifest = json.loads((out / MANIFEST_NAME).read_text())
        self.assertEqual(manifest["config"]["kernel"]["table_resolution"], 1024)

    def test_reproducible_outputs(self, _dotenv):
        """Test two runs give byte-identical CSVs, and a manifest re-runs the same config."""
        first, second, third = self.root / "a", self.root / "b", self.root / "c"
        self.assertEqual(self._main("kernel-table", "--out-dir", str(first), *FAST_KERNEL), EXIT_OK)
        self.assertEqual(self._main("kernel-table", "--out-dir", str(second), *FAST_KERNEL), EXIT_OK)
        self.assertEqual(
            self._main("kernel-table", "--out-dir", str(third),
                       "--config", str(first / MANIFEST_NAME)),
            EXIT_OK,
        )

        csv_bytes = [(path / "kernel_table.csv").read_bytes() for path in (first, second, third)]
        self.assertEqual(csv_bytes[0], csv_bytes[1])
        self.assertEqual(csv_bytes[0], csv_bytes[2])

        manifests = [json.loads((path / MANIFEST_NAME).read_text()) for path in (first, second, third)]
        self.assertEqual(len({manifest["config_digest"] for manifest in manifests}), 1)
        digests = [
            {entry["name"]: entry["sha256"] for entry in manifest["outputs"]}["kernel_table.csv"]
            for manifest in manifests
        ]
        self.assertEqual(len(set(digests)), 1)

    def test_out_dir_from_environment(self, _dotenv):
        """Test GMC_OUT_DIR is used when --out-dir is absent."""
        target = self.root / "from-env"
        with patch.dict("os.environ", {"GMC_OUT_DIR": str(target), "GMC_WORKERS": ""}):
            with patch.object(ExperimentHandler, "handle", return_value=fake_result(True)):
                self.assertEqual(main(["kernel-table"]), EXIT_OK)
        self.assertTrue((target / "fake.csv").exists())
        self.assertTrue(os.path.exists(target / MANIFEST_NAME))


if __name__ == "__main__":
    unittest.main()
