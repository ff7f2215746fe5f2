#!/usr/bin/env python3
"""
Unit tests for artifact store classes.
"""

import json
import os
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np

from artifact_store import (
    MANIFEST_NAME,
    ArtifactStore,
    DiskArtifactStore,
    format_cell,
    render_csv,
    render_json,
    sha256_digest,
)


def entries(store):
    return {entry["name"]: entry for entry in store.listing()}


class TestRendering(unittest.TestCase):
    """Test cases for deterministic CSV and JSON rendering."""

    def test_format_cell(self):
        """Test cell formatting of common value types."""
        self.assertEqual(format_cell(None), "")
        self.assertEqual(format_cell(True), "true")
        self.assertEqual(format_cell(np.bool_(False)), "false")
        self.assertEqual(format_cell(np.int64(7)), "7")
        self.assertEqual(format_cell(0.1), "0.1")
        self.assertEqual(format_cell(np.float64(1e-20)), "1e-20")
        self.assertEqual(format_cell(float("inf")), "inf")
        self.assertEqual(format_cell("bump"), "bump")

    def test_render_csv(self):
        """Test CSV rendering uses newline line endings."""
        payload = render_csv(["r", "k0"], [[0.5, 1.25], [1.0, 0.0]])
        self.assertEqual(payload, b"r,k0\n0.5,1.25\n1.0,0.0\n")

    def test_render_csv_row_length(self):
        """Test rows must match the header."""
        with self.assertRaises(ValueError):
            render_csv(["a", "b"], [[1]])

    def test_render_json(self):
        """Test JSON rendering sorts keys and converts numpy values."""
        payload = render_json({"b": np.float64(0.5), "a": np.arange(2), "c": Path("x")})
        self.assertTrue(payload.endswith(b"\n"))
        self.assertEqual(json.loads(payload), {"a": [0, 1], "b": 0.5, "c": "x"})
        self.assertLess(payload.index(b'"a"'), payload.index(b'"b"'))

    def test_render_json_rejects_objects(self):
        """Test unknown objects are not serialized silently."""
        with self.assertRaises(TypeError):
            render_json({"a": object()})


class TestArtifactStore(unittest.TestCase):
    """Test cases for ArtifactStore base class."""

    def setUp(self):
        """Set up test fixtures."""
        self.store = ArtifactStore()

    def test_add_artifact(self):
        """Test adding an artifact records its digest and size."""
        digest = self.store.add_artifact("moments.csv", b"n,value\n")

        artifact = entries(self.store)["moments.csv"]
        self.assertEqual(artifact["kind"], "csv")
        self.assertEqual(artifact["bytes"], 8)
        self.assertEqual(artifact["sha256"], digest)
        self.assertEqual(digest, sha256_digest(b"n,value\n"))

    def test_add_table_and_json(self):
        """Test table and JSON helpers set the artifact kind."""
        self.store.add_table("tail.csv", ["x"], [[1.0]])
        self.store.add_json("tail.json", {"rows": 1})

        self.assertEqual(entries(self.store)["tail.csv"]["kind"], "csv")
        self.assertEqual(entries(self.store)["tail.json"]["kind"], "json")

    def test_exists(self):
        """Test existence checks and replacement by name."""
        self.assertFalse(self.store.exists("a.csv"))
        self.store.add_artifact("a.csv", b"1\n")
        self.store.add_artifact("a.csv", b"22\n")
        self.assertTrue(self.store.exists("a.csv"))
        self.assertEqual(len(self.store.listing()), 1)
        self.assertEqual(entries(self.store)["a.csv"]["bytes"], 3)

    def test_write_manifest(self):
        """Test the manifest lists outputs sorted by name."""
        self.store.add_artifact("b.csv", b"2\n")
        self.store.add_artifact("a.csv", b"1\n")

        manifest = self.store.write_manifest({"tool": "gmc-lab"})

        self.assertEqual([entry["name"] for entry in manifest["outputs"]], ["a.csv", "b.csv"])
        self.assertEqual(manifest["tool"], "gmc-lab")
        self.assertIs(self.store.manifest, manifest)
        self.assertFalse(self.store.exists(MANIFEST_NAME))


class TestDiskArtifactStore(unittest.TestCase):
    """Test cases for DiskArtifactStore class."""

    def setUp(self):
        """Set up a temporary output directory."""
        self.tmp = tempfile.TemporaryDirectory()
        self.out_dir = Path(self.tmp.name) / "run"
        self.store = DiskArtifactStore(self.out_dir)

    def tearDown(self):
        """Remove the temporary directory."""
        self.tmp.cleanup()

    def test_initialization(self):
        """Test the output directory is created."""
        self.assertTrue(self.out_dir.is_dir())
        self.assertEqual(self.store.path_for("a.csv"), self.out_dir / "a.csv")

    def test_add_artifact_writes_file(self):
        """Test artifacts are written, including nested names."""
        self.store.add_artifact("snapshots/field_000.bin", b"\x00\x01", kind="snapshot")

        path = self.out_dir / "snapshots" / "field_000.bin"
        self.assertEqual(path.read_bytes(), b"\x00\x01")
        self.assertEqual(entries(self.store)["snapshots/field_000.bin"]["kind"], "snapshot")

    def test_no_temporary_files_left(self):
        """Test atomic writes leave only the final file."""
        self.store.add_table("kernel.csv", ["r"], [[0.0]])
        self.assertEqual(os.listdir(self.out_dir), ["kernel.csv"])

    def test_failed_write_keeps_previous_file(self):
        """Test a failing replace keeps the old content and cleans up."""
        self.store.add_artifact("a.csv", b"old\n")
        with patch("artifact_store.os.replace", side_effect=OSError("disk full")):
            with self.assertRaises(OSError):
                self.store.add_artifact("a.csv", b"new\n")

        self.assertEqual((self.out_dir / "a.csv").read_bytes(), b"old\n")
        self.assertEqual(os.listdir(self.out_dir), ["a.csv"])
        self.assertEqual(entries(self.store)["a.csv"]["bytes"], 4)

    def test_write_manifest(self):
        """Test the manifest file lists every output with its digest."""
        digest = self.store.add_artifact("a.csv", b"x\n")

        self.store.write_manifest({"subcommand": "kernel-table"})

        manifest = json.loads((self.out_dir / MANIFEST_NAME).read_text())
        self.assertEqual(manifest["subcommand"], "kernel-table")
        self.assertEqual(manifest["outputs"], [
            {"name": "a.csv", "kind": "csv", "bytes": 2, "sha256": digest}
        ])

    def test_verify(self):
        """Test verification detects modified and missing files."""
        self.store.add_artifact("a.csv", b"x\n")
        self.store.add_artifact("b.csv", b"y\n")
        self.assertEqual(self.store.verify(), [])

        (self.out_dir / "a.csv").write_bytes(b"changed\n")
        (self.out_dir / "b.csv").unlink()
        self.assertEqual(self.store.verify(), ["a.csv", "b.csv"])


if __name__ == "__main__":
    unittest.main(verbosity=2)
