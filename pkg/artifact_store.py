#!/usr/bin/env python3
"""
Artifact registries for experiment outputs.
Supports both in-memory and on-disk storage with sha256 content digests.
"""

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def format_cell(value: Any) -> str:
    """Deterministic text form of one CSV cell (floats use repr)."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> bytes:
    """
    Render a table as CSV bytes with "\\n" line endings.

    Args:
        header: Column names
        rows: Row sequences, each as long as the header

    Returns:
        UTF-8 encoded CSV
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"Row has {len(row)} cells, header has {len(header)}")
        writer.writerow([format_cell(value) for value in row])
    return buffer.getvalue().encode("utf-8")


def _json_default(value: Any) -> Any:
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def render_json(data: Any) -> bytes:
    """Render JSON with sorted keys and a trailing newline."""
    text = json.dumps(data, indent=2, sort_keys=True, default=_json_default)
    return (text + "\n").encode("utf-8")


def sha256_digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


class ArtifactStore:
    """
    Base class for managing emitted artifacts.
    Uses an in-memory dictionary for storage.
    """

    def __init__(self):
        """Initialize the store with an empty dictionary."""
        self._artifacts: Dict[str, Dict[str, Any]] = {}
        self.manifest: Optional[Dict[str, Any]] = None

    def add_artifact(self, name: str, payload: bytes, kind: str = "csv") -> str:
        """
        Add or replace an artifact.

        Args:
            name: Relative artifact name (e.g. "moments.csv")
            payload: Artifact content
            kind: Content kind ("csv", "json", "snapshot")

        Returns:
            sha256 hex digest of the payload
        """
        digest = sha256_digest(payload)
        self._artifacts[name] = {
            "kind": kind,
            "payload": payload,
            "sha256": digest,
            "bytes": len(payload),
        }
        logger.info(f"Artifact added: {name} ({len(payload)} bytes)")
        return digest

    def add_table(
        self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]
    ) -> str:
        """Render and add a CSV table."""
        return self.add_artifact(name, render_csv(header, rows), kind="csv")

    def add_json(self, name: str, data: Any) -> str:
        """Render and add a JSON document."""
        return self.add_artifact(name, render_json(data), kind="json")

    def exists(self, name: str) -> bool:
        """Check whether an artifact exists."""
        return name in self._artifacts

    def listing(self) -> List[Dict[str, Any]]:
        """Name, kind, size and digest of every artifact, sorted by name."""
        return [
            {
                "name": name,
                "kind": info["kind"],
                "bytes": info["bytes"],
                "sha256": info["sha256"],
            }
            for name, info in sorted(self._artifacts.items())
        ]

    def write_manifest(self, manifest: Dict[str, Any]) -> Dict[str, Any]:
        """
        Complete the manifest with the output listing.

        The in-memory store keeps it on the `manifest` attribute.

        Returns:
            The completed manifest
        """
        record = dict(manifest)
        record["outputs"] = self.listing()
        self.manifest = record
        return record


def _atomic_write(path: Path, payload: bytes) -> None:
    handle, temp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(handle, "wb") as stream:
            stream.write(payload)
            stream.flush()
            os.fsync(stream.fileno())
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise


class DiskArtifactStore(ArtifactStore):
    """
    Artifact store that also writes every artifact under an output directory.
    Each file is written atomically (temp file + os.replace).
    """

    def __init__(self, out_dir: Union[str, Path]):
        """
        Initialize the on-disk store.

        Args:
            out_dir: Output directory (created if missing)
        """
        super().__init__()
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"✓ Artifact store ready at {self.out_dir}")

    def path_for(self, name: str) -> Path:
        return self.out_dir / name

    def add_artifact(self, name: str, payload: bytes, kind: str = "csv") -> str:
        path = self.path_for(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, payload)
        return super().add_artifact(name, payload, kind)

    def write_manifest(self, manifest: Dict[str, Any]) -> Dict[str, Any]:
        """
        Write the manifest atomically; call after every other artifact.

        Returns:
            The completed manifest
        """
        record = dict(manifest)
        record["outputs"] = self.listing()
        _atomic_write(self.path_for(MANIFEST_NAME), render_json(record))
        self.manifest = record
        logger.info(
            f"✓ Manifest written: {self.path_for(MANIFEST_NAME)} "
            f"({len(record['outputs'])} outputs)"
        )
        return record

    def verify(self) -> List[str]:
        """
        Recompute digests from disk.

        Returns:
            Names whose file is missing or whose digest no longer matches
        """
        mismatched = []
        for name, info in sorted(self._artifacts.items()):
            path = self.path_for(name)
            if not path.exists() or sha256_digest(path.read_bytes()) != info["sha256"]:
                logger.warning(f"⚠ Artifact digest mismatch: {name}")
                mismatched.append(name)
        return mismatched
