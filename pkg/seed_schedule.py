#!/usr/bin/env python3
"""
Deterministic random streams for replicated experiments.
Every (tag, replica, layer, ...) coordinate maps to its own PCG64 stream
derived from one 64-bit master seed, independent of worker scheduling.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np

from errors import ConfigError

logger = logging.getLogger(__name__)

MAX_SEED = 2**64


def tag_index(tag: str) -> int:
    """Stable 32-bit code for an experiment tag (same across processes)."""
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:4], "little")


@dataclass(frozen=True)
class RngStream:
    """
    Identifier of one reproducible random stream.

    Distinct stream_index coordinates give statistically independent streams
    (numpy SeedSequence spawn keys); the same coordinates always give the
    same numbers.
    """

    master_seed: int
    stream_index: Tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < MAX_SEED:
            raise ConfigError(f"Seed must be a 64-bit unsigned integer, got {self.master_seed}")
        if any(int(k) < 0 for k in self.stream_index):
            raise ConfigError(f"Stream coordinates must be nonnegative: {self.stream_index}")
        object.__setattr__(self, "master_seed", int(self.master_seed))
        object.__setattr__(self, "stream_index", tuple(int(k) for k in self.stream_index))

    def child(self, *coords: int) -> "RngStream":
        """Stream one level deeper (e.g. layer k of this replica)."""
        return RngStream(self.master_seed, self.stream_index + tuple(coords))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        sequence = np.random.SeedSequence(self.master_seed, spawn_key=self.stream_index)
        return np.random.Generator(np.random.PCG64(sequence))

    @property
    def path(self) -> str:
        """Human-readable stream identifier, e.g. '12345/7/0/3'."""
        return "/".join([str(self.master_seed)] + [str(k) for k in self.stream_index])


class SeedScheduler:
    """
    Hands out replica streams per experiment tag and records what was issued.

    The record goes into the run manifest so any table can be regenerated
    from (master_seed, tag, replica).
    """

    def __init__(self, master_seed: int):
        """
        Initialize the scheduler.

        Args:
            master_seed: 64-bit master seed of the run
        """
        self.root = RngStream(master_seed)
        self.master_seed = self.root.master_seed
        self._issued: Dict[str, Dict[str, Any]] = {}
        logger.info(f"✓ Seed schedule initialized (master seed: {self.master_seed})")

    def stream(self, tag: str, replica: int = 0) -> RngStream:
        """
        Stream of one replica of a tagged experiment.

        Args:
            tag: Experiment/table tag (e.g. "moments/t=2")
            replica: Replica number

        Returns:
            RngStream with coordinates (tag_index(tag), replica)
        """
        self._note(tag, replica, replica + 1)
        return self.root.child(tag_index(tag), replica)

    def base(self, tag: str, replicas: int) -> RngStream:
        """
        Parent stream of a whole replica batch (replica r is base.child(r)).

        Args:
            tag: Experiment/table tag
            replicas: Number of replicas that will be drawn from it

        Returns:
            RngStream with coordinates (tag_index(tag),)
        """
        self._note(tag, 0, replicas)
        return self.root.child(tag_index(tag))

    def _note(self, tag: str, lo: int, hi: int) -> None:
        entry = self._issued.setdefault(
            tag, {"index": tag_index(tag), "replicas": [lo, hi]}
        )
        entry["replicas"] = [min(entry["replicas"][0], lo), max(entry["replicas"][1], hi)]

    def schedule_record(self) -> Dict[str, Any]:
        """
        Manifest record of every stream family issued so far.

        Returns:
            Dictionary with master seed, bit generator and per-tag ranges
        """
        return {
            "master_seed": self.master_seed,
            "bit_generator": "PCG64",
            "derivation": "SeedSequence(master_seed, spawn_key=(tag_index, replica, ...))",
            "streams": {tag: dict(entry) for tag, entry in sorted(self._issued.items())},
        }
