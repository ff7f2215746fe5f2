#!/usr/bin/env python3
"""
Unit tests for the seed schedule.
"""

import unittest

import numpy as np

from errors import ConfigError
from seed_schedule import MAX_SEED, RngStream, SeedScheduler, tag_index


class TestRngStream(unittest.TestCase):
    """Test cases for RngStream."""

    def test_same_coordinates_same_numbers(self):
        """Test identical coordinates reproduce the same draws."""
        first = RngStream(42, (3, 1)).generator().standard_normal(8)
        second = RngStream(42).child(3).child(1).generator().standard_normal(8)
        np.testing.assert_array_equal(first, second)

    def test_distinct_coordinates_distinct_numbers(self):
        """Test sibling streams differ."""
        first = RngStream(42, (3, 1)).generator().standard_normal(8)
        second = RngStream(42, (3, 2)).generator().standard_normal(8)
        third = RngStream(43, (3, 1)).generator().standard_normal(8)
        self.assertFalse(np.array_equal(first, second))
        self.assertFalse(np.array_equal(first, third))

    def test_generator_restarts(self):
        """Test every generator() call starts at the beginning of the stream."""
        stream = RngStream(7, (1,))
        np.testing.assert_array_equal(
            stream.generator().random(4), stream.generator().random(4)
        )

    def test_path(self):
        """Test the readable path lists seed and coordinates."""
        self.assertEqual(RngStream(12345, (7, 0, 3)).path, "12345/7/0/3")
        self.assertEqual(RngStream(5).path, "5")

    def test_seed_range(self):
        """Test seeds outside the 64-bit range are rejected."""
        RngStream(MAX_SEED - 1)
        with self.assertRaises(ConfigError):
            RngStream(MAX_SEED)
        with self.assertRaises(ConfigError):
            RngStream(-1)

    def test_negative_coordinate(self):
        """Test negative stream coordinates are rejected."""
        with self.assertRaises(ConfigError):
            RngStream(1, (0, -2))


class TestSeedScheduler(unittest.TestCase):
    """Test cases for SeedScheduler."""

    def setUp(self):
        """Set up a scheduler."""
        self.scheduler = SeedScheduler(20240611)

    def test_tag_index_stable(self):
        """Test tag codes are deterministic 32-bit integers."""
        self.assertEqual(tag_index("moments/t=2"), tag_index("moments/t=2"))
        self.assertNotEqual(tag_index("moments/t=2"), tag_index("moments/t=3"))
        self.assertLess(tag_index("tail"), 2**32)

    def test_stream_coordinates(self):
        """Test stream(tag, r) equals base(tag).child(r)."""
        stream = self.scheduler.stream("tail", 5)
        base = self.scheduler.base("tail", 10)
        self.assertEqual(stream, base.child(5))
        self.assertEqual(stream.stream_index, (tag_index("tail"), 5))

    def test_schedule_record(self):
        """Test the manifest record tracks issued replica ranges."""
        self.scheduler.base("moments/t=1", 100)
        self.scheduler.stream("moments/t=1", 150)
        self.scheduler.stream("cascade", 0)

        record = self.scheduler.schedule_record()

        self.assertEqual(record["master_seed"], 20240611)
        self.assertEqual(record["bit_generator"], "PCG64")
        self.assertEqual(record["streams"]["moments/t=1"]["replicas"], [0, 151])
        self.assertEqual(record["streams"]["cascade"]["index"], tag_index("cascade"))
        self.assertEqual(list(record["streams"]), ["cascade", "moments/t=1"])

    def test_independent_of_issue_order(self):
        """Test streams do not depend on the order they were requested in."""
        other = SeedScheduler(20240611)
        other.stream("b", 1)
        first = other.stream("a", 0).generator().random(3)
        second = self.scheduler.stream("a", 0).generator().random(3)
        np.testing.assert_array_equal(first, second)


if __name__ == "__main__":
    unittest.main()
