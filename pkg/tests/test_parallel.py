"""
Unit tests for the ordered worker pool.
"""

from pathprof.parallel import chunked, default_jobs, map_ordered


class TestParallel:
    """Test cases for chunking and ordered mapping."""

    def test_chunked(self):
        spans = list(chunked(7, 3))

        assert [(s.start, s.stop) for s in spans] == [(0, 3), (3, 6), (6, 7)]
        assert list(chunked(0, 3)) == []
        assert len(list(chunked(4, 0))) == 4

    def test_serial_map(self):
        assert map_ordered(abs, [-3, 1, -2]) == [3, 1, 2]

    def test_pool_keeps_order(self):
        """Results come back in input order with several workers."""
        assert map_ordered(abs, [-3, 1, -2], jobs=2) == [3, 1, 2]

    def test_empty(self):
        assert map_ordered(abs, [], jobs=4) == []

    def test_default_jobs(self):
        assert default_jobs() >= 1
