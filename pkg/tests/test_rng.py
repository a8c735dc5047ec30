"""
Tests for counter-based random streams.
"""

import numpy as np
from numpy.testing import assert_array_equal

from mfsmp.rng import BROWNIAN, CHAIN, CONTROL, map_ordered, stream


class TestStreams:
    """(seed, channel, particle) addressing"""

    def test_same_address_same_draws(self):
        assert_array_equal(stream(3, BROWNIAN, 5).standard_normal(8), stream(3, BROWNIAN, 5).standard_normal(8))

    def test_addresses_are_independent(self):
        base = stream(3, BROWNIAN, 5).standard_normal(8)
        for other in (stream(4, BROWNIAN, 5), stream(3, CHAIN, 5), stream(3, CONTROL, 5), stream(3, BROWNIAN, 6)):
            assert not np.array_equal(base, other.standard_normal(8))

    def test_draw_order_does_not_matter(self):
        """Drawing particles in reverse order gives the same per-particle values"""
        forward = [stream(1, BROWNIAN, n).standard_normal(4) for n in range(6)]
        backward = [stream(1, BROWNIAN, n).standard_normal(4) for n in reversed(range(6))][::-1]
        assert_array_equal(np.stack(forward), np.stack(backward))


class TestMapOrdered:
    """Thread pool that preserves index order"""

    def test_order_preserved(self):
        assert map_ordered(lambda i: i * i, range(50), threads=8) == [i * i for i in range(50)]

    def test_threads_do_not_change_results(self):
        def draw(n):
            return stream(9, BROWNIAN, n).standard_normal(16)

        serial = np.stack(map_ordered(draw, range(64), threads=1))
        parallel = np.stack(map_ordered(draw, range(64), threads=8))
        assert_array_equal(serial, parallel)

    def test_empty(self):
        assert map_ordered(lambda i: i, [], threads=4) == []
