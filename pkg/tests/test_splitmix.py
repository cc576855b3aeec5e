import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from gridood.splitmix import SplitMix64


class TestSplitMix64(unittest.TestCase):

    def test_reference_stream_for_seed_zero(self):
        rng = SplitMix64(0)
        self.assertEqual([rng.next_u64() for _ in range(3)],
                         [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F])

    def test_block_matches_scalar_draws(self):
        """
        GIVEN: two generators with the same seed
        WHEN: one draws 1000 values in a block and the other one at a time
        THEN: the values and the final states agree
        """
        scalar, vector = SplitMix64(12345), SplitMix64(12345)
        expected = [scalar.next_u64() for _ in range(1000)]
        self.assertEqual(vector.block(1000).tolist(), expected)
        self.assertEqual(vector.state, scalar.state)
        self.assertEqual(vector.next_u64(), scalar.next_u64())

    def test_uniform_block_matches_uniform(self):
        scalar, vector = SplitMix64(7), SplitMix64(7)
        expected = [scalar.uniform(-0.05, 0.05) for _ in range(50)]
        np.testing.assert_array_equal(vector.uniform_block(50, -0.05, 0.05), expected)

    def test_ranges(self):
        rng = SplitMix64(99)
        values = [rng.uniform() for _ in range(2000)]
        self.assertTrue(all(0.0 <= v < 1.0 for v in values))
        ints = {rng.randint(2, 5) for _ in range(500)}
        self.assertEqual(ints, {2, 3, 4, 5})

    def test_shuffle_is_a_new_permutation(self):
        items = list(range(20))
        shuffled = SplitMix64(1).shuffle(items)
        self.assertEqual(items, list(range(20)))
        self.assertEqual(sorted(shuffled), items)
        self.assertEqual(shuffled, SplitMix64(1).shuffle(items))

    def test_streams_are_distinct(self):
        epochs = [SplitMix64.for_stream(42, e).shuffle(list(range(10))) for e in range(3)]
        self.assertEqual(epochs[0], SplitMix64.for_stream(42, 0).shuffle(list(range(10))))
        self.assertNotEqual(epochs[0], epochs[1])
