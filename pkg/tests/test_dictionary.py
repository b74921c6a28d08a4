"""Tests for the neighbor dictionary and soft attention."""

import unittest

import numpy as np

from metaneighbors import diffcore as dc
from metaneighbors.diffcore import ShapeError, Tensor, ZeroNormError
from metaneighbors.dictionary import (NeighborDictionary, attend, init_dictionary,
                                      nearest_dataset_points, similarities)


def make_dictionary(keys, values=None, **kwargs):
    keys = np.asarray(keys, dtype=np.float64)
    if values is None:
        values = np.zeros((keys.shape[0], 2))
    return NeighborDictionary(Tensor(keys, requires_grad=True), Tensor(np.asarray(values, dtype=np.float64),
                                                                        requires_grad=True), **kwargs)


class TestAttention(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_weights_sum_to_one(self):
        """Attention over every entry is a probability vector for both metrics."""
        for metric in ('euclidean', 'cosine'):
            dictionary = init_dictionary(50, 4, 3, seed=1, metric=metric, gamma=5.0)
            weights = attend(self.rng.normal(size=(8, 4)), dictionary).data
            self.assertEqual(weights.shape, (8, 50))
            self.assertTrue(np.all(weights >= 0))
            np.testing.assert_allclose(weights.sum(axis=1), np.ones(8), atol=1e-9)

    def test_single_query_shape(self):
        dictionary = init_dictionary(6, 3, 2, seed=0)
        self.assertEqual(attend(np.ones(3), dictionary).shape, (6,))

    def test_single_entry_gets_all_weight(self):
        dictionary = make_dictionary([[0.3, -0.2]])
        np.testing.assert_array_equal(attend(np.array([1.0, 1.0]), dictionary).data, [1.0])

    def test_coincident_keys_share_weight(self):
        dictionary = make_dictionary([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], metric='euclidean')
        weights = attend(np.array([0.5, 0.5]), dictionary).data
        self.assertEqual(weights[0], weights[1])

    def test_permutation_equivariance(self):
        """Permuting entries permutes the weights the same way."""
        keys = self.rng.normal(size=(10, 3))
        perm = self.rng.permutation(10)
        queries = self.rng.normal(size=(4, 3))
        for metric in ('euclidean', 'cosine'):
            base = attend(queries, make_dictionary(keys, metric=metric)).data
            permuted = attend(queries, make_dictionary(keys[perm], metric=metric)).data
            np.testing.assert_allclose(permuted, base[:, perm], atol=1e-12)

    def test_euclidean_gamma_extremes(self):
        keys = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
        query = np.array([0.9, 0.0])
        sharp = attend(query, make_dictionary(keys, metric='euclidean', gamma=1e4)).data
        self.assertAlmostEqual(float(sharp[1]), 1.0, places=9)
        flat = attend(query, make_dictionary(keys, metric='euclidean', gamma=1e-8)).data
        np.testing.assert_allclose(flat, np.full(3, 1 / 3), atol=1e-7)

    def test_two_entry_hand_weights(self):
        """Distances 1 and 2 at gamma=1 give e^-1 / (e^-1 + e^-2)."""
        dictionary = make_dictionary([[1.0, 0.0], [0.0, 2.0]], metric='euclidean', gamma=1.0)
        weights = attend(np.zeros(2), dictionary).data
        expected = np.array([np.exp(-1.0), np.exp(-2.0)]) / (np.exp(-1.0) + np.exp(-2.0))
        np.testing.assert_allclose(weights, expected, atol=1e-12)
        np.testing.assert_allclose(weights, [0.7311, 0.2689], atol=5e-5)

    def test_sharp_gamma_picks_the_matching_key(self):
        for metric, keys in (('euclidean', [[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]),
                             ('cosine', [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])):
            dictionary = make_dictionary(keys, metric=metric, gamma=100.0)
            weights = attend(np.array(keys[0]), dictionary).data
            self.assertGreater(weights[0], 0.999, metric)

    def test_max_weight_never_drops_as_gamma_grows(self):
        keys = self.rng.normal(size=(12, 3))
        queries = self.rng.normal(size=(5, 3))
        for metric in ('euclidean', 'cosine'):
            peaks = [attend(queries, make_dictionary(keys, metric=metric, gamma=g)).data.max(axis=1)
                     for g in (0.1, 0.5, 1.0, 2.0, 5.0, 20.0, 100.0)]
            for lower, higher in zip(peaks, peaks[1:]):
                self.assertTrue(np.all(higher >= lower - 1e-12), metric)

    def test_cosine_scale_invariance(self):
        dictionary = make_dictionary(self.rng.normal(size=(5, 3)), metric='cosine')
        query = self.rng.normal(size=3)
        np.testing.assert_allclose(attend(query, dictionary).data, attend(7.5 * query, dictionary).data,
                                   atol=1e-12)

    def test_cosine_zero_query_raises(self):
        dictionary = make_dictionary(self.rng.normal(size=(5, 3)), metric='cosine')
        with self.assertRaises(ZeroNormError):
            attend(np.zeros(3), dictionary)

    def test_dimension_mismatch(self):
        dictionary = make_dictionary(self.rng.normal(size=(5, 3)))
        with self.assertRaises(ShapeError):
            attend(np.ones(4), dictionary)

    def test_euclidean_similarity_is_negative_distance(self):
        sims = similarities(Tensor(np.array([[0.0, 0.0]])), Tensor(np.array([[3.0, 4.0], [0.0, 1.0]])),
                            'euclidean').data
        np.testing.assert_allclose(sims, [[-5.0, -1.0]])

    def test_attention_gradients(self):
        queries = self.rng.normal(size=(3, 2))
        values = self.rng.normal(size=(4, 2))
        for metric in ('euclidean', 'cosine'):
            def fn(p):
                dictionary = NeighborDictionary(p[1], Tensor(np.zeros((4, 2))), metric=metric, gamma=2.0)
                return dc.sum(dc.mul(attend(p[0], dictionary), dc.matmul(p[0], dc.swapaxes(Tensor(values)))))
            for error in dc.check_gradients(fn, [queries, self.rng.normal(size=(4, 2))]):
                self.assertLess(error, 1e-6)


class TestDictionary(unittest.TestCase):

    def test_init_is_seeded(self):
        a = init_dictionary(20, 3, 2, seed=11)
        b = init_dictionary(20, 3, 2, seed=11)
        np.testing.assert_array_equal(a.keys.data, b.keys.data)
        np.testing.assert_array_equal(a.values.data, b.values.data)
        self.assertTrue(a.keys.requires_grad and a.values.requires_grad)

    def test_init_statistics(self):
        """A million sampled entries have mean 0 and std 0.1 to three decimals."""
        dictionary = init_dictionary(1000, 500, 500, seed=0)
        draws = np.concatenate([dictionary.keys.data.ravel(), dictionary.values.data.ravel()])
        self.assertEqual(draws.size, 10 ** 6)
        self.assertLess(abs(draws.mean()), 0.001)
        self.assertLess(abs(draws.std() - 0.1), 0.001)

    def test_regression_values_cover_label_range(self):
        dictionary = init_dictionary(500, 2, 1, seed=0, value_mode='raw',
                                     value_range=(np.array([-2.0]), np.array([3.0])))
        self.assertGreaterEqual(dictionary.values.data.min(), -2.0)
        self.assertLessEqual(dictionary.values.data.max(), 3.0)

    def test_value_targets(self):
        values = np.array([[2.0, 0.0], [0.0, 0.0]])
        soft = make_dictionary(np.ones((2, 2)), values, value_mode='soft_label').value_targets().data
        np.testing.assert_allclose(soft.sum(axis=1), [1.0, 1.0])
        np.testing.assert_allclose(soft[1], [0.5, 0.5])
        raw = make_dictionary(np.ones((2, 2)), values, value_mode='raw').value_targets().data
        np.testing.assert_array_equal(raw, values)

    def test_entry_classes(self):
        values = np.array([[0.1, 0.9], [2.0, -1.0]])
        np.testing.assert_array_equal(make_dictionary(np.ones((2, 2)), values).entry_classes(), [1, 0])

    def test_invalid_settings(self):
        with self.assertRaises(ValueError):
            make_dictionary(np.ones((2, 2)), metric='manhattan')
        with self.assertRaises(ValueError):
            make_dictionary(np.ones((2, 2)), gamma=0.0)
        with self.assertRaises(ShapeError):
            make_dictionary(np.ones((2, 2)), np.ones((3, 2)))


class TestNearestDatasetPoints(unittest.TestCase):

    def setUp(self):
        self.dictionary = make_dictionary([[1.0, 0.0], [0.0, 0.0]])

    def test_orders_by_cosine_then_index(self):
        features = np.array([[0.0, 1.0], [2.0, 0.0], [1.0, 1.0], [5.0, 0.0], [0.0, 0.0]])
        np.testing.assert_array_equal(nearest_dataset_points(self.dictionary, 0, features, 3), [1, 3, 2])

    def test_zero_rows_score_zero(self):
        features = np.array([[-1.0, 0.0], [0.0, 0.0]])
        np.testing.assert_array_equal(nearest_dataset_points(self.dictionary, 0, features, 2), [1, 0])

    def test_errors(self):
        features = np.ones((3, 2))
        with self.assertRaises(IndexError):
            nearest_dataset_points(self.dictionary, 5, features, 1)
        with self.assertRaises(ValueError):
            nearest_dataset_points(self.dictionary, 0, features, 4)
        with self.assertRaises(ValueError):
            nearest_dataset_points(self.dictionary, 0, np.zeros((0, 2)), 1)
        with self.assertRaises(ZeroNormError):
            nearest_dataset_points(self.dictionary, 1, features, 1)


if __name__ == '__main__':
    unittest.main()
