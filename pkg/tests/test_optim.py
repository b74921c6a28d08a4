"""Tests for the outer-loop optimizers."""

import math
import unittest
from types import SimpleNamespace

import numpy as np

from metaneighbors.diffcore import Tensor
from metaneighbors.optim import (SGD, AdamW, AdamWState, DivergenceError, SGDState, adamw_step,
                                 create_optimizer, sgd_step, step_drop_schedule)


class TestAdamW(unittest.TestCase):

    def test_three_step_scalar_trace(self):
        """Matches the update rule evaluated by hand, step by step."""
        lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
        grads = [0.5, -0.3, 0.2]
        state = AdamWState(learning_rate=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
        p = np.array(1.0)

        expected = 1.0
        m = v = 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            expected = expected - lr * (m_hat / (math.sqrt(v_hat) + eps)) - lr * wd * expected

            p, = adamw_step(state, [p], [np.array(g)])
            self.assertLess(abs(float(p) - expected), 1e-12)
        self.assertEqual(state.step, 3)

    def test_first_step_moves_by_learning_rate(self):
        state = AdamWState(learning_rate=0.01)
        p, = adamw_step(state, [np.array([2.0, -1.0])], [np.array([4.0, -0.001])])
        np.testing.assert_allclose(p, [2.0 - 0.01, -1.0 + 0.01], atol=1e-6)

    def test_decoupled_decay_with_zero_gradient(self):
        state = AdamWState(learning_rate=0.1, weight_decay=0.5, decay=[True, False])
        params = [np.array([2.0]), np.array([2.0])]
        for _ in range(3):
            params = adamw_step(state, params, [np.zeros(1), np.zeros(1)])
        self.assertAlmostEqual(float(params[0][0]), 2.0 * (1 - 0.05) ** 3, places=14)
        self.assertEqual(float(params[1][0]), 2.0)

    def test_non_finite_gradient(self):
        state = AdamWState()
        with self.assertRaises(DivergenceError):
            adamw_step(state, [np.ones(2)], [np.array([1.0, np.nan])])

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            adamw_step(AdamWState(), [np.ones(2)], [np.ones(3)])

    def test_optimizer_updates_tensors(self):
        p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        opt = AdamW([p], learning_rate=0.5)
        opt.step([np.array([1.0, -1.0])])
        np.testing.assert_allclose(p.data, [0.5, 1.5], atol=1e-7)
        opt.learning_rate = 0.05
        self.assertEqual(opt.state.learning_rate, 0.05)


class TestSGD(unittest.TestCase):

    def test_plain_step(self):
        p, = sgd_step(SGDState(learning_rate=0.5), [np.array([1.0])], [np.array([2.0])])
        np.testing.assert_array_equal(p, [0.0])

    def test_momentum_accumulates(self):
        state = SGDState(learning_rate=1.0, momentum=0.5)
        p = [np.array([0.0])]
        p = sgd_step(state, p, [np.array([1.0])])
        p = sgd_step(state, p, [np.array([1.0])])
        # buffers: 1.0 then 0.5 * 1.0 + 1.0
        np.testing.assert_allclose(p[0], [-2.5])

    def test_optimizer_class(self):
        t = Tensor(np.array([3.0]), requires_grad=True)
        SGD([t], learning_rate=0.1).step([np.array([10.0])])
        np.testing.assert_allclose(t.data, [2.0])


class TestFactoryAndSchedule(unittest.TestCase):

    def test_create_optimizer(self):
        config = SimpleNamespace(kind='adamw', learning_rate=1e-3, betas=(0.9, 0.999), eps=1e-8,
                                 weight_decay=7.5e-5, momentum=0.0)
        opt = create_optimizer(config, [Tensor(np.ones(2), requires_grad=True)], decay=[False])
        self.assertIsInstance(opt, AdamW)
        self.assertEqual(opt.state.decay, [False])
        self.assertIsInstance(create_optimizer(SimpleNamespace(**{**vars(config), 'kind': 'sgd'}), []), SGD)
        with self.assertRaises(ValueError):
            create_optimizer(SimpleNamespace(**{**vars(config), 'kind': 'lbfgs'}), [])

    def test_step_drop(self):
        self.assertEqual(step_drop_schedule(1e-3, 5, None), 1e-3)
        self.assertEqual(step_drop_schedule(1e-3, 9, 10), 1e-3)
        self.assertAlmostEqual(step_drop_schedule(1e-3, 10, 10), 1e-4)
        self.assertAlmostEqual(step_drop_schedule(1e-3, 50, 10, factor=0.5), 5e-4)


if __name__ == '__main__':
    unittest.main()
