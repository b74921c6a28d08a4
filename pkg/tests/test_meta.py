"""Tests for inner-loop fine-tuning and outer-loop meta-training."""

import itertools
import unittest
from dataclasses import replace

import numpy as np

from metaneighbors import diffcore as dc
from metaneighbors.config_parser import ModelConfig, OptimizerConfig, RunConfig, TrainingConfig
from metaneighbors.data import generate_spirals, one_hot
from metaneighbors.diffcore import Tensor
from metaneighbors.dictionary import NeighborDictionary
from metaneighbors.estimator import Head
from metaneighbors.knn import Neighborhood
from metaneighbors.meta import (InnerLearningRate, MetaModel, TaskBatch, attention_vectors, aux_loss, batch_gradients,
                                build_model, evaluate, fine_tune, fine_tune_from_neighbors, inner_loss,
                                inner_loss_from_neighbors, outer_loss, predict, predict_outputs,
                                similarity_shift_report, total_loss, train, vanilla_loss)
from metaneighbors.optim import DivergenceError


def make_model(task='classification', metric='euclidean', alpha_mode='scalar', inner_steps=1,
               extractor=(), head_hidden=(), head_output='dot', seed=0, aux_tau='own',
               method='meta_neighborhoods', size=5, gamma=2.0, input_dim=2, output_dim=2,
               alpha_init=0.3, aux_weight=1.0):
    config = ModelConfig(method=method, extractor=list(extractor), head_hidden=list(head_hidden),
                         head_output=head_output, dictionary_size=size, gamma=gamma, metric=metric,
                         inner_steps=inner_steps, alpha_mode=alpha_mode, alpha_init=alpha_init,
                         aux_weight=aux_weight, aux_tau=aux_tau, tau_init=2.0, init_std=0.5)
    labels = np.random.default_rng(seed).normal(size=(10, output_dim)) if task == 'regression' else None
    return build_model(config, task, input_dim, output_dim, seed=seed, labels=labels)


def make_batch(model, size=3, seed=0):
    rng = np.random.default_rng(seed + 100)
    inputs = rng.normal(size=(size, model.input_dim))
    if model.task == 'classification':
        labels = one_hot(rng.integers(0, model.head.output_dim, size=size), model.head.output_dim)
    else:
        labels = rng.normal(size=(size, model.head.output_dim))
    return TaskBatch(inputs, labels)


def flatten(model):
    groups = model.all_groups()
    layout = [(name, len(tensors)) for name, tensors in groups.items()]
    arrays = [t.data.copy() for tensors in groups.values() for t in tensors]
    return layout, arrays


def rebuild(model, layout, tensors):
    groups, start = {}, 0
    for name, count in layout:
        groups[name] = list(tensors[start:start + count])
        start += count
    return model.with_parameters(groups)


def small_run_config(**training):
    return RunConfig(seed=0,
                     model=ModelConfig(dictionary_size=8, gamma=2.0, metric='euclidean', aux_weight=0.0),
                     optimizer=OptimizerConfig(learning_rate=0.01),
                     training=TrainingConfig(**{'epochs': 3, 'batch_size': 16, **training}))


class TestBilevelGradients(unittest.TestCase):
    """Analytic gradients through the inner step against central differences."""

    def cases(self):
        for task, metric, alpha_mode, steps in itertools.product(
                ('classification', 'regression'), ('euclidean', 'cosine'), ('scalar', 'diagonal'), (1, 3)):
            if task == 'classification':
                yield dict(task=task, metric=metric, alpha_mode=alpha_mode, inner_steps=steps,
                           extractor=(5, 4), head_output='cosine', input_dim=3, output_dim=3)
            else:
                yield dict(task=task, metric=metric, alpha_mode=alpha_mode, inner_steps=steps,
                           input_dim=2, output_dim=1, size=6)
        yield dict(task='classification', metric='cosine', extractor=(5, 4), head_output='cosine',
                   input_dim=3, output_dim=3, aux_tau='shared', seed=4)
        yield dict(task='classification', metric='euclidean', extractor=(4,), input_dim=3, output_dim=2,
                   inner_steps=2, seed=5)
        yield dict(task='regression', metric='euclidean', alpha_mode='diagonal', inner_steps=3,
                   head_hidden=(3,), input_dim=2, output_dim=1, seed=6)
        yield dict(task='regression', metric='cosine', output_dim=2, input_dim=3, seed=7)

    def test_outer_gradient_matches_finite_differences(self):
        checked = 0
        for case in self.cases():
            model = make_model(**case)
            batch = make_batch(model, seed=checked)
            layout, arrays = flatten(model)
            self.assertLessEqual(sum(a.size for a in arrays), 200)
            objective = total_loss if model.extractor is not None else outer_loss

            errors = dc.check_gradients(lambda p: objective(rebuild(model, layout, p), batch), arrays)
            names = [name for name, count in layout for _ in range(count)]
            for name, error in zip(names, errors):
                self.assertLess(error, 1e-4, msg=f"{name} in {case}")
            checked += 1
        self.assertGreaterEqual(checked, 20)

    def test_every_group_is_checked(self):
        model = make_model(extractor=(5, 4), head_output='cosine', input_dim=3, output_dim=3)
        layout, _ = flatten(model)
        self.assertEqual([name for name, _ in layout],
                         ['theta', 'phi', 'xi', 'dict_keys', 'dict_values', 'alpha', 'tau', 'xi_tau'])

    def test_retrieval_variant_gradients(self):
        model = make_model(task='regression', input_dim=2, output_dim=1, inner_steps=2)
        rng = np.random.default_rng(9)
        hood = Neighborhood(rng.normal(size=(4, 2)), rng.normal(size=(4, 1)), np.arange(4))
        query, label = rng.normal(size=(1, 2)), rng.normal(size=(1, 1))
        layout = [('phi', len(model.phi)), ('alpha', 1)]
        arrays = [p.data.copy() for p in model.phi] + [model.alpha.values[0].data.copy()]

        def loss(p):
            adapted = rebuild(model, layout, p)
            phi_i = fine_tune_from_neighbors(adapted, hood)
            return dc.mean(adapted.objective.loss(adapted.head.forward(phi_i, query), label))

        for error in dc.check_gradients(loss, arrays):
            self.assertLess(error, 1e-4)


class TestInnerLoop(unittest.TestCase):

    def setUp(self):
        self.model = make_model(task='regression', input_dim=2, output_dim=1, size=6)
        self.queries = np.random.default_rng(1).normal(size=(4, 2))

    def test_batched_inner_loss_matches_single(self):
        batched = inner_loss(self.model, self.queries).data
        for b in range(4):
            self.assertAlmostEqual(inner_loss(self.model, self.queries[b]).item(), batched[b], places=12)

    def test_batched_fine_tune_matches_single(self):
        batched = fine_tune(self.model, self.queries)
        for b in range(4):
            single = fine_tune(self.model, self.queries[b])
            for p_b, p_single in zip(batched, single):
                np.testing.assert_allclose(p_b.data[b], p_single.data, atol=1e-12)

    def test_single_query_keeps_phi_shapes(self):
        phi_i = fine_tune(self.model, self.queries[0])
        self.assertEqual([p.shape for p in phi_i], [p.shape for p in self.model.phi])

    def test_inner_step_lowers_inner_loss(self):
        query = self.queries[0]
        before = inner_loss(self.model, query).item()
        after = inner_loss(self.model, query, fine_tune(self.model, query, create_graph=False)).item()
        self.assertLess(after, before)

    def test_zero_alpha_leaves_phi(self):
        self.model.alpha.values[0].data = np.zeros(())
        for p, q in zip(fine_tune(self.model, self.queries[0]), self.model.phi):
            np.testing.assert_array_equal(p.data, q.data)

    def test_retrieval_loss(self):
        rng = np.random.default_rng(2)
        hood = Neighborhood(rng.normal(size=(3, 2)), rng.normal(size=(3, 1)), np.arange(3))
        outputs = self.model.head.forward(self.model.phi, hood.inputs).data
        expected = np.mean(np.sum((outputs - hood.labels) ** 2, axis=1))
        self.assertAlmostEqual(inner_loss_from_neighbors(self.model, hood).item(), expected, places=12)

    def test_diagonal_alpha_shapes(self):
        alpha = InnerLearningRate.create('diagonal', [(2, 3), (2,)], init=0.2)
        self.assertEqual([v.shape for v in alpha.values], [(2, 3), (2,)])
        self.assertEqual(alpha.count, 8)
        with self.assertRaises(ValueError):
            InnerLearningRate('scalar', alpha.values)


def scalar_regression_model(keys, values, w, b, alpha=0.1, gamma=1.0):
    """One-input, one-output linear head with a raw-valued Euclidean dictionary."""
    dictionary = NeighborDictionary(Tensor(np.asarray(keys, dtype=np.float64), requires_grad=True),
                                    Tensor(np.asarray(values, dtype=np.float64), requires_grad=True),
                                    metric='euclidean', gamma=gamma, value_mode='raw')
    return MetaModel(task='regression', head=Head(1, 1),
                     phi=[Tensor(np.array([[w]]), requires_grad=True), Tensor(np.array([b]), requires_grad=True)],
                     dictionary=dictionary, alpha=InnerLearningRate.create('scalar', [], init=alpha))


class TestHandComputedInnerLoop(unittest.TestCase):

    def test_single_entry_loss_ignores_the_query(self):
        model = scalar_regression_model([[2.0]], [[3.0]], w=0.5, b=0.0)
        # (0.5 * 2 - 3)^2
        for query in ([2.0], [-7.0], [100.0]):
            self.assertEqual(inner_loss(model, np.array(query)).item(), 4.0)

    def test_three_entry_weighted_sum(self):
        model = scalar_regression_model([[0.0], [1.0], [3.0]], [[1.0], [2.0], [0.0]], w=0.5, b=0.25, gamma=2.0)
        # distances 0.5, 0.5, 2.5; predictions 0.25, 0.75, 1.75
        weights = np.array([np.exp(-1.0), np.exp(-1.0), np.exp(-5.0)])
        weights /= weights.sum()
        losses = np.array([0.5625, 1.5625, 3.0625])
        self.assertAlmostEqual(inner_loss(model, np.array([0.5])).item(), float(weights @ losses), places=12)

    def test_one_step_closed_form(self):
        model = scalar_regression_model([[2.0]], [[3.0]], w=0.5, b=0.0, alpha=0.1)
        # residual 0.5 * 2 - 3 = -2: dL/dw = 2 * -2 * 2 = -8, dL/db = -4
        w, b = fine_tune(model, np.array([2.0]))
        np.testing.assert_allclose(w.data, [[1.3]], atol=1e-12)
        np.testing.assert_allclose(b.data, [0.4], atol=1e-12)

    def test_zeroed_diagonal_coordinate_is_frozen(self):
        model = make_model(task='regression', alpha_mode='diagonal', input_dim=2, output_dim=1, size=4)
        model.alpha.values[0].data = np.array([[0.2, 0.0]])
        weight = model.phi[0].data.copy()
        tuned = fine_tune(model, np.array([0.3, -0.8]))[0].data
        self.assertEqual(tuned[0, 1], weight[0, 1])
        self.assertNotEqual(tuned[0, 0], weight[0, 0])


class TestCollapseAndInvariance(unittest.TestCase):

    def setUp(self):
        self.model = make_model(extractor=(5, 4), head_output='cosine', input_dim=3, output_dim=3,
                                metric='cosine', size=7)
        self.inputs = np.random.default_rng(3).normal(size=(9, 3))

    def test_zero_alpha_is_vanilla(self):
        """With alpha = 0 the tuned model predicts exactly like the plain head."""
        self.model.alpha.values[0].data = np.zeros(())
        vanilla = replace(self.model, method='vanilla')
        np.testing.assert_array_equal(predict_outputs(self.model, self.inputs), predict_outputs(vanilla, self.inputs))
        batch = make_batch(self.model, size=4)
        self.assertEqual(outer_loss(self.model, batch).item(), vanilla_loss(vanilla, batch).item())

    def test_dictionary_permutation_invariance(self):
        perm = np.random.default_rng(4).permutation(7)
        keys, values = self.model.dictionary.keys.data, self.model.dictionary.values.data
        permuted = self.model.with_parameters({'dict_keys': [Tensor(keys[perm], requires_grad=True)],
                                               'dict_values': [Tensor(values[perm], requires_grad=True)]})
        np.testing.assert_allclose(predict_outputs(permuted, self.inputs), predict_outputs(self.model, self.inputs),
                                   atol=1e-10)

    def test_predict_is_side_effect_free(self):
        before = self.model.snapshot()
        first = predict(self.model, self.inputs)
        second = predict(self.model, self.inputs)
        np.testing.assert_array_equal(first, second)
        for name, arrays in self.model.snapshot().items():
            for a, b in zip(arrays, before[name]):
                np.testing.assert_array_equal(a, b)
        self.assertTrue(all(p.requires_grad for p in self.model.phi))

    def test_probabilities(self):
        probs = predict(self.model, self.inputs)
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(9), atol=1e-12)

    def test_chunking_does_not_change_predictions(self):
        np.testing.assert_allclose(predict_outputs(self.model, self.inputs, chunk_size=2),
                                   predict_outputs(self.model, self.inputs, chunk_size=64), atol=1e-12)

    def test_zero_aux_weight_total_is_outer(self):
        model = replace(self.model, aux_weight=0.0)
        batch = make_batch(model, size=4)
        self.assertEqual(total_loss(model, batch).item(), outer_loss(model, batch).item())
        self.assertGreater(aux_loss(model, batch).item(), 0.0)

    def test_total_loss_needs_extractor(self):
        model = make_model()
        with self.assertRaises(ValueError):
            total_loss(model, make_batch(model))

    def test_attention_vectors(self):
        attention = attention_vectors(self.model, self.inputs)
        self.assertEqual(attention.shape, (9, 7))
        np.testing.assert_allclose(attention.sum(axis=1), np.ones(9), atol=1e-9)

    def test_similarity_shift_report(self):
        labels = one_hot(np.arange(9) % 3, 3)
        report = similarity_shift_report(self.model, self.inputs, labels)
        self.assertEqual(report.shape, (9, 2))
        self.assertTrue(np.all(np.abs(report) <= 1 + 1e-12))
        with self.assertRaises(ValueError):
            similarity_shift_report(make_model(), self.inputs[:, :2], one_hot([0] * 9, 2))


class TestParameterGroups(unittest.TestCase):

    def test_vanilla_trains_plain_head_only(self):
        model = make_model(method='vanilla', extractor=(4,), head_output='cosine', input_dim=3, output_dim=2)
        self.assertEqual(list(model.parameter_groups()), ['theta', 'phi', 'tau'])

    def test_shared_aux_tau(self):
        model = make_model(extractor=(4,), head_output='cosine', input_dim=3, output_dim=2, aux_tau='shared')
        self.assertIs(model.xi_tau, model.tau)
        self.assertNotIn('xi_tau', model.parameter_groups())
        frozen = model.frozen()
        self.assertIs(frozen.xi_tau, frozen.tau)

    def test_frozen_shares_arrays(self):
        model = make_model()
        frozen = model.frozen()
        self.assertIs(frozen.phi[0].data, model.phi[0].data)
        self.assertFalse(frozen.phi[0].requires_grad)

    def test_mismatched_dictionary_rejected(self):
        model = make_model()
        with self.assertRaises(ValueError):
            model.with_parameters({'dict_keys': [Tensor(np.zeros((5, 3)), requires_grad=True)]})


class TestTraining(unittest.TestCase):

    def setUp(self):
        self.train_set = generate_spirals(20, seed=0)
        self.validation = generate_spirals(10, seed=1)

    def build(self, config):
        return build_model(config.model, 'classification', 2, 2, seed=config.seed)

    def test_chunked_gradients_match_full_batch(self):
        config = small_run_config()
        model = self.build(config)
        batch = TaskBatch(self.train_set.inputs[:10], self.train_set.labels[:10])
        params = [p for group in model.parameter_groups().values() for p in group]
        full_loss, full_grads, _ = batch_gradients(model, batch, params)
        chunk_loss, chunk_grads, _ = batch_gradients(model, batch, params, chunk_size=3)
        self.assertAlmostEqual(full_loss, chunk_loss, places=12)
        for a, b in zip(full_grads, chunk_grads):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_records_and_determinism(self):
        config = small_run_config()
        steps = []
        _, first = train(self.build(config), self.train_set, config, validation=self.validation,
                         on_step=lambda i, m: steps.append(i))
        _, second = train(self.build(config), self.train_set, config, validation=self.validation)
        self.assertEqual([e['epoch'] for e in first.epochs], [1, 2, 3])
        self.assertEqual(first.epochs, second.epochs)
        self.assertEqual(steps, list(range(1, 3 * 3 + 1)))
        self.assertEqual(first.final['iterations'], 9)
        for entry in first.epochs:
            for key in ('train_loss', 'train_accuracy', 'val_loss', 'val_accuracy', 'learning_rate'):
                self.assertIn(key, entry)
                self.assertTrue(np.isfinite(entry[key]))

    def test_learning_rate_drop(self):
        config = small_run_config()
        config = replace(config, optimizer=replace(config.optimizer, lr_drop_epoch=2))
        _, record = train(self.build(config), self.train_set, config)
        np.testing.assert_allclose([e["learning_rate"] for e in record.epochs], [0.01, 0.001, 0.001])

    def test_early_stopping_restores_best(self):
        config = small_run_config(epochs=6, patience=1)
        model, record = train(self.build(config), self.train_set, config, validation=self.validation)
        best = min(e['val_loss'] for e in record.epochs)
        self.assertIsNotNone(record.final['best_epoch'])
        restored = evaluate(model, self.validation.inputs, self.validation.labels)['loss']
        self.assertAlmostEqual(restored, best, places=10)

    def test_divergence(self):
        config = small_run_config()
        model = self.build(config)
        model.dictionary.keys.data[0, 0] = np.nan
        with self.assertRaises(DivergenceError):
            train(model, self.train_set, config)


if __name__ == '__main__':
    unittest.main()
