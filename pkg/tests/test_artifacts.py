"""Tests for saving and loading model artifacts."""

import tempfile
import unittest
from pathlib import Path

import numpy as np
import yaml

from metaneighbors.artifacts import (ArtifactError, check_compatible, decode_array, encode_array, load_model,
                                     model_to_bytes, model_to_document, save_model)
from metaneighbors.config_parser import ModelConfig
from metaneighbors.data import Normalizer
from metaneighbors.meta import build_model, predict, predict_outputs


def feature_model(**overrides):
    config = ModelConfig(**{'extractor': [6, 4], 'head_output': 'cosine', 'dictionary_size': 7,
                            'metric': 'cosine', 'alpha_mode': 'diagonal', **overrides})
    return build_model(config, 'classification', 3, 2, seed=11)


class TestArtifacts(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.temp_path = Path(self.temp_dir.name)
        self.inputs = np.random.default_rng(0).normal(size=(5, 3))

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_round_trip_is_byte_stable(self):
        model = feature_model()
        normalizer = Normalizer(mean=np.array([0.5, -1.0, 2.0]), std=np.array([1.0, 3.0, 0.25]))
        config = {'seed': 3, 'model': {'gamma': 5.0}}
        path = save_model(self.temp_path / 'model.yaml', model, config, normalizer)

        artifact = load_model(path)
        self.assertEqual(artifact.config, config)
        np.testing.assert_array_equal(artifact.normalizer.std, normalizer.std)
        self.assertIsNone(artifact.label_normalizer)
        again = model_to_bytes(artifact.model, artifact.config, artifact.normalizer)
        self.assertEqual(again, path.read_bytes())

    def test_split_name_round_trips(self):
        model = feature_model()
        path = save_model(self.temp_path / 'model_fold2.yaml', model, split='fold2')
        artifact = load_model(path)
        self.assertEqual(artifact.split, 'fold2')
        self.assertEqual(model_to_bytes(artifact.model, artifact.config, split=artifact.split), path.read_bytes())
        self.assertIsNone(load_model(save_model(self.temp_path / 'bare.yaml', model)).split)

    def test_loaded_model_predicts_identically(self):
        model = feature_model()
        path = save_model(self.temp_path / 'model.yaml', model)
        loaded = load_model(path).model
        np.testing.assert_array_equal(predict_outputs(loaded, self.inputs), predict_outputs(model, self.inputs))
        self.assertEqual(loaded.alpha.mode, 'diagonal')
        self.assertIsNot(loaded.xi_tau, loaded.tau)

    def test_predict_leaves_artifact_bytes_unchanged(self):
        model = feature_model()
        before = model_to_bytes(model)
        predict_outputs(model, self.inputs)
        predict(model, self.inputs, chunk_size=2)
        self.assertEqual(model_to_bytes(model), before)

    def test_shared_tau_survives(self):
        model = feature_model(aux_tau='shared', alpha_mode='scalar')
        loaded = load_model(save_model(self.temp_path / 'shared.yaml', model)).model
        self.assertIs(loaded.xi_tau, loaded.tau)

    def test_vanilla_and_regression_models(self):
        labels = np.random.default_rng(1).normal(size=(20, 1))
        config = ModelConfig(method='vanilla', head_hidden=[5], dictionary_size=4)
        model = build_model(config, 'regression', 2, 1, seed=2, labels=labels)
        loaded = load_model(save_model(self.temp_path / 'vanilla.yaml', model)).model
        self.assertEqual(loaded.method, 'vanilla')
        self.assertIsNone(loaded.extractor)
        self.assertEqual(loaded.head.hidden, (5,))

    def test_parameters_follow_group_order(self):
        document = model_to_document(feature_model())
        self.assertEqual(list(document['parameters']),
                         ['theta', 'phi', 'xi', 'dict_keys', 'dict_values', 'alpha', 'tau', 'xi_tau'])
        self.assertEqual(document['format_version'], 1)

    def test_unsupported_version(self):
        document = model_to_document(feature_model())
        document['format_version'] = 99
        path = self.temp_path / 'future.yaml'
        path.write_text(yaml.safe_dump(document))
        with self.assertRaises(ArtifactError) as ctx:
            load_model(path)
        self.assertIn('99', str(ctx.exception))

    def test_unreadable_artifacts(self):
        with self.assertRaises(ArtifactError):
            load_model(self.temp_path / 'missing.yaml')
        path = self.temp_path / 'broken.yaml'
        path.write_text("format_version: [1\n")
        with self.assertRaises(ArtifactError):
            load_model(path)
        path.write_text("just: a mapping\n")
        with self.assertRaises(ArtifactError):
            load_model(path)
        document = model_to_document(feature_model())
        del document['parameters']['phi']
        path.write_text(yaml.safe_dump(document))
        with self.assertRaises(ArtifactError):
            load_model(path)

    def test_array_payloads(self):
        array = np.arange(6, dtype=float).reshape(2, 3)
        np.testing.assert_array_equal(decode_array(encode_array(array)), array)
        with self.assertRaises(ArtifactError):
            decode_array({'shape': [2], 'dtype': '<f4', 'data': ''})
        with self.assertRaises(ArtifactError):
            decode_array({'shape': [4], 'dtype': '<f8', 'data': encode_array(array)['data']})

    def test_check_compatible(self):
        model = feature_model()
        check_compatible(model, 3, 2)
        with self.assertRaises(ArtifactError):
            check_compatible(model, 2, 2)
        with self.assertRaises(ArtifactError):
            check_compatible(model, 3, 4)


if __name__ == '__main__':
    unittest.main()
