"""Versioned model artifacts.

An artifact is a YAML document with sorted keys. Arrays are stored as
base64-encoded little-endian float64 buffers, so saving a loaded artifact
reproduces the original bytes.
"""

import base64
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from .data import Normalizer
from .diffcore import Tensor
from .dictionary import NeighborDictionary
from .estimator import MLP, Head
from .meta import GROUP_ORDER, InnerLearningRate, MetaModel
from .records import atomic_write, to_plain

logger = logging.getLogger('metaneighbors.artifacts')

MODEL_FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


class ArtifactError(ValueError):
    """Unreadable artifact, unsupported version, or dimension mismatch."""


@dataclass
class Artifact:
    model: MetaModel
    config: Dict[str, Any]
    normalizer: Optional[Normalizer] = None
    label_normalizer: Optional[Normalizer] = None
    split: Optional[str] = None


def encode_array(array: np.ndarray) -> Dict[str, Any]:
    array = np.asarray(array, dtype='<f8')
    return {'shape': list(array.shape), 'dtype': '<f8',
            'data': base64.b64encode(array.tobytes()).decode('ascii')}


def decode_array(payload: Dict[str, Any]) -> np.ndarray:
    try:
        if payload['dtype'] != '<f8':
            raise ArtifactError(f"unsupported array dtype {payload['dtype']}")
        flat = np.frombuffer(base64.b64decode(payload['data']), dtype='<f8')
        return flat.reshape(tuple(payload['shape'])).astype(np.float64)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ArtifactError):
            raise
        raise ArtifactError(f"malformed array payload: {e}") from e


def _encode_normalizer(normalizer: Optional[Normalizer]):
    if normalizer is None:
        return None
    return {'mean': encode_array(normalizer.mean), 'std': encode_array(normalizer.std)}


def _decode_normalizer(payload) -> Optional[Normalizer]:
    if payload is None:
        return None
    return Normalizer(mean=decode_array(payload['mean']), std=decode_array(payload['std']))


def model_to_document(model: MetaModel, config: Optional[Dict[str, Any]] = None,
                      normalizer: Optional[Normalizer] = None,
                      label_normalizer: Optional[Normalizer] = None,
                      split: Optional[str] = None) -> Dict[str, Any]:
    groups = model.all_groups()
    hyperparameters = {
        'task': model.task,
        'method': model.method,
        'inner_steps': model.inner_steps,
        'aux_weight': float(model.aux_weight),
        'alpha_mode': model.alpha.mode,
        'shared_tau': model.xi_tau is not None and model.xi_tau is model.tau,
        'head': {'input_dim': model.head.input_dim, 'output_dim': model.head.output_dim,
                 'hidden': list(model.head.hidden), 'output': model.head.output},
        'extractor': None if model.extractor is None else {
            'sizes': list(model.extractor.sizes), 'final_relu': model.extractor.final_relu},
        'dictionary': {'metric': model.dictionary.metric, 'gamma': float(model.dictionary.gamma),
                       'value_mode': model.dictionary.value_mode},
    }
    return {
        'format_version': MODEL_FORMAT_VERSION,
        'config': to_plain(config or {}),
        'hyperparameters': to_plain(hyperparameters),
        'parameters': {name: [encode_array(t.data) for t in groups[name]]
                       for name in GROUP_ORDER if name in groups},
        'normalizer': _encode_normalizer(normalizer),
        'label_normalizer': _encode_normalizer(label_normalizer),
        'split': split,
    }


def model_to_bytes(model: MetaModel, config: Optional[Dict[str, Any]] = None,
                   normalizer: Optional[Normalizer] = None,
                   label_normalizer: Optional[Normalizer] = None,
                   split: Optional[str] = None) -> bytes:
    document = model_to_document(model, config, normalizer, label_normalizer, split)
    return yaml.safe_dump(document, sort_keys=True, default_flow_style=False).encode('utf-8')


def save_model(path, model: MetaModel, config: Optional[Dict[str, Any]] = None,
               normalizer: Optional[Normalizer] = None,
               label_normalizer: Optional[Normalizer] = None,
               split: Optional[str] = None) -> Path:
    """Write ``model``; ``split`` names the data partition it was trained on."""
    path = atomic_write(path, model_to_bytes(model, config, normalizer, label_normalizer, split))
    logger.info("Saved %s model to %s", model.method, path)
    return path


def model_from_document(document: Dict[str, Any]) -> Artifact:
    if not isinstance(document, dict) or 'format_version' not in document:
        raise ArtifactError("not a model artifact: format_version missing")
    version = document['format_version']
    if version not in SUPPORTED_VERSIONS:
        raise ArtifactError(f"unsupported artifact format version {version}; "
                            f"supported: {list(SUPPORTED_VERSIONS)}")
    try:
        hp = document['hyperparameters']
        arrays = document['parameters']
        groups: Dict[str, List[Tensor]] = {
            name: [Tensor(decode_array(p), requires_grad=True) for p in arrays.get(name, [])]
            for name in GROUP_ORDER}
        head_hp = hp['head']
        head = Head(int(head_hp['input_dim']), int(head_hp['output_dim']),
                    tuple(head_hp['hidden']), head_hp['output'])
        extractor = None
        if hp['extractor'] is not None:
            extractor = MLP(tuple(hp['extractor']['sizes']), final_relu=bool(hp['extractor']['final_relu']))
        dictionary = NeighborDictionary(groups['dict_keys'][0], groups['dict_values'][0],
                                        metric=hp['dictionary']['metric'],
                                        gamma=float(hp['dictionary']['gamma']),
                                        value_mode=hp['dictionary']['value_mode'])
        tau = groups['tau'][0] if groups['tau'] else None
        if hp['shared_tau']:
            xi_tau = tau
        else:
            xi_tau = groups['xi_tau'][0] if groups['xi_tau'] else None
        model = MetaModel(task=hp['task'], head=head, phi=groups['phi'], dictionary=dictionary,
                          alpha=InnerLearningRate(hp['alpha_mode'], groups['alpha']),
                          extractor=extractor, theta=groups['theta'], xi=groups['xi'],
                          tau=tau, xi_tau=xi_tau, aux_weight=float(hp['aux_weight']),
                          inner_steps=int(hp['inner_steps']), method=hp['method'])
    except ArtifactError:
        raise
    except (KeyError, IndexError, TypeError, ValueError) as e:
        raise ArtifactError(f"invalid model artifact: {e}") from e
    return Artifact(model=model, config=document.get('config') or {},
                    normalizer=_decode_normalizer(document.get('normalizer')),
                    label_normalizer=_decode_normalizer(document.get('label_normalizer')),
                    split=document.get('split'))


def load_model(path) -> Artifact:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"artifact not found: {path}")
    try:
        with open(path, 'r') as f:
            document = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ArtifactError(f"cannot parse artifact {path}: {e}") from e
    artifact = model_from_document(document)
    logger.info("Loaded %s model from %s", artifact.model.method, path)
    return artifact


def check_compatible(model: MetaModel, input_dim: int, output_dim: int):
    """Raise ArtifactError unless the model accepts this dataset's shapes."""
    if model.input_dim != input_dim:
        raise ArtifactError(f"model expects {model.input_dim} input columns, dataset has {input_dim}")
    if model.head.output_dim != output_dim:
        raise ArtifactError(f"model predicts {model.head.output_dim} outputs, dataset has {output_dim}")
