"""The learnable neighbor dictionary and its soft-attention retrieval."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

logger = logging.getLogger('metaneighbors.dictionary')

METRICS = ('euclidean', 'cosine')
VALUE_MODES = ('soft_label', 'raw')


@dataclass
class NeighborDictionary:
    """S learnable (key, value) pairs plus the attention settings."""
    keys: Tensor     # S x m
    values: Tensor   # S x n_o
    metric: str = 'cosine'
    gamma: float = 5.0
    value_mode: str = 'soft_label'

    def __post_init__(self):
        if self.keys.ndim != 2 or self.values.ndim != 2:
            raise dc.ShapeError('dictionary', self.keys.shape, self.values.shape,
                                detail="keys and values must be matrices")
        if self.keys.shape[0] < 1 or self.keys.shape[0] != self.values.shape[0]:
            raise dc.ShapeError('dictionary', self.keys.shape, self.values.shape,
                                detail="keys and values need the same positive row count")
        if self.metric not in METRICS:
            raise ValueError(f"Unknown similarity metric: {self.metric}")
        if self.value_mode not in VALUE_MODES:
            raise ValueError(f"Unknown value mode: {self.value_mode}")
        if not self.gamma > 0:
            raise ValueError(f"Temperature gamma must be positive, got {self.gamma}")

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def key_dim(self) -> int:
        return self.keys.shape[1]

    @property
    def value_dim(self) -> int:
        return self.values.shape[1]

    def value_targets(self) -> Tensor:
        """Targets used by the inner loss: softmax(v_j) rows or raw v_j."""
        if self.value_mode == 'soft_label':
            return dc.softmax(self.values, axis=-1)
        return self.values

    def entry_classes(self) -> np.ndarray:
        return np.argmax(self.values.data, axis=-1)


def init_dictionary(size: int, key_dim: int, value_dim: int, seed: int,
                    std: float = 0.1, metric: str = 'cosine', gamma: float = 5.0,
                    value_mode: str = 'soft_label',
                    value_range: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> NeighborDictionary:
    """Sample a dictionary: keys ~ N(0, std); values ~ N(0, std) or uniform over ``value_range``."""
    if min(size, key_dim, value_dim) < 1:
        raise ValueError(f"Dictionary dimensions must be positive, got S={size}, m={key_dim}, n_o={value_dim}")
    rng = np.random.default_rng(seed)
    keys = rng.normal(0.0, std, size=(size, key_dim))
    if value_range is None:
        values = rng.normal(0.0, std, size=(size, value_dim))
    else:
        low, high = (np.broadcast_to(np.asarray(v, dtype=np.float64), (value_dim,)) for v in value_range)
        values = rng.uniform(low, high, size=(size, value_dim))
    logger.debug("Initialized dictionary S=%d m=%d n_o=%d (%s, gamma=%s)", size, key_dim, value_dim, metric, gamma)
    return NeighborDictionary(Tensor(keys, requires_grad=True), Tensor(values, requires_grad=True),
                              metric=metric, gamma=gamma, value_mode=value_mode)


def similarities(queries: Tensor, keys: Tensor, metric: str) -> Tensor:
    """B x S similarity scores: negative Euclidean distance or cosine similarity."""
    if queries.shape[-1] != keys.shape[-1]:
        raise dc.ShapeError('attend', queries.shape, keys.shape, detail="query and key dimensions differ")
    if metric == 'cosine':
        return dc.matmul(dc.normalize(queries, axis=-1), dc.swapaxes(dc.normalize(keys, axis=-1)))
    if metric == 'euclidean':
        diff = dc.reshape(queries, (queries.shape[0], 1, queries.shape[1])) - keys
        return dc.neg(dc.norm(diff, axis=-1))
    raise ValueError(f"Unknown similarity metric: {metric}")


def attend(query, dictionary: NeighborDictionary) -> Tensor:
    """Attention weights of one query (m,) or a batch (B, m) over all S entries."""
    query = dc.as_tensor(query)
    single = query.ndim == 1
    queries = dc.reshape(query, (1, query.shape[0])) if single else query
    logits = dc.scale(similarities(queries, dictionary.keys, dictionary.metric), dictionary.gamma)
    weights = dc.softmax(logits, axis=-1)
    return dc.reshape(weights, (dictionary.size,)) if single else weights


def nearest_dataset_points(dictionary: NeighborDictionary, entry_index: int,
                           features: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k dataset rows most cosine-similar to key ``entry_index``.

    Ordered by descending similarity, ties broken by the lower row index.
    Zero-norm rows score a similarity of 0.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("nearest_dataset_points needs a non-empty feature matrix")
    if not 0 <= entry_index < dictionary.size:
        raise IndexError(f"entry index {entry_index} out of range for S={dictionary.size}")
    if not 1 <= k <= features.shape[0]:
        raise ValueError(f"k={k} must be between 1 and the dataset size {features.shape[0]}")
    key = dictionary.keys.data[entry_index]
    key_norm = np.linalg.norm(key)
    if key_norm == 0:
        raise dc.ZeroNormError(f"dictionary key {entry_index} has zero norm")
    row_norms = np.linalg.norm(features, axis=1)
    safe = np.where(row_norms == 0, 1.0, row_norms)
    sims = np.where(row_norms == 0, 0.0, features @ key / (safe * key_norm))
    return np.argsort(-sims, kind='stable')[:k]
