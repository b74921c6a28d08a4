"""Exact k-nearest-neighbors baselines and the constant-estimator view of kNN."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .optim import SGD

logger = logging.getLogger('metaneighbors.knn')


class NeighborhoodError(ValueError):
    """Empty neighborhood or more neighbors requested than available."""


@dataclass
class Neighborhood:
    """The k retrieved training pairs (eta_j, zeta_j) of one query."""
    inputs: np.ndarray    # k x d
    labels: np.ndarray    # k x n_o
    indices: np.ndarray   # rows in the training set

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim == 1:
            self.labels = self.labels.reshape(-1, 1)
        if self.labels.shape[0] == 0:
            raise NeighborhoodError("a neighborhood needs at least one neighbor")

    def __len__(self):
        return self.labels.shape[0]


def _distances(query: np.ndarray, inputs: np.ndarray, metric: str) -> np.ndarray:
    if metric == 'euclidean':
        diff = inputs - query
        return np.sqrt(np.sum(diff * diff, axis=1))
    if metric == 'cosine':
        q_norm = np.linalg.norm(query)
        row_norms = np.linalg.norm(inputs, axis=1)
        if q_norm == 0 or np.any(row_norms == 0):
            raise dc.ZeroNormError("cosine kNN needs nonzero query and training rows")
        return 1.0 - inputs @ query / (row_norms * q_norm)
    raise ValueError(f"Unknown metric: {metric}")


def knn_search(query, train_inputs: np.ndarray, train_labels: np.ndarray, k: int,
               metric: str = 'euclidean', exclude_query: bool = True,
               exclude_index: Optional[int] = None) -> Neighborhood:
    """The k training rows closest to ``query``, nearest first, ties by lower index.

    Rows identical to the query (and ``exclude_index``) are never returned.
    """
    query = np.asarray(query, dtype=np.float64)
    train_inputs = np.asarray(train_inputs, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.float64)
    if train_labels.ndim == 1:
        train_labels = train_labels.reshape(-1, 1)
    candidates = np.ones(train_inputs.shape[0], dtype=bool)
    if exclude_query:
        candidates &= ~np.all(train_inputs == query, axis=1)
    if exclude_index is not None:
        candidates[exclude_index] = False
    available = np.flatnonzero(candidates)
    if k < 1 or k > available.size:
        raise NeighborhoodError(f"k={k} neighbors requested but {available.size} training rows available")
    dist = _distances(query, train_inputs[available], metric)
    chosen = available[np.argsort(dist, kind='stable')[:k]]
    return Neighborhood(train_inputs[chosen], train_labels[chosen], chosen)


def knn_predict(neighborhood: Neighborhood, task: str = 'regression') -> np.ndarray:
    """Average of the neighbor responses.

    For classification with one-hot labels this is the neighbor label
    distribution; its argmax is the majority class.
    """
    if task not in ('regression', 'classification'):
        raise ValueError(f"Unknown task: {task}")
    return np.mean(neighborhood.labels, axis=0)


def constant_estimator_solution(neighborhood: Neighborhood) -> np.ndarray:
    """Minimizer C of (1/k) sum_j (C - zeta_j)^2, i.e. the neighbor mean."""
    return np.mean(neighborhood.labels, axis=0)


def fit_constant_estimator(neighborhood: Neighborhood, learning_rate: float = 0.25,
                           steps: int = 200, tol: float = 1e-14) -> np.ndarray:
    """Minimize the constant-estimator multi-task loss by gradient descent from C = 0."""
    targets = Tensor(neighborhood.labels)
    constant = Tensor(np.zeros(neighborhood.labels.shape[1]), requires_grad=True)
    optimizer = SGD([constant], learning_rate=learning_rate)
    for step in range(steps):
        residual = dc.sub(constant, targets)
        loss = dc.mean(dc.sum(dc.mul(residual, residual), axis=-1))
        grad, = dc.gradient(loss, [constant])
        if np.max(np.abs(grad.data)) < tol:
            logger.debug("constant estimator converged after %d steps", step)
            break
        optimizer.step([grad.data])
    return constant.data.copy()


class KNNBaseline:
    """Exact kNN regressor / classifier over a stored training set."""

    def __init__(self, k: int, metric: str = 'euclidean', task: str = 'regression'):
        self.k = k
        self.metric = metric
        self.task = task
        self.train_inputs = None
        self.train_labels = None

    def fit(self, inputs: np.ndarray, labels: np.ndarray) -> 'KNNBaseline':
        self.train_inputs = np.asarray(inputs, dtype=np.float64)
        self.train_labels = np.asarray(labels, dtype=np.float64)
        return self

    def predict(self, inputs: np.ndarray, exclude_query: bool = False) -> np.ndarray:
        if self.train_inputs is None:
            raise RuntimeError("KNNBaseline.predict called before fit")
        return np.stack([
            knn_predict(knn_search(x, self.train_inputs, self.train_labels, self.k,
                                   metric=self.metric, exclude_query=exclude_query), self.task)
            for x in np.asarray(inputs, dtype=np.float64)
        ])


def induction_accuracy(train_features: np.ndarray, train_classes: np.ndarray,
                       test_features: np.ndarray, test_classes: np.ndarray,
                       k: int = 5, metric: str = 'cosine') -> float:
    """kNN classification accuracy of arbitrary embeddings (features or attention vectors)."""
    train_classes = np.asarray(train_classes, dtype=int)
    n_classes = int(max(train_classes.max(), np.max(test_classes))) + 1
    labels = np.eye(n_classes)[train_classes]
    model = KNNBaseline(k, metric=metric, task='classification').fit(train_features, labels)
    predicted = np.argmax(model.predict(test_features), axis=1)
    return float(np.mean(predicted == np.asarray(test_classes, dtype=int)))
