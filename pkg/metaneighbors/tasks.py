"""Task-specific behavior: output activation, loss, metrics and value initialization."""

from abc import ABC, abstractmethod
from typing import Dict, Optional, Tuple
import logging

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .estimator import supervised_loss


class Task(ABC):
    """Abstract base class for supervised tasks."""

    name: str = ''
    default_value_mode: str = 'raw'

    def __init__(self):
        self.logger = logging.getLogger(f'metaneighbors.{self.__class__.__name__}')

    @abstractmethod
    def activate(self, outputs: Tensor) -> Tensor:
        """Map head outputs to predictions."""
        pass

    def loss(self, outputs: Tensor, targets) -> Tensor:
        """Per-sample supervised loss of raw head outputs."""
        return supervised_loss(self.activate(outputs), targets, self.name)

    @abstractmethod
    def score(self, predictions: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
        """Summary metrics for a set of predictions."""
        pass

    @abstractmethod
    def value_range(self, labels: Optional[np.ndarray]) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """Range for uniform dictionary value init, or None for Gaussian init."""
        pass

    @property
    @abstractmethod
    def headline_metric(self) -> str:
        pass


class ClassificationTask(Task):
    name = 'classification'
    default_value_mode = 'soft_label'
    headline_metric = 'accuracy'

    def activate(self, outputs: Tensor) -> Tensor:
        return dc.softmax(outputs, axis=-1)

    def score(self, predictions, labels):
        predicted = np.argmax(predictions, axis=-1)
        truth = np.argmax(labels, axis=-1)
        return {'accuracy': float(np.mean(predicted == truth))}

    def value_range(self, labels):
        return None


class RegressionTask(Task):
    name = 'regression'
    default_value_mode = 'raw'
    headline_metric = 'mse'

    def activate(self, outputs: Tensor) -> Tensor:
        return outputs

    def score(self, predictions, labels):
        residual = np.asarray(predictions) - np.asarray(labels)
        return {'mse': float(np.mean(np.sum(residual * residual, axis=-1)))}

    def value_range(self, labels):
        # v_j start uniform over the observed label range
        if labels is None or len(labels) == 0:
            return None
        return labels.min(axis=0), labels.max(axis=0)


def create_task(name: str) -> Task:
    if name == 'classification':
        return ClassificationTask()
    elif name == 'regression':
        return RegressionTask()
    else:
        raise ValueError(f"Unknown task: {name}")
