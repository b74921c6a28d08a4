"""Outer-loop optimizers: AdamW with decoupled weight decay, and SGD."""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np

from .diffcore import Tensor

logger = logging.getLogger('metaneighbors.optim')


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


def _check_finite(grads: Sequence[np.ndarray], where: str = "gradient"):
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite {where} in parameter {i} (shape {np.shape(g)})")


@dataclass
class AdamWState:
    learning_rate: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay: List[bool] = field(default_factory=list)   # per-parameter; empty means all
    step: int = 0
    exp_avg: List[np.ndarray] = field(default_factory=list)
    exp_avg_sq: List[np.ndarray] = field(default_factory=list)


def adamw_step(state: AdamWState, params: Sequence[np.ndarray],
               grads: Sequence[np.ndarray]) -> List[np.ndarray]:
    """p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    _check_finite(grads)
    if not state.exp_avg:
        state.exp_avg = [np.zeros_like(p) for p in params]
        state.exp_avg_sq = [np.zeros_like(p) for p in params]
    beta1, beta2 = state.betas
    state.step += 1
    bias_correction1 = 1 - beta1 ** state.step
    bias_correction2 = 1 - beta2 ** state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"parameter {i} has shape {np.shape(p)} but gradient {np.shape(g)}")
        m = beta1 * state.exp_avg[i] + (1 - beta1) * g
        v = beta2 * state.exp_avg_sq[i] + (1 - beta2) * g * g
        state.exp_avg[i], state.exp_avg_sq[i] = m, v
        m_hat = m / bias_correction1
        v_hat = v / bias_correction2
        decay = state.weight_decay if (not state.decay or state.decay[i]) else 0.0
        updated.append(p - state.learning_rate * (m_hat / (np.sqrt(v_hat) + state.eps))
                       - state.learning_rate * decay * p)
    return updated


@dataclass
class SGDState:
    learning_rate: float = 0.1
    momentum: float = 0.0
    buffers: List[Optional[np.ndarray]] = field(default_factory=list)


def sgd_step(state: SGDState, params: Sequence[np.ndarray],
             grads: Sequence[np.ndarray]) -> List[np.ndarray]:
    """p <- p - lr * g, with heavy-ball momentum buffers when momentum > 0."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    _check_finite(grads)
    if not state.buffers:
        state.buffers = [None] * len(params)
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.momentum:
            buf = g if state.buffers[i] is None else state.momentum * state.buffers[i] + g
            state.buffers[i] = buf
            g = buf
        updated.append(p - state.learning_rate * g)
    return updated


class Optimizer(ABC):
    """Owns optimizer state and updates Tensor parameters in place."""

    def __init__(self, params: Sequence[Tensor]):
        self.params = list(params)
        self.logger = logging.getLogger(f'metaneighbors.{self.__class__.__name__}')

    @property
    @abstractmethod
    def learning_rate(self) -> float:
        pass

    @learning_rate.setter
    @abstractmethod
    def learning_rate(self, value: float):
        pass

    @abstractmethod
    def _update(self, arrays: List[np.ndarray], grads: List[np.ndarray]) -> List[np.ndarray]:
        pass

    def step(self, grads: Sequence[np.ndarray]):
        updated = self._update([p.data for p in self.params], [np.asarray(g) for g in grads])
        for p, new in zip(self.params, updated):
            p.data = new


class AdamW(Optimizer):

    def __init__(self, params, learning_rate=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, decay: Optional[Sequence[bool]] = None):
        super().__init__(params)
        self.state = AdamWState(learning_rate=learning_rate, betas=tuple(betas), eps=eps,
                                weight_decay=weight_decay, decay=list(decay) if decay else [])

    @property
    def learning_rate(self):
        return self.state.learning_rate

    @learning_rate.setter
    def learning_rate(self, value):
        self.state.learning_rate = value

    def _update(self, arrays, grads):
        return adamw_step(self.state, arrays, grads)


class SGD(Optimizer):

    def __init__(self, params, learning_rate=0.1, momentum=0.0):
        super().__init__(params)
        self.state = SGDState(learning_rate=learning_rate, momentum=momentum)

    @property
    def learning_rate(self):
        return self.state.learning_rate

    @learning_rate.setter
    def learning_rate(self, value):
        self.state.learning_rate = value

    def _update(self, arrays, grads):
        return sgd_step(self.state, arrays, grads)


def create_optimizer(config, params: Sequence[Tensor], decay: Optional[Sequence[bool]] = None) -> Optimizer:
    """Build the optimizer named by an ``OptimizerConfig``."""
    if config.kind == 'adamw':
        return AdamW(params, learning_rate=config.learning_rate, betas=config.betas,
                     eps=config.eps, weight_decay=config.weight_decay, decay=decay)
    elif config.kind == 'sgd':
        return SGD(params, learning_rate=config.learning_rate, momentum=config.momentum)
    else:
        raise ValueError(f"Unknown optimizer: {config.kind}")


def step_drop_schedule(base_lr: float, epoch: int, drop_epoch: Optional[int], factor: float = 0.1) -> float:
    """Constant learning rate, multiplied once by ``factor`` from ``drop_epoch`` on."""
    if drop_epoch is not None and epoch >= drop_epoch:
        return base_lr * factor
    return base_lr
