"""Parametric networks: feature extractor, tuned head and auxiliary head.

Parameters live in flat lists of tensors so the inner loop can treat them as
one vector. Heads also accept per-query parameter batches, i.e. every tensor
carrying an extra leading axis of size B, with inputs shaped (B, n, m).
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

logger = logging.getLogger('metaneighbors.estimator')

HEAD_OUTPUTS = ('dot', 'cosine')
TASKS = ('classification', 'regression')


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = dc.matmul(x, dc.swapaxes(weight))
    if bias is None:
        return out
    if bias.ndim > 1:
        bias = dc.reshape(bias, bias.shape[:-1] + (1, bias.shape[-1]))
    return out + bias


def dot_logits(weight: Tensor, bias: Tensor, z: Tensor) -> Tensor:
    """r_j = z^T w_j + b_j."""
    return _rows(lambda rows: linear(rows, weight, bias), z)


def cosine_logits(weight: Tensor, z: Tensor) -> Tensor:
    """r_j = z^T w_j / (|z| |w_j|), each in [-1, 1]."""
    def compute(rows):
        return dc.matmul(dc.normalize(rows, axis=-1), dc.swapaxes(dc.normalize(weight, axis=-1)))
    return _rows(compute, z)


def _rows(fn, x):
    x = dc.as_tensor(x)
    if x.ndim == 1:
        out = fn(dc.reshape(x, (1, x.shape[0])))
        return dc.reshape(out, out.shape[-1:])
    return fn(x)


def _init_weight(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))


@dataclass(frozen=True)
class MLP:
    """Fully connected ReLU network; ``sizes`` lists input, hidden and output widths."""
    sizes: Tuple[int, ...]
    final_relu: bool = False

    def __post_init__(self):
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"MLP needs at least an input and an output width, got {self.sizes}")

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def param_shapes(self) -> List[Tuple[int, ...]]:
        shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            shapes += [(fan_out, fan_in), (fan_out,)]
        return shapes

    def init(self, rng: np.random.Generator) -> List[Tensor]:
        params = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            params.append(Tensor(_init_weight(rng, fan_out, fan_in), requires_grad=True))
            params.append(Tensor(np.zeros(fan_out), requires_grad=True))
        return params

    def forward(self, params: Sequence[Tensor], x) -> Tensor:
        x = dc.as_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise dc.ShapeError('mlp', x.shape, (self.input_dim,), detail="input width")
        h = x
        layers = len(self.sizes) - 1
        for i in range(layers):
            h = _rows(lambda rows: linear(rows, params[2 * i], params[2 * i + 1]), h)
            if i < layers - 1 or self.final_relu:
                h = dc.relu(h)
        return h


def extract_features(extractor: MLP, theta: Sequence[Tensor], x) -> Tensor:
    """z = mu_theta(x)."""
    return extractor.forward(theta, x)


@dataclass(frozen=True)
class Head:
    """Output network f: optional ReLU trunk followed by a dot or cosine layer."""
    input_dim: int
    output_dim: int
    hidden: Tuple[int, ...] = ()
    output: str = 'dot'

    def __post_init__(self):
        if self.output not in HEAD_OUTPUTS:
            raise ValueError(f"Unknown head output layer: {self.output}")

    @property
    def trunk(self) -> Optional[MLP]:
        if not self.hidden:
            return None
        return MLP((self.input_dim,) + tuple(self.hidden), final_relu=True)

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    def param_shapes(self) -> List[Tuple[int, ...]]:
        shapes = self.trunk.param_shapes() if self.trunk else []
        shapes.append((self.output_dim, self.feature_dim))
        if self.output == 'dot':
            shapes.append((self.output_dim,))
        return shapes

    def init(self, rng: np.random.Generator) -> List[Tensor]:
        params = self.trunk.init(rng) if self.trunk else []
        if self.output == 'dot':
            params.append(Tensor(_init_weight(rng, self.output_dim, self.feature_dim), requires_grad=True))
            params.append(Tensor(np.zeros(self.output_dim), requires_grad=True))
        else:
            params.append(Tensor(rng.normal(0.0, 1.0 / np.sqrt(self.feature_dim),
                                            size=(self.output_dim, self.feature_dim)), requires_grad=True))
        return params

    def _split(self, params: Sequence[Tensor]):
        n_trunk = len(self.trunk.param_shapes()) if self.trunk else 0
        return list(params[:n_trunk]), list(params[n_trunk:])

    def penultimate(self, params: Sequence[Tensor], x) -> Tensor:
        """Representation entering the output layer (x itself without a trunk)."""
        x = dc.as_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise dc.ShapeError('head', x.shape, (self.input_dim,), detail="input width")
        trunk_params, _ = self._split(params)
        return self.trunk.forward(trunk_params, x) if self.trunk else x

    def output_weight(self, params: Sequence[Tensor]) -> Tensor:
        return self._split(params)[1][0]

    def forward(self, params: Sequence[Tensor], x, tau: Optional[Tensor] = None) -> Tensor:
        """Logits (classification) or raw outputs (regression)."""
        h = self.penultimate(params, x)
        _, out_params = self._split(params)
        if self.output == 'dot':
            return dot_logits(out_params[0], out_params[1], h)
        if tau is None:
            raise ValueError("cosine head needs a temperature tau")
        return dc.mul(cosine_logits(out_params[0], h), tau)


def supervised_loss(prediction, target, task: str) -> Tensor:
    """Per-sample loss over the last axis.

    classification: -sum_c t_c log p_c against (possibly soft) targets, with
    p clamped at 1e-12 before the log; regression: squared error.
    """
    prediction, target = dc.as_tensor(prediction), dc.as_tensor(target)
    if prediction.shape[-1] != target.shape[-1]:
        raise dc.ShapeError('supervised_loss', prediction.shape, target.shape)
    if task == 'classification':
        log_p = dc.log(dc.clip_min(prediction, dc.PROBABILITY_FLOOR))
        return dc.neg(dc.sum(dc.mul(target, log_p), axis=-1))
    if task == 'regression':
        residual = dc.sub(prediction, target)
        return dc.sum(dc.mul(residual, residual), axis=-1)
    raise ValueError(f"Unknown task: {task}")
