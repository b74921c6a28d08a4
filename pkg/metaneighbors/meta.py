"""Inner-loop fine-tuning against the dictionary and outer-loop meta-training.

Per-query adaptation is batched: phi is broadcast to B copies, and because
query b's inner loss depends only on copy b, one gradient of the summed inner
losses yields the B independent per-query gradients.
"""

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .dictionary import NeighborDictionary, attend, init_dictionary
from .estimator import MLP, Head
from .knn import Neighborhood, NeighborhoodError
from .optim import DivergenceError, create_optimizer, step_drop_schedule
from .records import MetricsRecord
from .tasks import Task, create_task

logger = logging.getLogger('metaneighbors.meta')

METHODS = ('meta_neighborhoods', 'vanilla')
ALPHA_MODES = ('scalar', 'diagonal')
GROUP_ORDER = ('theta', 'phi', 'xi', 'dict_keys', 'dict_values', 'alpha', 'tau', 'xi_tau')


@dataclass
class InnerLearningRate:
    """Learnable inner step size: one scalar, or one value per element of phi."""
    mode: str
    values: List[Tensor]

    def __post_init__(self):
        if self.mode not in ALPHA_MODES:
            raise ValueError(f"Unknown inner learning rate mode: {self.mode}")
        if self.mode == 'scalar' and (len(self.values) != 1 or self.values[0].size != 1):
            raise ValueError("scalar inner learning rate needs exactly one value")

    @classmethod
    def create(cls, mode: str, phi_shapes: Sequence[Tuple[int, ...]], init: float = 0.1) -> 'InnerLearningRate':
        if mode == 'scalar':
            return cls(mode, [Tensor(np.array(init), requires_grad=True)])
        return cls(mode, [Tensor(np.full(shape, init), requires_grad=True) for shape in phi_shapes])

    @property
    def count(self) -> int:
        return int(np.sum([v.size for v in self.values]))

    def for_param(self, i: int) -> Tensor:
        return self.values[0] if self.mode == 'scalar' else self.values[i]


@dataclass
class TaskBatch:
    inputs: np.ndarray   # B x d
    labels: np.ndarray   # B x n_o

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.inputs.shape[0] < 1 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"batch inputs {self.inputs.shape} and labels {self.labels.shape} do not align")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.labels))):
            raise ValueError("batch contains non-finite values")

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class MetaModel:
    """All parameter groups {theta, phi, xi, M, alpha, tau} plus hyperparameters."""
    task: str
    head: Head
    phi: List[Tensor]
    dictionary: NeighborDictionary
    alpha: InnerLearningRate
    extractor: Optional[MLP] = None
    theta: List[Tensor] = field(default_factory=list)
    xi: List[Tensor] = field(default_factory=list)
    tau: Optional[Tensor] = None
    xi_tau: Optional[Tensor] = None
    aux_weight: float = 0.0
    inner_steps: int = 1
    method: str = 'meta_neighborhoods'
    objective: Task = field(init=False, repr=False)

    def __post_init__(self):
        self.objective = create_task(self.task)
        if self.method not in METHODS:
            raise ValueError(f"Unknown method: {self.method}")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be at least 1, got {self.inner_steps}")
        if self.aux_weight < 0:
            raise ValueError(f"aux_weight must be nonnegative, got {self.aux_weight}")
        shapes = [tuple(s) for s in self.head.param_shapes()]
        if [p.shape for p in self.phi] != shapes:
            raise dc.ShapeError('model', *(p.shape for p in self.phi), detail="phi does not match the head")
        if self.xi and [p.shape for p in self.xi] != shapes:
            raise dc.ShapeError('model', *(p.shape for p in self.xi), detail="xi and phi shapes differ")
        if self.alpha.mode == 'diagonal' and [v.shape for v in self.alpha.values] != shapes:
            raise ValueError("diagonal inner learning rate must match phi element for element")
        if self.extractor is not None and self.extractor.output_dim != self.head.input_dim:
            raise ValueError(f"extractor width {self.extractor.output_dim} does not feed head input {self.head.input_dim}")
        if self.dictionary.key_dim != self.head.input_dim:
            raise ValueError(f"dictionary keys have dimension {self.dictionary.key_dim}, "
                             f"embeddings have {self.head.input_dim}")
        if self.dictionary.value_dim != self.head.output_dim:
            raise ValueError(f"dictionary values have dimension {self.dictionary.value_dim}, "
                             f"head outputs {self.head.output_dim}")
        if self.head.output == 'cosine' and self.tau is None:
            raise ValueError("cosine head needs tau")

    @property
    def input_dim(self) -> int:
        return self.extractor.input_dim if self.extractor else self.head.input_dim

    def embed(self, inputs) -> Tensor:
        """z = mu_theta(x), or x itself without an extractor."""
        if self.extractor is None:
            return dc.as_tensor(inputs)
        return self.extractor.forward(self.theta, inputs)

    def parameter_groups(self) -> 'OrderedDict[str, List[Tensor]]':
        groups = OrderedDict()
        groups['theta'] = list(self.theta)
        groups['phi'] = list(self.phi)
        if self.method == 'meta_neighborhoods':
            groups['xi'] = list(self.xi)
            groups['dict_keys'] = [self.dictionary.keys]
            groups['dict_values'] = [self.dictionary.values]
            groups['alpha'] = list(self.alpha.values)
        groups['tau'] = [self.tau] if self.tau is not None else []
        if self.method == 'meta_neighborhoods' and self.xi_tau is not None and self.xi_tau is not self.tau:
            groups['xi_tau'] = [self.xi_tau]
        return OrderedDict((k, v) for k, v in groups.items() if v)

    def with_parameters(self, groups: Dict[str, List[Tensor]]) -> 'MetaModel':
        """Copy of the model with the given groups swapped in."""
        shared_tau = self.xi_tau is not None and self.xi_tau is self.tau
        tau = groups['tau'][0] if 'tau' in groups else self.tau
        if 'xi_tau' in groups:
            xi_tau = groups['xi_tau'][0]
        else:
            xi_tau = tau if shared_tau else self.xi_tau
        dictionary = replace(self.dictionary,
                             keys=groups.get('dict_keys', [self.dictionary.keys])[0],
                             values=groups.get('dict_values', [self.dictionary.values])[0])
        return replace(self,
                       theta=list(groups.get('theta', self.theta)),
                       phi=list(groups.get('phi', self.phi)),
                       xi=list(groups.get('xi', self.xi)),
                       dictionary=dictionary,
                       alpha=replace(self.alpha, values=list(groups.get('alpha', self.alpha.values))),
                       tau=tau, xi_tau=xi_tau)

    def frozen(self) -> 'MetaModel':
        """A view sharing parameter arrays but recording no gradients for them."""
        groups = self.all_groups()
        return self.with_parameters({k: [t.detach() for t in v] for k, v in groups.items()})

    def all_groups(self):
        groups = OrderedDict(theta=self.theta, phi=self.phi, xi=self.xi,
                             dict_keys=[self.dictionary.keys], dict_values=[self.dictionary.values],
                             alpha=self.alpha.values)
        if self.tau is not None:
            groups['tau'] = [self.tau]
        if self.xi_tau is not None and self.xi_tau is not self.tau:
            groups['xi_tau'] = [self.xi_tau]
        return OrderedDict((k, list(v)) for k, v in groups.items() if v)

    def snapshot(self) -> Dict[str, List[np.ndarray]]:
        return {k: [t.data.copy() for t in v] for k, v in self.all_groups().items()}

    def restore(self, snapshot: Dict[str, List[np.ndarray]]):
        for name, tensors in self.all_groups().items():
            for tensor, data in zip(tensors, snapshot[name]):
                tensor.data = data.copy()


def build_model(config, task: str, input_dim: int, output_dim: int, seed: int,
                labels: Optional[np.ndarray] = None) -> MetaModel:
    """Initialize a model from a ``ModelConfig``."""
    rng = np.random.default_rng(seed)
    objective = create_task(task)
    extractor, theta = None, []
    if config.extractor:
        extractor = MLP((input_dim,) + tuple(config.extractor),
                        final_relu=config.extractor_final_relu and config.head_output != 'cosine')
        theta = extractor.init(rng)
    embed_dim = extractor.output_dim if extractor else input_dim
    head = Head(embed_dim, output_dim, tuple(config.head_hidden), config.head_output)
    phi = head.init(rng)
    xi = head.init(rng) if extractor is not None else []
    tau = xi_tau = None
    if head.output == 'cosine':
        tau = Tensor(np.array(config.tau_init), requires_grad=True)
        if xi:
            xi_tau = tau if config.aux_tau == 'shared' else Tensor(np.array(config.tau_init), requires_grad=True)
    dictionary = init_dictionary(config.dictionary_size, embed_dim, output_dim,
                                 seed=int(rng.integers(2 ** 31)), std=config.init_std,
                                 metric=config.metric, gamma=config.gamma,
                                 value_mode=config.value_mode or objective.default_value_mode,
                                 value_range=objective.value_range(labels))
    alpha = InnerLearningRate.create(config.alpha_mode, head.param_shapes(), config.alpha_init)
    model = MetaModel(task=task, head=head, phi=phi, dictionary=dictionary, alpha=alpha,
                      extractor=extractor, theta=theta, xi=xi, tau=tau, xi_tau=xi_tau,
                      aux_weight=config.aux_weight, inner_steps=config.inner_steps, method=config.method)
    logger.info("Built %s model: head %s, S=%d, gamma=%s, metric=%s, alpha=%s",
                model.method, head, dictionary.size, dictionary.gamma, dictionary.metric, alpha.mode)
    return model


# --- inner loop -------------------------------------------------------------

def _per_query(params: Sequence[Tensor], batch: int) -> List[Tensor]:
    """B copies of each parameter; differentiable back to the originals when they track gradients."""
    copies = []
    for p in params:
        if p.requires_grad and dc.is_grad_enabled():
            copies.append(dc.broadcast_to(dc.reshape(p, (1,) + p.shape), (batch,) + p.shape))
        else:
            copies.append(Tensor(np.broadcast_to(p.data, (batch,) + p.shape).copy(), requires_grad=True))
    return copies


def inner_loss(model: MetaModel, query, phi: Optional[Sequence[Tensor]] = None) -> Tensor:
    """sum_j w(z, k_j) L(f_phi(k_j), v_j) for one query (scalar) or a batch (B,).

    ``phi`` may carry a leading per-query axis matching the batch.
    """
    phi = model.phi if phi is None else phi
    weights = attend(query, model.dictionary)
    outputs = model.head.forward(phi, model.dictionary.keys, model.tau)
    per_entry = model.objective.loss(outputs, model.dictionary.value_targets())
    return dc.sum(dc.mul(weights, per_entry), axis=-1)


def inner_loss_from_neighbors(model: MetaModel, neighborhood: Neighborhood,
                              phi: Optional[Sequence[Tensor]] = None) -> Tensor:
    """(1/k) sum_j L(f_phi(eta_j), zeta_j) over retrieved training neighbors."""
    if len(neighborhood) < 1:
        raise NeighborhoodError("empty neighborhood")
    phi = model.phi if phi is None else phi
    outputs = model.head.forward(phi, model.embed(neighborhood.inputs), model.tau)
    return dc.mean(model.objective.loss(outputs, neighborhood.labels))


def _descend(model: MetaModel, params: List[Tensor], loss_fn: Callable[[List[Tensor]], Tensor],
             create_graph: bool) -> List[Tensor]:
    # the inner gradient is always taken, even when the caller records nothing
    create_graph = create_graph and dc.is_grad_enabled()
    if create_graph:
        params = [p if p.requires_grad else Tensor(p.data, requires_grad=True) for p in params]
    else:
        params = [Tensor(p.data, requires_grad=True) for p in params]
    for _ in range(model.inner_steps):
        with dc.enable_grad():
            grads = dc.gradient(loss_fn(params), params, create_graph=create_graph)
        if create_graph:
            params = [dc.sub(p, dc.mul(model.alpha.for_param(i), g)) for i, (p, g) in enumerate(zip(params, grads))]
        else:
            with dc.no_grad():
                stepped = [dc.sub(p, dc.mul(model.alpha.for_param(i), g))
                           for i, (p, g) in enumerate(zip(params, grads))]
            params = [Tensor(s.data, requires_grad=True) for s in stepped]
    return params


def fine_tune(model: MetaModel, query, create_graph: bool = True) -> List[Tensor]:
    """phi_i after ``inner_steps`` steps of phi <- phi - alpha * grad L_inner.

    A single query (m,) gives phi_i with phi's shapes; a batch (B, m) gives
    per-query parameters with a leading axis B. With ``create_graph`` the
    result is differentiable w.r.t. phi, the dictionary, alpha and theta.
    """
    query = dc.as_tensor(query)
    single = query.ndim == 1
    queries = dc.reshape(query, (1, query.shape[0])) if single else query
    phi_b = _per_query(model.phi, queries.shape[0])
    phi_b = _descend(model, phi_b, lambda params: dc.sum(inner_loss(model, queries, params)), create_graph)
    return [dc.index(p, 0) for p in phi_b] if single else phi_b


def fine_tune_from_neighbors(model: MetaModel, neighborhood: Neighborhood,
                             create_graph: bool = True) -> List[Tensor]:
    """Retrieval variant: adapt phi on training-set neighbors instead of the dictionary."""
    return _descend(model, list(model.phi), lambda params: inner_loss_from_neighbors(model, neighborhood, params),
                    create_graph)


# --- outer loop -------------------------------------------------------------

def _query_outputs(model: MetaModel, params: Sequence[Tensor], z: Tensor) -> Tensor:
    """Evaluate per-query parameters on their own query: (B, m) -> (B, n_o)."""
    batch, width = z.shape
    out = model.head.forward(params, dc.reshape(z, (batch, 1, width)), model.tau)
    return dc.reshape(out, (batch, out.shape[-1]))


def _adapted_outputs(model: MetaModel, z: Tensor, create_graph: bool = True) -> Tensor:
    if model.method == 'vanilla':
        params = _per_query(model.phi, z.shape[0])
    else:
        params = fine_tune(model, z, create_graph=create_graph)
    return _query_outputs(model, params, z)


def outer_loss(model: MetaModel, batch: TaskBatch) -> Tensor:
    """(1/B) sum_i L(f_{phi_i}(z_i), y_i)."""
    z = model.embed(batch.inputs)
    phi_i = fine_tune(model, z)
    return dc.mean(model.objective.loss(_query_outputs(model, phi_i, z), batch.labels))


def vanilla_loss(model: MetaModel, batch: TaskBatch) -> Tensor:
    """Batch loss of the un-tuned head f_phi."""
    z = model.embed(batch.inputs)
    outputs = _query_outputs(model, _per_query(model.phi, z.shape[0]), z)
    return dc.mean(model.objective.loss(outputs, batch.labels))


def aux_loss(model: MetaModel, batch: TaskBatch, z: Optional[Tensor] = None) -> Tensor:
    """(1/B) sum_i L(f_xi(mu_theta(x_i)), y_i)."""
    if model.extractor is None or not model.xi:
        raise ValueError("auxiliary co-training needs a feature extractor and an auxiliary head")
    z = model.embed(batch.inputs) if z is None else z
    return dc.mean(model.objective.loss(model.head.forward(model.xi, z, model.xi_tau), batch.labels))


def total_loss(model: MetaModel, batch: TaskBatch) -> Tensor:
    """L_outer + lambda * L_aux."""
    loss, _ = _objective(model, batch, require_aux=True)
    return loss


def _objective(model: MetaModel, batch: TaskBatch, require_aux: bool = False) -> Tuple[Tensor, Tensor]:
    z = model.embed(batch.inputs)
    outputs = _adapted_outputs(model, z)
    loss = dc.mean(model.objective.loss(outputs, batch.labels))
    if model.method == 'vanilla':
        return loss, outputs
    if require_aux and model.extractor is None:
        raise ValueError("total_loss needs a feature extractor")
    if model.extractor is not None and model.xi and model.aux_weight > 0:
        loss = dc.add(loss, dc.scale(aux_loss(model, batch, z), model.aux_weight))
    return loss, outputs


def batch_gradients(model: MetaModel, batch: TaskBatch, params: Sequence[Tensor],
                    chunk_size: Optional[int] = None) -> Tuple[float, List[np.ndarray], np.ndarray]:
    """Loss, gradients and outputs of one batch, accumulated over chunks of queries."""
    size = len(batch)
    chunk = chunk_size or size
    loss_value, outputs = 0.0, []
    grads = [np.zeros(p.shape) for p in params]
    for start in range(0, size, chunk):
        part = TaskBatch(batch.inputs[start:start + chunk], batch.labels[start:start + chunk])
        loss, out = _objective(model, part)
        weight = len(part) / size
        for acc, g in zip(grads, dc.gradient(loss, params)):
            acc += weight * g.data
        loss_value += weight * loss.item()
        outputs.append(out.data)
    return loss_value, grads, np.concatenate(outputs)


# --- inference --------------------------------------------------------------

def predict_outputs(model: MetaModel, inputs: np.ndarray, chunk_size: int = 64) -> np.ndarray:
    """Head outputs after per-query fine-tuning; parameters are left untouched."""
    inputs = np.asarray(inputs, dtype=np.float64)
    frozen = model.frozen()
    outputs = []
    for start in range(0, inputs.shape[0], chunk_size):
        with dc.no_grad():
            z = frozen.embed(inputs[start:start + chunk_size])
        out = _adapted_outputs(frozen, z, create_graph=False)
        outputs.append(out.data)
    if not outputs:
        return np.zeros((0, model.head.output_dim))
    return np.concatenate(outputs)


def predict(model: MetaModel, inputs: np.ndarray, chunk_size: int = 64) -> np.ndarray:
    """Class probabilities (classification) or values (regression)."""
    with dc.no_grad():
        return model.objective.activate(Tensor(predict_outputs(model, inputs, chunk_size))).data


def evaluate(model: MetaModel, inputs: np.ndarray, labels: np.ndarray, chunk_size: int = 64) -> Dict[str, float]:
    outputs = predict_outputs(model, inputs, chunk_size)
    with dc.no_grad():
        loss = dc.mean(model.objective.loss(Tensor(outputs), labels)).item()
        predictions = model.objective.activate(Tensor(outputs)).data
    return {'loss': loss, **model.objective.score(predictions, labels)}


def similarity_shift_report(model: MetaModel, inputs: np.ndarray, labels: np.ndarray,
                            chunk_size: int = 64) -> np.ndarray:
    """Per sample (before, after): cos(z_i, w_{y_i}) under phi and under phi_i."""
    if model.head.output != 'cosine':
        raise ValueError("similarity shift needs a cosine output layer")
    inputs = np.asarray(inputs, dtype=np.float64)
    classes = np.argmax(labels, axis=1)
    frozen = model.frozen()
    rows = []
    for start in range(0, inputs.shape[0], chunk_size):
        with dc.no_grad():
            z = frozen.embed(inputs[start:start + chunk_size])
        size = z.shape[0]
        before = _class_cosine(frozen, _per_query(frozen.phi, size), z, classes[start:start + chunk_size])
        after = _class_cosine(frozen, fine_tune(frozen, z, create_graph=False), z, classes[start:start + chunk_size])
        rows.append(np.stack([before, after], axis=1))
    return np.concatenate(rows) if rows else np.zeros((0, 2))


def _class_cosine(model: MetaModel, params: Sequence[Tensor], z: Tensor, classes: np.ndarray) -> np.ndarray:
    with dc.no_grad():
        size, width = z.shape
        h = model.head.penultimate(params, dc.reshape(z, (size, 1, width))).data[:, 0, :]
        w = model.head.output_weight(params).data[np.arange(size), classes]
    return np.sum(h * w, axis=1) / (np.linalg.norm(h, axis=1) * np.linalg.norm(w, axis=1))


def attention_vectors(model: MetaModel, inputs: np.ndarray) -> np.ndarray:
    """Attention weights of each input over all dictionary entries (N x S)."""
    with dc.no_grad():
        return attend(model.frozen().embed(np.asarray(inputs, dtype=np.float64)), model.dictionary).data


# --- training ---------------------------------------------------------------

def train(model: MetaModel, dataset, config, validation=None,
          on_step: Optional[Callable[[int, MetaModel], None]] = None) -> Tuple[MetaModel, MetricsRecord]:
    """Meta-train every parameter group with one shared outer optimizer.

    ``config`` is a ``RunConfig``; ``dataset``/``validation`` expose
    ``inputs`` and ``labels``. With ``training.patience`` set and a
    validation set, stops after that many epochs without improvement and
    restores the best-validation parameters.
    """
    training, opt_config = config.training, config.optimizer
    groups = model.parameter_groups()
    params, decay = [], []
    for name, tensors in groups.items():
        params += tensors
        decay += [name not in opt_config.decay_exempt] * len(tensors)
    optimizer = create_optimizer(opt_config, params, decay)
    rng = np.random.default_rng(config.seed)
    record = MetricsRecord(config=config.to_dict() if hasattr(config, 'to_dict') else {})
    has_validation = validation is not None and len(validation) > 0
    if training.patience and not has_validation:
        logger.warning("Early stopping requested without a validation set; training all %d epochs", training.epochs)

    started = time.monotonic()
    best_loss, best_state, stale, iteration = np.inf, None, 0, 0
    for epoch in range(1, training.epochs + 1):
        optimizer.learning_rate = step_drop_schedule(opt_config.learning_rate, epoch,
                                                     opt_config.lr_drop_epoch, opt_config.lr_drop_factor)
        order = rng.permutation(len(dataset))
        total, seen, outputs = 0.0, 0, []
        for start in range(0, order.size, training.batch_size):
            rows = order[start:start + training.batch_size]
            batch = TaskBatch(dataset.inputs[rows], dataset.labels[rows])
            loss_value, grads, batch_outputs = batch_gradients(model, batch, params, training.chunk_size)
            if not np.isfinite(loss_value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, iteration {iteration + 1}")
            optimizer.step(grads)
            iteration += 1
            total += loss_value * len(rows)
            seen += len(rows)
            outputs.append((rows, batch_outputs))
            logger.debug("epoch %d iteration %d loss %.6f", epoch, iteration, loss_value)
            if on_step is not None:
                on_step(iteration, model)

        entry = {'train_loss': total / max(seen, 1), 'learning_rate': optimizer.learning_rate}
        if outputs:
            rows = np.concatenate([r for r, _ in outputs])
            with dc.no_grad():
                predictions = model.objective.activate(Tensor(np.concatenate([o for _, o in outputs]))).data
            for key, value in model.objective.score(predictions, dataset.labels[rows]).items():
                entry[f'train_{key}'] = value
        if has_validation:
            for key, value in evaluate(model, validation.inputs, validation.labels, training.eval_chunk_size).items():
                entry[f'val_{key}'] = value
        record.add_epoch(epoch, **entry)
        logger.info("epoch %d: %s", epoch, ", ".join(f"{k}={v:.5g}" for k, v in entry.items()))

        if training.patience and has_validation:
            if entry['val_loss'] < best_loss:
                best_loss, best_state, stale = entry['val_loss'], model.snapshot(), 0
            else:
                stale += 1
                if stale >= training.patience:
                    logger.info("Validation loss has not improved for %d epochs; stopping at epoch %d",
                                stale, epoch)
                    break

    if best_state is not None:
        model.restore(best_state)
        record.final['best_epoch'] = record.best_epoch()
    record.final['iterations'] = iteration
    record.wall_clock = time.monotonic() - started
    return model, record
