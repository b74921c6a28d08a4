"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every adjoint is written in terms of the same Tensor primitives it
differentiates, so a gradient computed with ``create_graph=True`` is itself
part of the expression graph and can be differentiated again.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger('metaneighbors.diffcore')

PROBABILITY_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        message = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class ZeroNormError(ValueError):
    """Raised when a zero vector is normalized for cosine similarity."""


class GradientError(ValueError):
    """Raised when a gradient is requested from a non-scalar output."""


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, 'enabled', True)


@contextmanager
def _grad_mode(enabled: bool):
    previous = is_grad_enabled()
    _grad_state.enabled = enabled
    try:
        yield
    finally:
        _grad_state.enabled = previous


def no_grad():
    """Context manager that stops graph recording on the current thread."""
    return _grad_mode(False)


def enable_grad():
    """Record graphs again inside a ``no_grad`` block."""
    return _grad_mode(True)


class Node:
    """Record of the primitive that produced a tensor."""

    __slots__ = ('op', 'parents', 'vjp')

    def __init__(self, op: str, parents: Tuple['Tensor', ...], vjp: Callable):
        self.op = op
        self.parents = parents
        # vjp(grad, out, needs) -> one Tensor (or None) per parent
        self.vjp = vjp


class Tensor:
    """Dense float64 array with optional differentiation support."""

    __slots__ = ('data', 'requires_grad', 'node')
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, axis1: int = -1, axis2: int = -2) -> 'Tensor':
        return swapaxes(self, axis1, axis2)

    @property
    def T(self) -> 'Tensor':
        return swapaxes(self, -1, -2)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), vjp)
    return out


def _broadcast_shape(op: str, *tensors: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(*(t.shape for t in tensors))
    except ValueError:
        raise ShapeError(op, *(t.shape for t in tensors)) from None


def _normalize_axis(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


# --- structural primitives -------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError('reshape', x.shape, shape) from None
    in_shape = x.shape
    return _record('reshape', data, (x,), lambda g, out, needs: (reshape(g, in_shape),))


def swapaxes(x, axis1: int = -1, axis2: int = -2) -> Tensor:
    x = as_tensor(x)
    return _record('swapaxes', np.swapaxes(x.data, axis1, axis2), (x,),
                   lambda g, out, needs: (swapaxes(g, axis1, axis2),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError('broadcast_to', x.shape, shape) from None
    in_shape = x.shape
    return _record('broadcast_to', data, (x,), lambda g, out, needs: (sum_to(g, in_shape),))


def sum_to(x, shape) -> Tensor:
    """Sum ``x`` down to ``shape``; the adjoint of broadcasting."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError('sum_to', x.shape, shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, size in enumerate(shape) if size == 1 and x.shape[lead + i] != 1)
    data = x.data.sum(axis=axes, keepdims=True).reshape(shape)
    in_shape = x.shape
    return _record('sum_to', data, (x,), lambda g, out, needs: (broadcast_to(g, in_shape),))


def index(x, idx) -> Tensor:
    x = as_tensor(x)
    in_shape = x.shape
    return _record('index', np.array(x.data[idx], dtype=np.float64), (x,),
                   lambda g, out, needs: (_scatter(g, idx, in_shape),))


def _scatter(g: Tensor, idx, shape) -> Tensor:
    data = np.zeros(shape)
    np.add.at(data, idx, g.data)
    return _record('scatter', data, (g,), lambda gg, out, needs: (index(gg, idx),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError('concat', detail="no operands")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError('concat', *(t.shape for t in tensors)) from None
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g, out, needs):
        grads = []
        for i, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            grads.append(index(g, tuple(sl)))
        return tuple(grads)

    return _record('concat', data, tensors, vjp)


# --- elementwise primitives ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('add', a, b)

    def vjp(g, out, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return _record('add', a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('sub', a, b)

    def vjp(g, out, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)

    return _record('sub', a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('mul', a, b)

    def vjp(g, out, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return _record('mul', a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('div', a, b)

    def vjp(g, out, needs):
        return (sum_to(div(g, b), a.shape) if needs[0] else None,
                sum_to(neg(div(mul(g, out), b)), b.shape) if needs[1] else None)

    return _record('div', a.data / b.data, (a, b), vjp)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _record('neg', -x.data, (x,), lambda g, out, needs: (neg(g),))


def scale(x, factor: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    x = as_tensor(x)
    factor = float(factor)
    return _record('scale', x.data * factor, (x,), lambda g, out, needs: (scale(g, factor),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = Tensor((x.data > 0).astype(np.float64))
    return _record('relu', x.data * mask.data, (x,), lambda g, out, needs: (mul(g, mask),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    return _record('exp', np.exp(x.data), (x,), lambda g, out, needs: (mul(g, out),))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _record('log', np.log(x.data), (x,), lambda g, out, needs: (div(g, x),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    return _record('sqrt', np.sqrt(x.data), (x,),
                   lambda g, out, needs: (div(g, scale(out, 2.0)),))


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    exponent = float(exponent)

    def vjp(g, out, needs):
        return (mul(g, scale(power(x, exponent - 1.0), exponent)),)

    return _record('power', np.power(x.data, exponent), (x,), vjp)


def clip_min(x, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)``; the gradient is zero where clamped."""
    x = as_tensor(x)
    mask = Tensor((x.data > floor).astype(np.float64))
    return _record('clip_min', np.maximum(x.data, floor), (x,),
                   lambda g, out, needs: (mul(g, mask),))


# --- reductions ------------------------------------------------------------

def _keep_shape(shape, axes) -> Tuple[int, ...]:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    in_shape = x.shape
    kept = _keep_shape(in_shape, axes)

    def vjp(g, out, needs):
        return (broadcast_to(reshape(g, kept), in_shape),)

    return _record('sum', x.data.sum(axis=axes, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def norm(x, axis=-1, keepdims: bool = False) -> Tensor:
    """L2 norm over ``axis``. The adjoint treats a zero norm as a zero subgradient."""
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    kept = _keep_shape(x.shape, axes)
    data = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=keepdims))
    guard = Tensor((data == 0).astype(np.float64).reshape(kept))

    def vjp(g, out, needs):
        denom = add(reshape(out, kept), guard)
        return (mul(reshape(g, kept), div(x, denom)),)

    return _record('norm', data, (x,), vjp)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, out, needs):
        inner = sum(mul(g, out), axis=axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    return _record('softmax', data, (x,), vjp)


def normalize(x, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit L2 norm."""
    x = as_tensor(x)
    n = norm(x, axis=axis, keepdims=True)
    if np.any(n.data == 0):
        raise ZeroNormError(f"cannot normalize a zero-norm vector (shape {x.shape}, axis {axis})")
    return div(x, n)


# --- matrix product --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul', a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError('matmul', a.shape, b.shape, detail="batch dimensions") from None

    def vjp(g, out, needs):
        return (sum_to(matmul(g, swapaxes(b)), a.shape) if needs[0] else None,
                sum_to(matmul(swapaxes(a), g), b.shape) if needs[1] else None)

    return _record('matmul', np.matmul(a.data, b.data), (a, b), vjp)


# --- differentiation -------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    """Post-order over differentiable tensors: parents precede children."""
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def gradient(output: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> List[Tensor]:
    """Return d(output)/d(w) for each ``w`` in ``wrt``.

    ``output`` must hold a single element. Tensors in ``wrt`` that the output
    does not depend on get a zero gradient of matching shape. With
    ``create_graph`` the returned gradients are recorded in the graph and can
    be differentiated again.
    """
    if output.size != 1:
        raise GradientError(f"gradient requires a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    targets = {id(t) for t in wrt}

    relevant = {}
    order = []
    if output.requires_grad or id(output) in targets:
        for tensor in _topological_order(output):
            on_path = id(tensor) in targets or (
                tensor.node is not None and any(relevant.get(id(p), False) for p in tensor.node.parents))
            relevant[id(tensor)] = on_path
            if on_path:
                order.append(tensor)

    grads = {}
    if order:
        grads[id(output)] = Tensor(np.ones_like(output.data))
    with _grad_mode(create_graph):
        for tensor in reversed(order):
            g = grads.get(id(tensor)) if id(tensor) in targets else grads.pop(id(tensor), None)
            if g is None or tensor.node is None:
                continue
            parents = tensor.node.parents
            needs = tuple(relevant.get(id(p), False) for p in parents)
            if not any(needs):
                continue
            parent_grads = tensor.node.vjp(g, tensor, needs)
            for parent, pg, need in zip(parents, parent_grads, needs):
                if not need or pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else add(grads[key], pg)

    return [grads.get(id(w), Tensor(np.zeros(w.shape))) for w in wrt]


# --- finite-difference oracle ----------------------------------------------

def numerical_gradient(fn: Callable[[List[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                       eps: float = 1e-5) -> List[np.ndarray]:
    """Central finite differences of a scalar function of several arrays."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    result = []
    with no_grad():
        for i, base in enumerate(arrays):
            grad = np.zeros_like(base)
            flat = grad.reshape(-1)
            for j in range(base.size):
                shifted = [a.copy() for a in arrays]
                shifted[i].reshape(-1)[j] += eps
                plus = fn([Tensor(a) for a in shifted]).item()
                shifted[i].reshape(-1)[j] -= 2 * eps
                minus = fn([Tensor(a) for a in shifted]).item()
                flat[j] = (plus - minus) / (2 * eps)
            result.append(grad)
    return result


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale_ = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), floor)
    return float(diff / scale_)


def check_gradients(fn: Callable[[List[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                    eps: float = 1e-5) -> List[float]:
    """Relative error between ``gradient`` and central differences, per input."""
    params = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    analytic = [g.data for g in gradient(fn(params), params)]
    numeric = numerical_gradient(fn, arrays, eps=eps)
    errors = [relative_error(a, n) for a, n in zip(analytic, numeric)]
    logger.debug("gradient check errors: %s", errors)
    return errors
