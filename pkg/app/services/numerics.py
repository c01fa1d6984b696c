"""
Reverse-mode differentiation over 64-bit numpy arrays.

Every operation returns a new ``Tensor`` that remembers its parents and a
closure that pushes the output gradient back to them. ``backward`` walks the
graph in reverse topological order.
"""
import logging
import math
from collections import OrderedDict
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.models.errors import DeterminismError, DimensionError, DomainError, GradientError

logger = logging.getLogger(__name__)

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Tensor:
    """
    A value taking part in gradient computation (data, gradient, requires_grad)
    """
    __slots__ = ('data', 'grad', 'requires_grad', '_parents', '_backward', '__weakref__')

    def __init__(self, data, requires_grad: bool = False, _parents: Tuple['Tensor', ...] = (),
                 _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar for the handful of binary ops used inline
    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __radd__(self, other):
        return add(_as_tensor(other, self.shape), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.shape), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return elementwise_mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> 'Tensor':
        return transpose(self)


class Parameter(Tensor):
    """Trainable tensor with a registry-unique name"""
    __slots__ = ('name',)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward) -> Tensor:
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        logger.error(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        raise DimensionError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def _check_matrix(op: str, x: Tensor) -> None:
    if x.data.ndim != 2:
        raise DimensionError(f"{op}: expected a matrix, got shape {list(x.shape)}")


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape('add', a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a [1 x n] row to every row of an [m x n] matrix"""
    _check_matrix('add_bias', x)
    if bias.shape != (1, x.shape[1]):
        raise DimensionError(f"add_bias: bias shape {list(bias.shape)} does not fit {list(x.shape)}")
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def scale(x: Tensor, factor: float) -> Tensor:
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape('elementwise_mul', a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_matrix('matmul', a)
    _check_matrix('matmul', b)
    if a.shape[1] != b.shape[0]:
        logger.error(f"matmul: inner dimensions differ {a.shape} x {b.shape}")
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    _check_matrix('transpose', x)
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError('concat_rows: nothing to concatenate')
    width = parts[0].shape[1]
    for p in parts:
        _check_matrix('concat_rows', p)
        if p.shape[1] != width:
            raise DimensionError(f"concat_rows: column counts differ ({width} vs {p.shape[1]})")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError('concat_cols: nothing to concatenate')
    height = parts[0].shape[0]
    for p in parts:
        _check_matrix('concat_cols', p)
        if p.shape[0] != height:
            raise DimensionError(f"concat_cols: row counts differ ({height} vs {p.shape[0]})")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _check_matrix('slice_cols', x)
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_cols: [{start}:{stop}] outside {x.shape[1]} columns")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), backward)


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows; the backward scatter-adds so repeated indices accumulate"""
    _check_matrix('take_rows', x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(f"take_rows: index out of range for {x.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx].copy(), (x,), backward)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by ``ids``"""
    return take_rows(table, ids)


def sum_all(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full_like(x.data, float(g)),))


def add_scalars(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    if not terms:
        return Tensor(0.0)
    for t in terms:
        if t.data.size != 1:
            raise DimensionError(f"add_scalars: non-scalar term of shape {list(t.shape)}")
    total = float(sum(t.data.reshape(-1)[0] for t in terms))
    return _make(np.array(total), tuple(terms),
                 lambda g: tuple(np.full_like(t.data, float(g)) for t in terms))


def mean_rows(x: Tensor) -> Tensor:
    """Mean-pool the rows of an [m x n] matrix into [1 x n]"""
    _check_matrix('mean_rows', x)
    m = x.shape[0]
    return _make(x.data.mean(axis=0, keepdims=True), (x,),
                 lambda g: (np.repeat(g / m, m, axis=0),))


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(np.float64)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU"""
    u = x.data
    inner = _SQRT_2_OVER_PI * (u + 0.044715 * u ** 3)
    t = np.tanh(inner)
    out = 0.5 * u * (1.0 + t)

    def backward(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * u ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t ** 2) * d_inner
        return (g * local,)

    return _make(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t ** 2),))


def softmax_rows(x: Tensor) -> Tensor:
    _check_matrix('softmax_rows', x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    _check_matrix('log_softmax_rows', x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), backward)


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over every entry, as a scalar"""
    m = x.data.max()
    e = np.exp(x.data - m)
    total = e.sum()
    out = np.array(m + np.log(total))
    return _make(out, (x,), lambda g: (float(g) * e / total,))


def row_normalize(x: Tensor, epsilon: float = 1e-9) -> Tensor:
    """
    h(X): divide each row by its sum. Rows whose sum is below epsilon come out
    as zeros and pass no gradient back.
    """
    _check_matrix('row_normalize', x)
    if (x.data < 0).any():
        logger.error('row_normalize: negative entry in input')
        raise DomainError('row_normalize: input must be entrywise non-negative')
    sums = x.data.sum(axis=1, keepdims=True)
    live = sums >= epsilon
    safe = np.where(live, sums, 1.0)
    out = np.where(live, x.data / safe, 0.0)

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (np.where(live, (g - dot) / safe, 0.0),)

    return _make(out, (x,), backward)


def layer_norm_rows(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _check_matrix('layer_norm_rows', x)
    n = x.shape[1]
    if gamma.shape != (1, n) or beta.shape != (1, n):
        raise DimensionError(f"layer_norm_rows: gain/shift must be [1 x {n}]")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return (dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True))

    return _make(out, (x, gamma, beta), backward)


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of all entries; zero subgradient at the origin"""
    norm = float(np.sqrt((x.data ** 2).sum()))

    def backward(g):
        if norm == 0.0:
            return (np.zeros_like(x.data),)
        return (float(g) * x.data / norm,)

    return _make(np.array(norm), (x,), backward)


def cross_entropy(logits: Tensor, answer_index: int) -> Tensor:
    """-log softmax(logits)[answer_index] for a [1 x |A|] row"""
    if logits.data.ndim != 2 or logits.shape[0] != 1:
        raise DimensionError(f"cross_entropy: logits must be [1 x |A|], got {list(logits.shape)}")
    n = logits.shape[1]
    if not 0 <= answer_index < n:
        logger.error(f"cross_entropy: answer index {answer_index} outside [0, {n})")
        raise DomainError(f"cross_entropy: answer index {answer_index} outside [0, {n})")
    shifted = logits.data - logits.data.max()
    e = np.exp(shifted)
    total = e.sum()
    loss = np.array(np.log(total) - shifted[0, answer_index])

    def backward(g):
        grad = e / total
        grad[0, answer_index] -= 1.0
        return (float(g) * grad,)

    return _make(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` of every reachable tensor with d(loss)/d(tensor).
    Leaves accumulate across calls; intermediate results are overwritten.
    """
    if loss.data.size != 1:
        logger.error(f"backward called on non-scalar of shape {loss.shape}")
        raise GradientError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# Parameters and optimisation
# ---------------------------------------------------------------------------

class ParameterRegistry:
    """
    Ordered, name-unique collection of trainable parameters
    """
    def __init__(self, seed: int = 0):
        self._params: 'OrderedDict[str, Parameter]' = OrderedDict()
        self.rng = np.random.default_rng(seed)

    def add(self, name: str, data) -> Parameter:
        if name in self._params:
            logger.error(f"Duplicate parameter name: {name}")
            raise DomainError(f"Parameter name '{name}' is already registered")
        param = Parameter(name, data)
        self._params[name] = param
        return param

    def glorot(self, name: str, fan_in: int, fan_out: int) -> Parameter:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self.rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def normal(self, name: str, shape: Tuple[int, ...], std: float = 0.02) -> Parameter:
        return self.add(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Parameter:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: Tuple[int, ...]) -> Parameter:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def parameters(self, prefix: str = '') -> List[Parameter]:
        return [p for name, p in self._params.items() if name.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = [name for name in self._params if name not in state]
        if missing:
            raise DomainError(f"State is missing parameters: {', '.join(missing[:5])}")
        for name, p in self._params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"Parameter {name}: stored shape {list(value.shape)} "
                                     f"differs from {list(p.shape)}")
            p.data = value.copy()


class Adam:
    """
    Adam optimizer state (first/second moments and step counter)
    """
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise DomainError(f"Learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        missing = [p.name for p in self.params if p.grad is None]
        if missing:
            logger.error(f"optimizer_step without gradients for {missing[:3]}")
            raise GradientError(f"Missing gradients for parameters: {', '.join(missing[:5])}")
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** t)
            v_hat = self.v[i] / (1 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = np.zeros_like(p.data)


def optimizer_step(state: Adam) -> None:
    state.step()


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Parameter],
                            step: float = 1e-5) -> float:
    """
    Compare analytic gradients of the scalar ``f()`` with central differences.

    Returns the worst relative error over every coordinate, using
    max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    first = f()
    second = f()
    if first.item() != second.item():
        logger.error('finite_difference_check: two evaluations disagree')
        raise DeterminismError(
            f"f is not deterministic ({first.item()!r} != {second.item()!r})"
        )
    for p in params:
        p.grad = None
    backward(second)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        grad_flat = a.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = f().item()
            flat[i] = original - step
            minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2 * step)
            denom = max(abs(grad_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(grad_flat[i] - numeric) / denom)
    logger.debug(f"finite_difference_check over {len(params)} parameters: worst {worst:.3e}")
    return worst
