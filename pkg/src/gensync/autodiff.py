"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
output keeps a :class:`Node` pointing at its parents and a closure mapping the
output gradient to one gradient per parent. :func:`backward` walks the
resulting :class:`ComputationTape` in reverse topological order and
accumulates into the ``grad`` of every leaf that requires one.

Heavier kernels (projection, rasterization) live next to their domain code and
register through :func:`make_result`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateRotationError, DimensionError

__all__ = [
    "Tensor", "ComputationTape", "MLPParams", "AdamState", "Adam",
    "backward", "grad_check", "grad_check_groups", "adam_step", "mlp_apply",
    "add", "sub", "mul", "hadamard", "scale", "matmul", "transpose", "reshape",
    "concat", "stack", "tsum", "mean", "relu", "tanh", "sigmoid", "exp",
    "square", "tabs", "clip", "softmax_rows", "normalize_rows", "make_result", "no_grad",
]


class Node:
    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """A float64 array plus optional gradient bookkeeping."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d data to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        return backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("division is only defined by scalars")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording backward nodes."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_result(data, parents, backward_fn, op):
    """Wrap ``data`` as the output of an op over ``parents``.

    ``backward_fn(grad_out)`` must return one array (or ``None``) per parent.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- tape

class ComputationTape:
    """Operations reachable from an output, inputs strictly before users."""

    def __init__(self, tensors):
        self.tensors = list(tensors)

    @classmethod
    def from_output(cls, out):
        order = []
        visited = set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad and id(p) not in visited:
                        stack.append((p, False))
        return cls(order)

    @property
    def operations(self):
        return [t for t in self.tensors if t.node is not None]

    @property
    def leaves(self):
        return [t for t in self.tensors if t.node is None]

    def __len__(self):
        return len(self.tensors)

    def __iter__(self):
        return iter(self.tensors)


def backward(loss, tape=None):
    """Accumulate d(loss)/d(leaf) into every leaf's ``grad``.

    Returns a dict mapping each reached leaf tensor to its gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    if tape is None:
        tape = ComputationTape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    reached = {}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                t.grad = t.grad + g
            reached[t] = t.grad
            continue
        for p, gp in zip(t.node.parents, t.node.backward_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
    return reached


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    """Broadcasting elementwise product."""
    a, b = _as_tensor(a), _as_tensor(b)
    return make_result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul")


def hadamard(a, b):
    """Elementwise product of two tensors of identical shape."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard needs identical shapes, got {a.shape} and {b.shape}")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "hadamard")


def scale(a, c):
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a):
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a):
    y = np.tanh(a.data)
    return make_result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    y = _sigmoid(a.data)
    return make_result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a):
    y = np.exp(a.data)
    return make_result(y, (a,), lambda g: (g * y,), "exp")


def square(a):
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def tabs(a):
    return make_result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clip(a, lo, hi):
    """Clamp into [lo, hi]; the gradient is zero wherever the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- structural

def matmul(a, b):
    """Matrix product for 2-D operands; 1-D operands act as vectors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul supports 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2:
            return np.outer(g, B), A.T @ g
        if B.ndim == 2:
            return B @ g, np.outer(A, g)
        return g * B, g * A

    return make_result(A @ B, (a, b), bw, "matmul")


def transpose(a):
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return make_result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def index(a, idx):
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(a.data[idx], (a,), bw, "index")


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    data = np.stack([t.data for t in tensors], axis=axis)
    return make_result(
        data, tensors,
        lambda g: tuple(np.take(g, k, axis=axis) for k in range(len(tensors))), "stack")


def tsum(a, axis=None):
    shape = a.shape
    if axis is None:
        return make_result(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    return make_result(
        a.data.sum(axis=axis), (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum")


def mean(a):
    n = a.size
    shape = a.shape
    return make_result(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def softmax_rows(a):
    """Row-wise softmax with max subtraction."""
    if a.ndim != 2 or a.shape[1] < 1:
        raise DimensionError(f"softmax_rows expects an m x n matrix with n >= 1, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return make_result(s, (a,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),), "softmax")


def normalize_rows(a, eps=1e-12):
    """Divide each row by its Euclidean norm."""
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(n < eps):
        bad = int(np.argmin(n.reshape(-1)))
        raise DegenerateRotationError(f"row {bad} has norm {float(n.reshape(-1)[bad]):.3e} < {eps}")
    y = a.data / n
    return make_result(y, (a,), lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,), "normalize")


# ---------------------------------------------------------------- MLP

@dataclass
class MLPParams:
    """Affine layers stored as (in, out) weights so batches apply as ``x @ W + b``."""

    weights: list
    biases: list

    @classmethod
    def init(cls, sizes, rng, zero_final=False, final_bias=None, final_std=None):
        weights, biases = [], []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = k == len(sizes) - 2
            if last and zero_final:
                w = np.zeros((n_in, n_out))
            elif last and final_std is not None:
                w = rng.normal(0.0, final_std, (n_in, n_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out))
            b = np.zeros(n_out)
            if last and final_bias is not None:
                b = np.asarray(final_bias, dtype=np.float64).copy()
            weights.append(Tensor(w, requires_grad=True))
            biases.append(Tensor(b, requires_grad=True))
        return cls(weights, biases)

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self, prefix):
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}/{k}/W"] = w
            out[f"{prefix}/{k}/b"] = b
        return out

    def count(self):
        return sum(p.size for p in self.parameters())


def mlp_apply(params, x):
    """ReLU hidden layers, linear output layer."""
    x = _as_tensor(x)
    if x.shape[-1] != params.weights[0].shape[0]:
        raise DimensionError(
            f"MLP expects input width {params.weights[0].shape[0]}, got shape {x.shape}")
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = add(matmul(h, w), b)
        if k < last:
            h = relu(h)
    return h


# ---------------------------------------------------------------- gradient check

def _rel_err(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def _check_one(f, p, analytic, step, coords):
    worst = 0.0
    flat = p.data.reshape(-1)
    for c in coords:
        orig = flat[c]
        flat[c] = orig + step
        fp = f().item()
        flat[c] = orig - step
        fm = f().item()
        flat[c] = orig
        numeric = (fp - fm) / (2.0 * step)
        worst = max(worst, _rel_err(float(analytic.reshape(-1)[c]), numeric))
    return worst


def _analytic(f, params):
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    if f().item() != out.item():
        raise ContractError("function under check is not deterministic")
    return grads


def _coords(p, max_coords, rng):
    if max_coords is None or p.size <= max_coords:
        return range(p.size)
    return rng.choice(p.size, size=max_coords, replace=False)


def grad_check(f, params, step=1e-5, max_coords=None, seed=0):
    """Max relative error between backprop and central differences.

    ``f`` takes no arguments and rebuilds the scalar output from the current
    contents of ``params``, which are perturbed in place and restored.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    rng = np.random.default_rng(seed)
    grads = _analytic(f, params)
    worst = 0.0
    for p, g in zip(params, grads):
        worst = max(worst, _check_one(f, p, g, step, _coords(p, max_coords, rng)))
    return worst


def grad_check_groups(f, groups, step=1e-5, max_coords=24, seed=0):
    """Like :func:`grad_check`, reporting the worst error per named group."""
    rng = np.random.default_rng(seed)
    flat = [p for ps in groups.values() for p in ps]
    grads = dict(zip(map(id, flat), _analytic(f, flat)))
    report = {}
    for name, ps in groups.items():
        report[name] = max(
            (_check_one(f, p, grads[id(p)], step, _coords(p, max_coords, rng)) for p in ps),
            default=0.0)
    return report


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and state must have equal length")
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch in adam_step: {p.shape}, {g.shape}, {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_p.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class ParamGroup:
    params: list
    lr: float


@dataclass
class Adam:
    """Adam over named tensors; each tensor keeps its own moment state.

    Tensors whose ``grad`` is ``None`` at step time are skipped entirely, so a
    step only touches parameters that took part in the forward pass.
    """

    groups: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: dict = field(default_factory=dict)

    def zero_grad(self):
        for grp in self.groups:
            for p in grp.params:
                p.grad = None

    def step(self):
        for grp in self.groups:
            for p in grp.params:
                if p.grad is None:
                    continue
                st = self.state.get(id(p))
                if st is None:
                    st = AdamState.zeros_like([p.data])
                (new,), st = adam_step([p.data], [p.grad], st, grp.lr, self.beta1, self.beta2, self.eps)
                p.data[...] = new
                self.state[id(p)] = st
