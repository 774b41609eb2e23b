"""
Small dense float64 tensor library with reverse-mode differentiation.

Every primitive records its inputs and a closure that pushes the output
gradient back to them. ``Tensor.backward`` orders the recorded nodes
topologically (the tape) and sweeps it once in reverse.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disables graph recording inside the block (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, array, op):
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = build_tape(self)
        for node in tape:
            if node._backward is not None:
                node.grad = None
        self.grad = np.array(grad, dtype=np.float64).reshape(self.shape)
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def build_tape(root):
    """Topological order of every node reachable from ``root`` (inputs first)."""
    tape, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return tape


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    grad = _unbroadcast(grad, tensor.shape)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def _record(data, op, parents, backward):
    out = Tensor._wrap(data, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_trailing(op, a, b):
    # b may match a exactly or cover a's trailing axes (bias broadcast)
    if a.shape == b.shape:
        return
    short, long_ = (b, a) if b.ndim <= a.ndim else (a, b)
    if short.ndim == 0 or long_.shape[long_.ndim - short.ndim:] == short.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("add", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return _record(a.data + b.data, "add", (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("sub", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)
    return _record(a.data - b.data, "sub", (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("mul", a, b)

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)
    return _record(a.data * b.data, "mul", (a, b), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} differ")

    def backward(g):
        _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))
    return _record(np.matmul(a.data, b.data), "matmul", (a, b), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)
    return _record(np.maximum(x.data, 0.0), "relu", (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        _accumulate(x, g * s * (1.0 - s))
    return _record(s, "sigmoid", (x,), backward)


def log(x):
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g / x.data)
    return _record(np.log(x.data), "log", (x,), backward)


def clamp(x, low, high):
    x = as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)

    def backward(g):
        _accumulate(x, g * inside)
    return _record(np.clip(x.data, low, high), "clamp", (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    original = x.shape

    def backward(g):
        _accumulate(x, g.reshape(original))
    return _record(x.data.reshape(shape), "reshape", (x,), backward)


def flatten(x, start_axis=1):
    return reshape(x, x.shape[:start_axis] + (-1,))


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))
    return _record(np.transpose(x.data, axes), "transpose", (x,), backward)


def take_last(x, axis=-1):
    """Selects the last position along ``axis`` and drops that axis."""
    x = as_tensor(x)
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = -1
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accumulate(x, full)
    return _record(x.data[index].copy(), "take_last", (x,), backward)


def total(x):
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape).copy())
    return _record(np.array(x.data.sum()), "total", (x,), backward)


def square_sum(x):
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, 2.0 * g * x.data)
    return _record(np.array(np.sum(x.data * x.data)), "square_sum", (x,), backward)


def dense(x, weight, bias):
    return add(matmul(x, weight), bias)


def _shift_right(data, shift):
    # zero left padding: out[..., j] = data[..., j - shift]
    out = np.zeros_like(data)
    if shift < data.shape[-1]:
        out[..., shift:] = data[..., :data.shape[-1] - shift]
    return out


def causal_dilated_conv1d(x, filters, dilation=1):
    """
    out[..., o, j] = sum_i sum_c filters[o, c, i] * x[..., c, j - dilation*i], zero for j - dilation*i < 0.
    """
    x, filters = as_tensor(x), as_tensor(filters)
    if filters.ndim != 3 or x.ndim < 2 or x.shape[-2] != filters.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} and filters {filters.shape} are incompatible")
    kernel = filters.shape[2]
    if kernel < 1 or dilation < 1:
        raise ContractError(f"conv1d needs kernel >= 1 and dilation >= 1, got {kernel}, {dilation}")
    length = x.shape[-1]
    c_out, c_in = filters.shape[0], filters.shape[1]

    out = np.zeros(x.shape[:-2] + (c_out, length))
    for i in range(kernel):
        if dilation * i < length:
            out += np.matmul(filters.data[:, :, i], _shift_right(x.data, dilation * i))

    def backward(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(filters.data)
        for i in range(kernel):
            shift = dilation * i
            if shift >= length:
                continue
            xs = _shift_right(x.data, shift)
            gw[:, :, i] = np.matmul(g, np.swapaxes(xs, -1, -2)).reshape(-1, c_out, c_in).sum(axis=0)
            gxs = np.matmul(filters.data[:, :, i].T, g)
            gx[..., :length - shift] += gxs[..., shift:]
        _accumulate(x, gx)
        _accumulate(filters, gw)
    return _record(out, "conv1d", (x, filters), backward)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, features):
        return cls(np.zeros(features), np.ones(features))


def batch_norm(x, gamma, beta, state, training):
    """Per-feature normalization of a (batch, F) tensor with learnable scale/shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    batch = x.shape[0]
    if training:
        if batch < 2:
            raise ContractError(f"batch_norm in train mode needs a batch of at least 2, got {batch}")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mean
        state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * var
    else:
        mean, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean) * inv

    def backward(g):
        _accumulate(gamma, (g * xhat).sum(axis=0))
        _accumulate(beta, g.sum(axis=0))
        dxhat = g * gamma.data
        if training:
            dx = inv / batch * (batch * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv
        _accumulate(x, dx)
    return _record(gamma.data * xhat + beta.data, "batch_norm", (x, gamma, beta), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalizes over the last axis with learnable scale/shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    features = x.shape[-1]
    if gamma.shape != (features,) or beta.shape != (features,):
        raise ShapeError(f"layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv

    def backward(g):
        _accumulate(gamma, (g * xhat).reshape(-1, features).sum(axis=0))
        _accumulate(beta, g.reshape(-1, features).sum(axis=0))
        dxhat = g * gamma.data
        dx = inv / features * (features * dxhat - dxhat.sum(axis=-1, keepdims=True)
                               - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        _accumulate(x, dx)
    return _record(gamma.data * xhat + beta.data, "layer_norm", (x, gamma, beta), backward)


def grad_check(f, inputs, eps=1e-6, floor=1e-8):
    """
    Compares reverse-mode gradients of the scalar ``f(*inputs)`` with central
    differences. Returns max |a - n| / max(floor, |a| + |n|) over every coordinate.
    """
    for t in inputs:
        if not t.requires_grad:
            raise ContractError("grad_check inputs must require grad")
        t.zero_grad()
    f(*inputs).backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + eps
            plus = f(*inputs).item()
            flat[k] = original - eps
            minus = f(*inputs).item()
            flat[k] = original
            numeric = (plus - minus) / (2.0 * eps)
            exact = a.reshape(-1)[k]
            worst = max(worst, abs(exact - numeric) / max(floor, abs(exact) + abs(numeric)))
    return worst
