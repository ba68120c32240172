"""Dense float64 numeric core with reverse-mode gradients.

A small tape-based engine over numpy arrays: enough ops to express
embedding lookups, affine towers, batch normalization, softmax scoring,
per-instance gather/scatter selection, and the losses built on them.
Everything runs at 64-bit precision so finite-difference gradient checks
can be held to tight tolerances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateBatchError(ValueError):
    """Batch statistics were requested on a batch of fewer than 2 rows."""


def _const(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tensor:
    """Node in a reverse-mode computation graph over a float64 ndarray.

    Leaf tensors created with ``requires_grad=True`` accumulate gradients in
    ``.grad`` after ``backward()`` is called on a scalar result. Interior
    nodes carry a closure that routes the upstream gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # make numpy defer to the reflected operators instead of broadcasting
    # elementwise over this object
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward: Callable[[Array], None] | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.grad: Array | None = None
        if self.requires_grad:
            self._parents = tuple(parents)
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise DimensionError("backward() needs a scalar loss, got shape %s" % (self.shape,))
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # arithmetic sugar; non-Tensor operands become constants
    def __add__(self, other):
        return add(self, _const(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _const(other))

    def __rsub__(self, other):
        return sub(_const(other), self)

    def __mul__(self, other):
        return mul(self, _const(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _const(other))

    def __rtruediv__(self, other):
        return div(_const(other), self)

    def __neg__(self):
        return mul(self, _const(-1.0))

    def __matmul__(self, other):
        return matmul(self, _const(other))

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _raise_scalar(t: Tensor):
    raise DimensionError("item() on non-scalar tensor of shape %s" % (t.shape,))


def _accum(t: Tensor, g: Array):
    if not t.requires_grad:
        return
    if t.grad is None:
        # materialize broadcast views and detach from caller-owned buffers
        t.grad = np.array(g, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _sum_to_shape(g: Array, shape: tuple) -> Array:
    """Undo numpy broadcasting: reduce g back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _sum_to_shape(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to_shape(g, b.data.shape))

    return Tensor(out, parents=(a, b), backward=bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _sum_to_shape(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to_shape(-g, b.data.shape))

    return Tensor(out, parents=(a, b), backward=bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _sum_to_shape(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to_shape(g * a.data, b.data.shape))

    return Tensor(out, parents=(a, b), backward=bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _sum_to_shape(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to_shape(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor(out, parents=(a, b), backward=bw)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1))

    return Tensor(out, parents=(a,), backward=bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return Tensor(out, parents=(a, b), backward=bw)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + bias, bias broadcast per row."""
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"affine needs 2-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine inner dims {x.shape[1]} != {w.shape[0]}")
    if b.data.shape != (w.shape[1],):
        raise DimensionError(f"affine bias shape {b.data.shape}, expected ({w.shape[1]},)")
    return add(matmul(x, w), b)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return Tensor(out, parents=(a,), backward=bw)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return Tensor(out, parents=(a,), backward=bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw(g):
        _accum(a, g * (a.data > 0.0))

    return Tensor(out, parents=(a,), backward=bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the strict interior."""
    out = np.clip(a.data, lo, hi)

    def bw(g):
        _accum(a, g * ((a.data > lo) & (a.data < hi)))

    return Tensor(out, parents=(a,), backward=bw)


def sigmoid(x):
    """Numerically stable logistic function.

    Accepts a Tensor (differentiable) or a plain float/ndarray. NaN input
    is rejected.
    """
    if isinstance(x, Tensor):
        out = _sigmoid_stable(x.data)

        def bw(g):
            _accum(x, g * out * (1.0 - out))

        return Tensor(out, parents=(x,), backward=bw)
    arr = np.asarray(x, dtype=np.float64)
    if np.isnan(arr).any():
        raise ValueError("sigmoid of NaN")
    val = _sigmoid_stable(arr)
    return float(val) if np.isscalar(x) or arr.ndim == 0 else val


def _sigmoid_stable(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(x, axis: int = -1):
    """Max-subtracted softmax along `axis`; rows sum to 1.

    Tensor input builds a graph node; array input returns an array.
    """
    if isinstance(x, Tensor):
        s = _softmax_stable(x.data, axis)

        def bw(g):
            inner = (g * s).sum(axis=axis, keepdims=True)
            _accum(x, s * (g - inner))

        return Tensor(s, parents=(x,), backward=bw)
    arr = np.asarray(x, dtype=np.float64)
    if np.isnan(arr).any():
        raise ValueError("softmax of NaN")
    return _softmax_stable(arr, axis)


def _softmax_stable(z: Array, axis: int) -> Array:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        gg = g if axis is None or keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return Tensor(out, parents=(a,), backward=bw)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), _const(1.0 / n))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor(out, parents=(a,), backward=bw)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=axis)):
            _accum(p, piece)

    return Tensor(out, parents=tuple(parts), backward=bw)


def stack(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.stack([p.data for p in parts], axis=axis)

    def bw(g):
        for i, p in enumerate(parts):
            _accum(p, np.take(g, i, axis=axis))

    return Tensor(out, parents=tuple(parts), backward=bw)


def gather_rows(table: Tensor, ids: Array) -> Tensor:
    """Select rows of a 2-D table; gradient scatters back into touched rows only."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError("gather_rows expects a 2-D table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("row id out of range [0, %d)" % table.shape[0])

    out = table.data[ids]

    def bw(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return Tensor(out, parents=(table,), backward=bw)


def gather_fields(x: Tensor, idx: Array) -> Tensor:
    """Per-row gather along axis 1 of a (B, N) or (B, N, D) tensor.

    idx has shape (B, k); output row i holds x[i, idx[i, j]] in idx order.
    Duplicate indices are allowed here; selection callers validate distinctness.
    """
    idx = np.asarray(idx)
    b, n = x.shape[0], x.shape[1]
    if idx.ndim != 2 or idx.shape[0] != b:
        raise DimensionError(f"index shape {idx.shape} incompatible with {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("field index out of range [0, %d)" % n)
    rows = np.arange(b)[:, None]
    out = x.data[rows, idx]

    def bw(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, (rows, idx), g)

    return Tensor(out, parents=(x,), backward=bw)


def xavier_init(rows: int, cols: int, seed) -> Array:
    """Uniform init on +/- sqrt(6 / (rows + cols)); deterministic per seed."""
    if rows < 1 or cols < 1:
        raise ValueError("xavier_init needs positive dimensions")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


class Linear:
    """Trainable affine map with Xavier weights and zero bias."""

    def __init__(self, n_in: int, n_out: int, seed):
        self.weight = Tensor(xavier_init(n_in, n_out, seed), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)

    def named_params(self, prefix: str = ""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]


class BatchNorm1d:
    """Per-feature batch normalization with learnable affine.

    Training mode normalizes by batch statistics (biased variance) and
    updates running statistics; inference mode normalizes by the running
    statistics. Training requires a batch of at least 2 rows.
    """

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def __call__(self, x: Tensor, training: bool, update_running: bool = True) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.num_features:
            raise DimensionError(f"batch_norm input {x.shape}, expected (*, {self.num_features})")
        if training:
            if x.shape[0] < 2:
                raise DegenerateBatchError("batch_norm training mode needs batch >= 2")
            mu = x.data.mean(axis=0)
            var = x.data.var(axis=0)
            std = np.sqrt(var + self.eps)
            xn = (x.data - mu) / std
            if update_running:
                m = self.momentum
                self.running_mean = (1.0 - m) * self.running_mean + m * mu
                self.running_var = (1.0 - m) * self.running_var + m * var
        else:
            std = np.sqrt(self.running_var + self.eps)
            xn = (x.data - self.running_mean) / std
        gamma, beta = self.gamma, self.beta
        out = gamma.data * xn + beta.data

        def bw(g):
            _accum(gamma, (g * xn).sum(axis=0))
            _accum(beta, g.sum(axis=0))
            if x.requires_grad:
                dxn = g * gamma.data
                if training:
                    dx = (dxn - dxn.mean(axis=0) - xn * (dxn * xn).mean(axis=0)) / std
                else:
                    dx = dxn / std
                _accum(x, dx)

        return Tensor(out, parents=(x, gamma, beta), backward=bw)

    def named_params(self, prefix: str = ""):
        return [(prefix + "gamma", self.gamma), (prefix + "beta", self.beta)]

    def named_buffers(self, prefix: str = ""):
        return [(prefix + "running_mean", self.running_mean),
                (prefix + "running_var", self.running_var)]

    def load_buffers(self, mean: Array, var: Array):
        self.running_mean = np.asarray(mean, dtype=np.float64).copy()
        self.running_var = np.asarray(var, dtype=np.float64).copy()


@dataclass
class AdamState:
    """First/second moment estimates and step count for one parameter."""

    m: Array
    v: Array
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Array, lr: float = 1e-3, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param),
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: Array, grad: Array, state: AdamState) -> tuple[Array, AdamState]:
    """One bias-corrected Adam update, in place on `param` and `state`."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise DimensionError(f"adam_step shapes param={param.shape} grad={grad.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param, state


class Adam:
    """Adam over a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.states = [AdamState.for_param(p.data, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
                       for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, st in zip(self.params, self.states):
            if p.grad is not None:
                adam_step(p.data, p.grad, st)


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Compare analytic gradients against central differences.

    Returns max over all parameter entries of
    ``|analytic - numeric| / max(1, |analytic|)``. `loss_fn` must rebuild the
    graph from the current parameter values on every call.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            if err > worst:
                worst = err
    return worst
