"""Dense tensors with recorded-graph reverse-mode differentiation.

Every operation records its inputs and a backward closure on the output
tensor; calling ``backward()`` on a scalar result walks the recorded graph
in reverse topological order and accumulates gradients into every tensor
that was created with ``requires_grad=True``.

Two precision modes are supported: "high" (float64, used for gradient
checking and anywhere bit-exactness matters) and "standard" (float32, used
for training speed). The active mode determines the dtype of every tensor
created afterwards, so set it before building a graph.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "DimensionError",
    "ParameterError",
    "EvaluationError",
    "Tensor",
    "set_precision",
    "get_precision",
    "active_dtype",
    "precision",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_const",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "gelu",
    "sigmoid",
    "clip",
    "tsum",
    "mean",
    "matmul",
    "transpose",
    "reshape",
    "narrow",
    "concat",
    "embedding_rows",
    "vecmax",
    "softmax",
    "rows_softmax",
    "cross_entropy",
    "binary_cross_entropy",
    "scaled_dot_attention",
    "layer_norm",
    "l2_normalize",
    "grad_check",
]

CE_EPS = 1e-12


class DimensionError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class ParameterError(ValueError):
    """Raised when a numeric parameter is outside its valid range."""


class EvaluationError(ArithmeticError):
    """Raised when a checked function produces a non-finite value."""


_PRECISIONS = {"high": np.float64, "standard": np.float32}
_state = {"precision": "high"}


def set_precision(mode: str) -> None:
    if mode not in _PRECISIONS:
        raise ParameterError(f"unknown precision mode {mode!r}, expected 'high' or 'standard'")
    _state["precision"] = mode


def get_precision() -> str:
    return _state["precision"]


def active_dtype():
    return _PRECISIONS[_state["precision"]]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the active precision mode."""
    old = _state["precision"]
    set_precision(mode)
    try:
        yield
    finally:
        _state["precision"] = old


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff.

    Tensors are immutable once created except for gradient accumulation
    during an explicit backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=active_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: Union[float, np.ndarray] = 1.0) -> None:
        """Accumulate gradients of this tensor into every reachable parameter.

        For a non-scalar tensor pass an explicit ``seed`` array of matching
        shape; for scalars the default seed of 1.0 applies.
        """
        seed_arr = np.asarray(seed, dtype=self.data.dtype)
        if seed_arr.shape != self.data.shape:
            if self.data.size == 1 and seed_arr.size == 1:
                seed_arr = seed_arr.reshape(self.data.shape)
            else:
                raise DimensionError(
                    f"backward seed shape {seed_arr.shape} does not match output shape {self.data.shape}"
                )
        topo = _toposort(self)
        self.grad = seed_arr if self.grad is None else self.grad + seed_arr
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; all logic lives in the module-level functions.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _raise_scalar(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def _toposort(root: Tensor) -> list:
    """Iterative DFS topological order over grad-requiring nodes."""
    order: list = []
    visited: set = set()
    stack: list = [(root, False)]
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.name = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _make(a.data**p, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximation GELU; smooth everywhere, which keeps finite differences honest."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        _accum(a, g * local)

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    """Elementwise logistic function, stable for large |x|."""
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype, copy=False)

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; the gradient passes only where nothing was clamped."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accum(a, g * mask)

    return _make(out_data, (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(np.asarray(out_data), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got shapes {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.data.shape} x {b.data.shape}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-d tensor, got shape {a.data.shape}")

    def backward(g):
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.data.shape

    def backward(g):
        _accum(a, g.reshape(old_shape))

    return _make(a.data.reshape(shape), (a,), backward)


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0 or 1 of a 2-d tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2 or axis not in (0, 1):
        raise DimensionError(f"narrow supports 2-d tensors on axis 0/1, got shape {a.data.shape}, axis {axis}")
    if axis == 0:
        out_data = a.data[start:stop, :].copy()
    else:
        out_data = a.data[:, start:stop].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        if axis == 0:
            full[start:stop, :] = g
        else:
            full[:, start:stop] = g
        _accum(a, full)

    return _make(out_data, (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    extents = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, ext in zip(parts, extents):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + ext)
            _accum(p, g[tuple(sl)])
            offset += ext

    return _make(out_data, parts, backward)


def embedding_rows(table, ids) -> Tensor:
    """Gather rows of an embedding table by integer id."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"embedding ids must be 1-d, got shape {idx.shape}")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return _make(table.data[idx].copy(), (table,), backward)


def vecmax(a) -> Tensor:
    """Maximum over all elements; the gradient routes to the first argmax."""
    a = as_tensor(a)
    flat = a.data.reshape(-1)
    k = int(np.argmax(flat))

    def backward(g):
        gg = np.zeros_like(a.data)
        gg.reshape(-1)[k] = np.asarray(g).reshape(-1)[0]
        _accum(a, gg)

    return _make(np.asarray(flat[k]).reshape(()), (a,), backward)


def rows_softmax(x) -> Tensor:
    """Row-wise softmax with max-subtraction; accepts -inf entries from additive masks."""
    x = as_tensor(x)
    data = x.data if x.data.ndim == 2 else x.data.reshape(1, -1)
    m = np.max(data, axis=1, keepdims=True)
    e = np.exp(data - m)
    s = e / e.sum(axis=1, keepdims=True)
    out_data = s if x.data.ndim == 2 else s.reshape(x.data.shape)

    def backward(g):
        g2 = g.reshape(s.shape)
        dot = (g2 * s).sum(axis=1, keepdims=True)
        gx = s * (g2 - dot)
        _accum(x, gx.reshape(x.data.shape))

    return _make(out_data, (x,), backward)


def softmax(v, tau=1.0) -> Tensor:
    """Temperature softmax over a vector (or row-wise over a matrix).

    The result rows are probability distributions: non-negative, summing
    to one. ``tau`` may be a learnable scalar tensor.
    """
    v = as_tensor(v)
    tau_t = as_tensor(tau)
    if tau_t.data.size != 1:
        raise ParameterError(f"temperature must be a scalar, got shape {tau_t.data.shape}")
    if float(tau_t.data.reshape(-1)[0]) <= 0.0:
        raise ParameterError(f"temperature must be positive, got {float(tau_t.data.reshape(-1)[0])}")
    scaled = div(v, tau_t)
    return rows_softmax(scaled)


def cross_entropy(target, pred) -> Tensor:
    """-sum(target * ln(pred + eps)) for a one-hot target and a distribution."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.data.shape:
        raise DimensionError(f"cross_entropy length mismatch: target {t.shape} vs pred {pred.data.shape}")
    logp = log(add(pred, CE_EPS))
    return neg(tsum(mul(Tensor(t), logp)))


def binary_cross_entropy(y, s) -> Tensor:
    """-[y ln s + (1-y) ln(1-s)] with s clamped to [eps, 1-eps]."""
    s = as_tensor(s)
    yv = float(y)
    sc = clip(s, CE_EPS, 1.0 - CE_EPS)
    return neg(add(mul(yv, log(sc)), mul(1.0 - yv, log(sub(1.0, sc)))))


def scaled_dot_attention(q, k, v, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v, with an optional additive score mask."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("attention operands must be 2-d")
    if q.data.shape[1] != k.data.shape[1]:
        raise DimensionError(f"query/key width mismatch: {q.data.shape} vs {k.data.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise DimensionError(f"key/value row mismatch: {k.data.shape} vs {v.data.shape}")
    d = q.data.shape[1]
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    return matmul(rows_softmax(scores), v)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learnable scale and shift."""
    x = as_tensor(x)
    mu = mean(x, axis=1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=1, keepdims=True)
    xhat = div(xc, sqrt(add(var, eps)))
    return add(mul(xhat, gamma), beta)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale a tensor to unit L2 norm over all elements."""
    x = as_tensor(x)
    nrm = sqrt(add(tsum(mul(x, x)), eps))
    return div(x, nrm)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    Returns the maximum over coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    probe = Tensor(np.array(x.data, copy=True), requires_grad=True)
    with np.errstate(all="ignore"):
        out = f(probe)
    if out.data.size != 1:
        raise DimensionError(f"grad_check needs a scalar-valued function, got output shape {out.data.shape}")
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("function value is not finite at the probe point")
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bumped = np.array(x.data, copy=True).reshape(-1)
        bumped[i] = flat[i] + eps
        hi = float(f(Tensor(bumped.reshape(x.data.shape))).data)
        bumped[i] = flat[i] - eps
        lo = float(f(Tensor(bumped.reshape(x.data.shape))).data)
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise EvaluationError(f"non-finite function value while probing coordinate {i}")
        numeric = (hi - lo) / (2.0 * eps)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
