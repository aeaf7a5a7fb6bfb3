"""A small reverse-mode autodiff engine over numpy float64 arrays.

Only the operations the model needs are provided.  Every op that
touches a tensor with ``requires_grad`` records a backward closure; the
records form a linear tape ordered by creation, replayed in reverse by
:meth:`Tensor.backward`.
"""

from __future__ import annotations

import itertools
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

_counter = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._tape_id = next(_counter)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes or not node.requires_grad:
                continue
            nodes[id(node)] = node
            stack.extend(node._parents)
        tape = sorted(nodes.values(), key=lambda t: t._tape_id, reverse=True)
        # intermediate grads live only for this pass
        for node in tape:
            if node._backward is not None:
                node.grad = None
        self.grad = np.array(grad, dtype=np.float64) if self.grad is None else self.grad + grad
        for node in tape:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, unbroadcast(g, a.shape))
        _accumulate(b, unbroadcast(g, b.shape))
    return _result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, unbroadcast(g * b.data, a.shape))
        _accumulate(b, unbroadcast(g * a.data, b.shape))
    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(a, g * c)
    return _result(a.data * c, (a,), backward)


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def leaky_relu(a: Tensor, slope: float = 0.0) -> Tensor:
    slope_map = np.where(a.data > 0, 1.0, slope)

    def backward(g):
        _accumulate(a, g * slope_map)
    return _result(a.data * slope_map, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - y * y))
    return _result(y, (a,), backward)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)

    def backward(g):
        _accumulate(a, g * y * (1.0 - y))
    return _result(y, (a,), backward)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))
    return _result(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(a, g.transpose(inverse))
    return _result(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _accumulate(t, piece)
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape))
    return _result(a.data.sum(), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matmul with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.multiply.outer(g, b.data)
            _accumulate(a, unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, unbroadcast(gb, b.shape))
    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- attention bits

def _softmax_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def masked_softmax_rows(x, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` columns.

    Masked columns come out exactly 0; a row without any unmasked
    column is all zeros.  ``mask`` broadcasts against ``x``'s last axis
    (and any leading axes).
    """
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    logits = np.where(mask, x.data, -np.inf)
    row_max = logits.max(axis=-1, keepdims=True)
    live = mask.any(axis=-1, keepdims=True)
    row_max = np.where(live, row_max, 0.0)
    e = np.exp(logits - row_max)
    total = e.sum(axis=-1, keepdims=True)
    # NaN logits must propagate, so only truly empty rows are special-cased
    y = np.divide(e, total, out=np.zeros_like(e), where=np.broadcast_to(live, e.shape))

    def backward(g):
        _accumulate(x, _softmax_backward(y, g))
    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with the biased variance."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accumulate(beta, unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d)
            _accumulate(x, gx)
    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout: keep with prob 1-p and rescale by 1/(1-p)."""
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = 1.0 - p
    scale_map = (rng.random(x.shape) < keep) / keep

    def backward(g):
        _accumulate(x, g * scale_map)
    return _result(x.data * scale_map, (x,), backward)


def masked_mean_pool(x: Tensor, mask) -> Tensor:
    """Mean over axis -2 of the rows where ``mask`` is True: [B, n, d] -> [B, d]."""
    w = np.asarray(mask, dtype=np.float64)
    counts = w.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("mean pooling over a sample with no unmasked rows")
    weights = (w / counts)[..., None]

    def backward(g):
        _accumulate(x, g[..., None, :] * weights)
    return _result((x.data * weights).sum(axis=-2), (x,), backward)


# ---------------------------------------------------------------- losses

def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - target
    n = diff.size

    def backward(g):
        _accumulate(pred, g * 2.0 * diff / n)
    return _result(np.mean(diff * diff), (pred,), backward)


def bce_with_logits(logits: Tensor, target, weights=None) -> Tensor:
    """Mean binary cross-entropy from logits in the overflow-safe form.

    ``max(z, 0) - z*y + log(1 + exp(-|z|))``; with ``weights`` the mean
    is weighted (entries with weight 0 do not contribute at all).
    """
    z = logits.data
    y = np.broadcast_to(np.asarray(target, dtype=np.float64), z.shape)
    w = np.ones_like(z) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), z.shape)
    total = w.sum()
    if total <= 0:
        raise ValueError("bce_with_logits: no entries carry weight")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    value = (w * per).sum() / total

    def backward(g):
        _accumulate(logits, g * w * (_stable_sigmoid(z) - y) / total)
    return _result(value, (logits,), backward)


# ---------------------------------------------------------------- rng

def make_rng(seed: int, stream: str = "default") -> np.random.Generator:
    """Counter-based (Philox) generator keyed by (seed, stream name).

    Stream names hash through CRC32 so the mapping is stable across
    platforms and Python hash seeds.
    """
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode())])
    return np.random.Generator(np.random.Philox(key))


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    worst: Optional[tuple] = None
    failure: Optional[str] = None
    errors: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_rel_error < self.tol


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5,
               tol: float = 1e-4, n_samples: Optional[int] = None,
               rng: Optional[np.random.Generator] = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    the floor keeps coordinates whose true gradient is ~0 from turning
    round-off into huge relative errors.  With ``n_samples`` coordinates
    are drawn uniformly over all parameters, otherwise every coordinate
    is checked.
    """
    for p in params.values():
        p.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        return GradCheckReport(np.inf, 0, tol, failure="non-finite loss at the base point")
    out.backward()
    coords = [(name, idx) for name, p in params.items() for idx in np.ndindex(p.shape)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng or make_rng(0, "gradcheck")
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(picks)]
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
                for name, p in params.items()}
    worst, worst_err, errors = None, 0.0, []
    for name, idx in coords:
        p = params[name]
        orig = p.data[idx]
        p.data[idx] = orig + h
        fp = f().item()
        p.data[idx] = orig - h
        fm = f().item()
        p.data[idx] = orig
        num = (fp - fm) / (2 * h)
        ana = analytic[name][idx]
        if not (np.isfinite(num) and np.isfinite(ana)):
            return GradCheckReport(np.inf, len(errors), tol, (name, idx),
                                   failure=f"non-finite value at {name}{list(idx)}")
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        errors.append(err)
        if err >= worst_err:
            worst, worst_err = (name, idx), err
    return GradCheckReport(worst_err, len(coords), tol, worst, errors=errors)
