"""Double-precision n-d arrays with reverse-mode automatic differentiation.

Every differentiable operation records itself on an implicit tape: each
result that depends on a ``requires_grad`` input gets a monotonically
increasing ``node_id`` together with its parents and a closure that maps the
output gradient to input gradients. ``backward`` replays those nodes in
decreasing ``node_id`` order, which is exactly reverse execution order, so
every node is visited once after all of its consumers.
"""

from __future__ import annotations

import contextlib
import itertools
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

_node_ids = itertools.count(1)
_grad_enabled = True

NEG_INF = -np.inf


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Rng:
    """Seeded PCG64 stream.

    ``child(name)`` derives an independent stream keyed by a stable string
    hash, so separate consumers (init, data order, dropout) never perturb each
    other's draws.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, key: tuple = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.key = tuple(key)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.key])))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self.key + (zlib.crc32(name.encode("utf-8")),))

    def random(self, size=None):
        return self.gen.random(size)

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def trunc_normal(self, shape, std=0.02, bound=2.0):
        """Normal samples redrawn until they fall within ``bound`` standard deviations."""
        out = self.gen.normal(0.0, 1.0, shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.gen.normal(0.0, 1.0, int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An immutable float64 array, optionally participating in the tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id: int | None = None
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


class Parameter(Tensor):
    """A trainable leaf. Frozen parameters keep ``requires_grad=False``."""

    def __init__(self, data, frozen: bool = False, name: str | None = None):
        super().__init__(data, requires_grad=not frozen, name=name)

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    @frozen.setter
    def frozen(self, value: bool):
        self.requires_grad = not value
        if value:
            self.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = next(_node_ids)
        out._parents = parents
        out._backward = backward
    return out


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), back)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g / (2.0 * out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def back(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _result(x * cdf, (a,), back)


# -- reductions and shape ---------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), back)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        raise TypeError("index with integer arrays, not Tensors")

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), back)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def roll(a: Tensor, shifts, axes) -> Tensor:
    shifts, axes = tuple(np.atleast_1d(shifts)), tuple(np.atleast_1d(axes))
    neg_shifts = tuple(-s for s in shifts)
    return _result(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, neg_shifts, axes),))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), back)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes with broadcast batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible batch dims {a.shape} and {b.shape}") from exc

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), back)


# -- normalisation and losses -----------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN in input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), back)


def _log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("log_softmax: NaN in input")
    out = _log_softmax_np(x.data, axis)
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), back)


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return _result(xhat * gain.data + bias.data, (x, gain, bias), back)


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean token negative log-likelihood over non-ignored positions.

    A batch with every position ignored yields 0 with a zero gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    flat_logits = logits.data.reshape(-1, V)
    flat_t = targets.reshape(-1)
    valid = np.ones_like(flat_t, dtype=bool) if ignore_index is None else flat_t != ignore_index
    bad = valid & ((flat_t < 0) | (flat_t >= V))
    if bad.any():
        raise IndexError(f"cross_entropy: target {int(flat_t[bad][0])} outside [0, {V})")
    n = int(valid.sum())
    if n == 0:
        return _result(np.array(0.0), (logits,), lambda g: (np.zeros_like(logits.data),))
    logp = _log_softmax_np(flat_logits)
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, flat_t[rows]].sum() / n

    def back(g):
        grad = np.zeros_like(flat_logits)
        grad[rows] = np.exp(logp[rows])
        grad[rows, flat_t[rows]] -= 1.0
        return ((grad * (g / n)).reshape(logits.shape),)

    return _result(np.array(loss), (logits,), back)


def dropout(x: Tensor, p: float, rng: Rng | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an Rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# -- backward ---------------------------------------------------------------

def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from each requires-grad leaf to its gradient array. The
    recorded graph is released afterwards, so a second call on the same loss
    sees no tape.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape")

    nodes, leaves, seen = [], [], set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        if t._backward is None:
            leaves.append(t)
        else:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t.node_id, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
        node._backward = None
        node._parents = ()

    result = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = leaf.grad
    return result


# -- finite-difference checking --------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_checked: int
    worst_index: int | None = None
    errors: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(f, x: Tensor, h: float = 1e-5, tol: float = 1e-5, indices=None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(x)`` with central differences.

    The relative error of each entry is ``|a - n| / max(1, |a|)``. ``indices``
    restricts the check to a subset of flat positions of ``x``.
    """
    if not h > 0:
        raise ContractError("finite-difference step h must be positive")
    x.grad = None
    x.requires_grad = True
    out = f(x)
    backward(out)
    analytic = x.grad.reshape(-1).copy() if x.grad is not None else np.zeros(x.size)
    x.grad = None

    x.data = np.ascontiguousarray(x.data)  # reshape(-1) must be a view
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    errors = []
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            errors.append(abs(analytic[i] - num) / max(1.0, abs(analytic[i])))
    idx = list(idx)
    worst = int(np.argmax(errors)) if errors else None
    return GradCheckReport(
        max_rel_err=float(max(errors)) if errors else 0.0,
        tol=tol,
        n_checked=len(errors),
        worst_index=idx[worst] if worst is not None else None,
        errors=errors,
    )


def grad_check_many(f, picks, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of a zero-argument scalar function.

    ``picks`` is a sequence of ``(tensor, flat_index)`` pairs, typically a
    random sample of model parameters. Frozen tensors are compared against a
    zero analytic gradient.
    """
    if not h > 0:
        raise ContractError("finite-difference step h must be positive")
    tensors = {id(t): t for t, _ in picks}
    for t in tensors.values():
        t.grad = None
        t.data = np.ascontiguousarray(t.data)
    backward(f())
    analytic = []
    for t, i in picks:
        analytic.append(0.0 if t.grad is None else float(t.grad.reshape(-1)[i]))
    for t in tensors.values():
        t.grad = None

    errors = []
    with no_grad():
        for (t, i), a in zip(picks, analytic):
            flat = t.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            errors.append(abs(a - num) / max(1.0, abs(a)))
    worst = int(np.argmax(errors)) if errors else None
    return GradCheckReport(
        max_rel_err=float(max(errors)) if errors else 0.0,
        tol=tol,
        n_checked=len(errors),
        worst_index=worst,
        errors=errors,
    )
