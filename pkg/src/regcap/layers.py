"""Small module system and the transformer building blocks shared by encoder and decoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, LoadError
from .tensor import Parameter, Rng, Tensor


class Module:
    training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        mismatched = [
            f"{n}: expected {own[n].shape}, found {tuple(np.shape(state[n]))}"
            for n in own if n in state and own[n].shape != tuple(np.shape(state[n]))
        ]
        if missing or unexpected or mismatched:
            parts = []
            if missing:
                parts.append(f"missing {missing}")
            if unexpected:
                parts.append(f"unexpected {unexpected}")
            if mismatched:
                parts.append("shape mismatch " + "; ".join(mismatched))
            raise LoadError("checkpoint does not match architecture: " + ", ".join(parts))
        for n, p in own.items():
            p.data = np.array(state[n], dtype=np.float64)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: Rng, bias: bool = True, std: float = 0.02):
        self.weight = Parameter(rng.trunc_normal((out_dim, in_dim), std))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, T.transpose(self.weight))
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = T.LN_EPS):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: Rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def causal_mask(t: int) -> np.ndarray:
    """Additive mask with ``-inf`` strictly above the diagonal."""
    return np.triu(np.full((t, t), T.NEG_INF), k=1)


class MultiHeadAttention(Module):
    """Scaled dot-product attention, softmax(QK^T / sqrt(d_k)) V, over several heads."""

    def __init__(self, dim: int, heads: int, rng: Rng):
        if dim % heads:
            raise ConfigError(f"{heads} heads do not divide width {dim}")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, context: Tensor | None = None, mask=None, return_weights=False):
        context = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.dim // self.heads))
        if mask is not None:
            scores = scores + Tensor(mask)
        weights = T.softmax(scores, axis=-1)
        b, _, t, _ = q.shape
        out = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, t, self.dim)
        out = self.out(out)
        return (out, weights.data) if return_weights else out
