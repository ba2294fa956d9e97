"""Parameterized layers with hand-written backward passes.

Every ``forward`` returns ``(output, cache)`` and the matching ``backward``
consumes that cache, so one module can be applied several times before the
gradients are collected (the contrastive phase pushes two views through the
same weights). Parameter gradients accumulate into ``Parameter.grad``.
"""

from collections import OrderedDict

import numpy as np
from scipy.special import expit

from ..exceptions import DimensionError, StateError

ACTIVATIONS = ("identity", "relu", "sigmoid")


class Parameter:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter(shape={self.value.shape}, dtype={self.value.dtype})"


class Module:
    """Minimal container that tracks parameters and submodules in definition order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return OrderedDict(self.named_parameters())

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad[...] = 0

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    @property
    def dtype(self):
        for _, p in self.named_parameters():
            return p.value.dtype
        return np.dtype(np.float32)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


class ModuleDict(Module):
    def __init__(self, modules=None):
        super().__init__()
        for name, m in (modules or {}).items():
            self[name] = m

    def __setitem__(self, name, module):
        self._modules[name] = module

    def __getitem__(self, name):
        return self._modules[name]

    def __contains__(self, name):
        return name in self._modules

    def keys(self):
        return self._modules.keys()

    def items(self):
        return self._modules.items()


def glorot_uniform(rng, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)


def sigmoid(x):
    return expit(x)


def _activate(name, pre):
    if name == "identity":
        return pre
    if name == "relu":
        return np.maximum(pre, 0)
    return expit(pre)


def _activation_grad(name, pre, out, dout):
    if name == "identity":
        return dout
    if name == "relu":
        return dout * (pre > 0)
    return dout * out * (1 - out)


def _check_cache(cache):
    if cache is None:
        raise StateError("backward called without a cached forward pass")


class Dense(Module):
    """Affine map ``activation(W @ x + b)`` with ``W`` stored as (out, in)."""

    def __init__(self, in_dim, out_dim, activation="identity", rng=None,
                 dtype=np.float32, init="glorot"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.activation = activation
        if init == "zeros":
            w = np.zeros((out_dim, in_dim), dtype=dtype)
        elif init == "identity":
            w = np.eye(out_dim, in_dim, dtype=dtype)
        else:
            if rng is None:
                raise ValueError("glorot init needs an rng")
            w = glorot_uniform(rng, in_dim, out_dim, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype))

    def forward(self, x):
        x = np.asarray(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                f"Dense expects input width {self.in_dim}, got shape {x.shape}")
        pre = x @ self.weight.value.T + self.bias.value
        out = _activate(self.activation, pre)
        cache = (x, pre, out, squeeze)
        return (out[0] if squeeze else out), cache

    def backward(self, cache, dout):
        _check_cache(cache)
        x, pre, out, squeeze = cache
        if squeeze:
            dout = dout[None, :]
        dpre = _activation_grad(self.activation, pre, out, dout)
        self.weight.grad += dpre.T @ x
        self.bias.grad += dpre.sum(axis=0)
        dx = dpre @ self.weight.value
        return dx[0] if squeeze else dx


def dense_forward(layer, x):
    """Output of ``layer`` on ``x`` (cache discarded)."""
    return layer.forward(x)[0]


class MLP(Module):
    """Stack of Dense layers; hidden layers use ``hidden_activation``."""

    def __init__(self, dims, rng, hidden_activation="relu",
                 out_activation="identity", dtype=np.float32):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.dims = tuple(int(d) for d in dims)
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            act = out_activation if i == len(dims) - 2 else hidden_activation
            layers.append(Dense(a, b, act, rng=rng, dtype=dtype))
        self.layers = ModuleList(layers)

    @property
    def in_dim(self):
        return self.dims[0]

    @property
    def out_dim(self):
        return self.dims[-1]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, caches, dout):
        _check_cache(caches)
        for layer, c in zip(reversed(self.layers._items), reversed(caches)):
            dout = layer.backward(c, dout)
        return dout


def l2_normalize(x):
    """Row-wise unit normalization; zero rows stay zero."""
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1)
    y = np.where(norm > 0, x / safe, 0)
    return y, (y, norm)


def l2_normalize_backward(cache, dy):
    y, norm = cache
    safe = np.where(norm > 0, norm, 1)
    dx = (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / safe
    return np.where(norm > 0, dx, 0)
