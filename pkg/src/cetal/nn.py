"""Parameter containers built on :mod:`cetal.tensor`."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from .tensor import Tensor, conv1d, layer_norm, linear


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Holds parameters and child modules as attributes.

    ``named_parameters`` walks attributes in insertion order so names and
    ordering are stable across runs (checkpoints depend on it).
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for key, p in params.items():
            value = np.asarray(state[key])
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {key}: {value.shape} vs {p.shape}")
            p.data = value.astype(p.dtype, copy=True)


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv1d(Module):
    def __init__(self, cin, cout, kernel_size=1, stride=1, padding=0, groups=1, bias=True, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (cin // groups) * kernel_size
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = parameter(_uniform(rng, bound, (cout, cin // groups, kernel_size), dtype))
        self.bias = parameter(_uniform(rng, bound, (cout,), dtype)) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x):
        return conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups)


class Linear(Module):
    def __init__(self, din, dout, bias=True, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(din)
        self.weight = parameter(_uniform(rng, bound, (dout, din), dtype))
        self.bias = parameter(_uniform(rng, bound, (dout,), dtype)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float64):
        self.gamma = parameter(np.ones(dim, dtype=dtype))
        self.beta_shift = parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta_shift, self.eps)
