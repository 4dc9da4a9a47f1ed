"""Minimal layer containers on top of :mod:`stcnet.functional`."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .functional import ConvSpec
from .tensor import Parameter, Tensor


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        def walk(key, value):
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield from walk(f"{key}.{i}", item)

        for key, value in vars(self).items():
            yield from walk(key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{key}", value
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv3d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, bias: bool = False, dtype=np.float32):
        self.spec = spec
        fan_in = spec.weight_shape[1] * int(np.prod(spec.kernel))
        self.weight = Parameter(fan_in_uniform(rng, spec.weight_shape, fan_in, dtype))
        self.bias = Parameter(np.zeros(spec.out_channels, dtype), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        return F.conv3d(x, self.weight, self.bias, s.stride, s.padding, s.groups)

    def out_dims(self, in_dims):
        return self.spec.out_dims(in_dims)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels, dtype), decay=False)
        self.beta = Parameter(np.zeros(channels, dtype), decay=False)
        self._buffers = {
            "running_mean": np.zeros(channels, dtype),
            "running_var": np.ones(channels, dtype),
        }
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm(
            x, self.gamma, self.beta,
            self._buffers["running_mean"], self._buffers["running_var"],
            self.training, self.momentum, self.eps,
        )

    def out_dims(self, in_dims):
        return tuple(in_dims)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32):
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(fan_in_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias: Optional[Parameter] = Parameter(np.zeros(out_features, dtype), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.affine(x, self.weight, self.bias)
