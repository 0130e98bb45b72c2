"""Minimal module system: parameter registration, train/eval, a few layers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .oni import OniConfig, check_orthogonalizable, effective_weight
from .tensor import Parameter, RunningStats, Tensor


class Module:
    training: bool = True

    def children(self) -> Iterator[Module]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def parameters(self) -> list[Parameter]:
        out = [v for v in vars(self).values() if isinstance(v, Parameter)]
        for child in self.children():
            out.extend(child.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        params = self.parameters()
        named = {p.name: p for p in params}
        if len(named) != len(params):
            raise ValueError("duplicate parameter names in module tree")
        return named

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for child in self.children():
            out.update(child.buffers())
        return out

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, name: str, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True,
                 orthogonalize: bool = False, oni: OniConfig | None = None):
        if kernel % 2 == 0:
            raise ValueError(f"{name}: kernel size must be odd, got {kernel}")
        self.name = name
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        self.weight = Parameter(f"{name}.weight",
                                he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel),
                                requires_orthogonalization=orthogonalize)
        self.bias = Parameter(f"{name}.bias", np.zeros(cout), weight_decay=False) if bias else None
        self.oni = oni or OniConfig()
        if orthogonalize:
            check_orthogonalizable(self.weight)
            self.oni.applies_to.add(self.weight.name)

    def effective_weight(self) -> Tensor:
        return effective_weight(self.weight, self.oni)

    def __call__(self, x) -> Tensor:
        return T.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.name = name
        self.weight = Parameter(f"{name}.weight", he_normal(rng, (cin, cout), cin))
        self.bias = Parameter(f"{name}.bias", np.zeros(cout), weight_decay=False) if bias else None

    def __call__(self, x) -> Tensor:
        out = T.as_tensor(x) @ self.weight
        return out + self.bias if self.bias is not None else out


class BatchNorm2d(Module):
    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels), weight_decay=False)
        self.beta = Parameter(f"{name}.beta", np.zeros(channels), weight_decay=False)
        self.stats = RunningStats.fresh(channels)
        self.momentum = momentum
        self.eps = eps

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.stats.mean,
                f"{self.name}.running_var": self.stats.var}

    def __call__(self, x) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.stats, self.training,
                           self.momentum, self.eps)


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    pooled = T.pool_spatial(x, "avg")
    return pooled.reshape(pooled.shape[0], pooled.shape[1])
