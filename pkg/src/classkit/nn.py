"""Layer containers built on :mod:`classkit.tensor`."""

from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np

from .errors import ContractError
from .tensor import BN_EPS, Tensor, batch_norm, conv2d, relu


class ParamSet(Mapping):
    """Ordered, read-only view of named parameters."""

    def __init__(self, items):
        self._items: dict[str, Tensor] = {}
        for name, tensor in items:
            if name in self._items:
                raise ContractError(f"duplicate parameter name {name!r}")
            if not tensor.requires_grad:
                raise ContractError(f"parameter {name!r} does not require grad")
            self._items[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(t.size for t in self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Minimal module tree: parameters, buffers, train/eval flag.

    Attribute assignment order defines the (deterministic) parameter order.
    """

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def params(self) -> ParamSet:
        return ParamSet(self.named_parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, bias: bool = True):
        bound = 1.0 / np.sqrt(cin * k * k)
        self.weight = parameter(rng.uniform(-bound, bound, size=(cout, cin, k, k)))
        self.bias = parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = BN_EPS):
        self.eps = eps
        self.gamma = parameter(np.ones(channels))
        self.shift = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.shift, self.running_mean, self.running_var, self.training,
                          eps=self.eps)


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 eps: float = BN_EPS):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride)
        self.bn = BatchNorm2d(cout, eps)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))
