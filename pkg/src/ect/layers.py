"""Parameter-holding layers on top of the tensor core.

Modules auto-register parameters and submodules by attribute assignment, so
every parameter carries a stable dotted name (needed for checkpointing and
partial loading).
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from ect import tensor as T
from ect.tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) clipped to +-2 std; the documented init scheme."""
    return np.clip(rng.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std)


class Module:
    """Minimal parameter container with dotted-name registry."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for n, m in self._modules.items():
            yield from m.named_params(prefix + n + ".")

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def count_params(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1, bias: bool = True):
        super().__init__()
        self.stride, self.padding, self.groups = stride, padding, groups
        self.cin, self.cout, self.k = cin, cout, k
        self.weight = _param(trunc_normal(rng, (cout, cin // groups, k, k)))
        self.bias = _param(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)

    def forward_chw(self, x: Tensor) -> Tensor:
        C, H, W = x.shape
        y = self.forward(T.reshape(x, (1, C, H, W)))
        return T.reshape(y, y.shape[1:])


class ConvTranspose2d(Module):
    """2x2 stride-2 transpose convolution (the only configuration the net uses)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.weight = _param(trunc_normal(rng, (cin, cout, 2, 2)))
        self.bias = _param(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, stride=2)

    def forward_chw(self, x: Tensor) -> Tensor:
        C, H, W = x.shape
        y = self.forward(T.reshape(x, (1, C, H, W)))
        return T.reshape(y, y.shape[1:])


class Conv1d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 padding: int = 0, bias: bool = True):
        super().__init__()
        self.padding = padding
        self.cin, self.cout, self.k = cin, cout, k
        self.weight = _param(trunc_normal(rng, (cout, cin, k)))
        self.bias = _param(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, padding=self.padding)


class ChannelLayerNorm(Module):
    """LayerNorm over the channel axis of a [C, H, W] map, learnable affine."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        hwc = T.transpose(x, (1, 2, 0))
        y = T.layer_norm(hwc, self.gamma, self.beta)
        return T.transpose(y, (2, 0, 1))


class Linear(Module):
    """y = W x + b applied on the leading axis of an [n, ...] operand."""

    def __init__(self, n: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.n = n
        self.weight = _param(trunc_normal(rng, (n, n)))
        self.bias = _param(np.zeros(n)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(self.weight, x)
        if self.bias is not None:
            y = T.add(y, T.reshape(self.bias, (self.n, 1)))
        return y
