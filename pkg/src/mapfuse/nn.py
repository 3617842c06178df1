"""Small module system on top of :mod:`mapfuse.tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .optim import msra_init
from .tensor import FLOAT, Parameter, RunningStats, Tensor, batchnorm2d, conv2d, relu


class Module:
    """Container that knows its parameters, buffers and train/eval mode."""

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            if isinstance(value, RunningStats):
                yield f"{prefix}{key}.running_mean", value.mean
                yield f"{prefix}{key}.running_var", value.var
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing entries: {sorted(missing)[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name], dtype=FLOAT)
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_lr_scale(self, scale: float) -> None:
        for p in self.parameters():
            p.lr_scale = scale

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, seed=0):
        self.padding = kernel // 2
        self.weight = Parameter(np.zeros((out_ch, in_ch, kernel, kernel), FLOAT), "weight")
        self.bias = Parameter(np.zeros(out_ch, FLOAT), "bias")
        msra_init(self.weight, in_ch * kernel * kernel, seed)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels, FLOAT), "gamma")
        self.beta = Parameter(np.zeros(channels, FLOAT), "beta")
        self.stats = RunningStats(channels)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.stats, training=self.training)


class ConvBlock(Module):
    """conv -> (batch norm) -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int, seed, batchnorm: bool = True):
        self.conv = Conv2d(in_ch, out_ch, 3, seed)
        self.bn = BatchNorm2d(out_ch) if batchnorm else None

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return relu(y)


class ConvStack(Module):
    """Two conv-bn-relu layers, the unit used by every encoder/decoder block."""

    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, seeds, batchnorm: bool = True):
        self.layers = [ConvBlock(in_ch, mid_ch, seeds[0], batchnorm),
                       ConvBlock(mid_ch, out_ch, seeds[1], batchnorm)]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
