"""Small layer containers on top of the functional ops."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .ops import BatchNormState, ConvKernel
from .tensor import Tensor, relu


class Module:
    """Parameters and buffers are discovered from instance attributes in definition order."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if not key.startswith("_"):
                yield from _flatten(key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, BatchNormState):
                yield name + ".gamma", value.gamma
                yield name + ".beta", value.beta
            elif value.requires_grad:
                yield name, value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, BatchNormState):
                yield name + ".running_mean", value.running_mean
                yield name + ".running_var", value.running_var

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in targets.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {arr.shape}")
            arr[...] = src

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _flatten(name: str, value) -> Iterator[tuple[str, object]]:
    # containers may nest, e.g. the decoder keeps a dict of branch lists
    if isinstance(value, (Module, Tensor, BatchNormState)):
        yield name, value
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _flatten(f"{name}.{i}", item)
    elif isinstance(value, dict):
        for k, item in value.items():
            yield from _flatten(f"{name}.{k}", item)


def kaiming_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int, dtype=np.float32) -> np.ndarray:
    std = np.sqrt(2.0 / (c_in * k * k))
    return (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 bias: bool = False, dtype=np.float32):
        self.weight = Tensor(kaiming_conv(rng, c_out, c_in, k, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
        self._stride = stride
        self._padding = (k - 1) // 2

    @property
    def kernel(self) -> ConvKernel:
        return ConvKernel(self.weight, self.bias, self._stride, self._padding)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.kernel)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.state = BatchNormState.fresh(channels, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batch_norm(x, self.state, training)


class ConvBNAct(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1, act: str = "relu", dtype=np.float32):
        self.conv = Conv2d(rng, c_in, c_out, k, stride, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype)
        self._act = act

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return activate(self.bn(self.conv(x), training), self._act)


class ResidualBlock(Module):
    """Two 3x3 conv+BN layers with an identity shortcut."""

    def __init__(self, rng, channels: int, dtype=np.float32):
        self.conv1 = ConvBNAct(rng, channels, channels, dtype=dtype)
        self.conv2 = Conv2d(rng, channels, channels, dtype=dtype)
        self.bn2 = BatchNorm2d(channels, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.bn2(self.conv2(self.conv1(x, training)), training)
        return relu(y + x)


def activate(x: Tensor, name: str) -> Tensor:
    if name == "relu":
        return relu(x)
    if name in ("none", "identity"):
        return x
    raise ValueError(f"unknown activation {name!r}")
