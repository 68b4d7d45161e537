"""Minimal module system on top of the tensor engine."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(16):
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2.0 * std, 2.0 * std)


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class: children are discovered from instance attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ShapeError(
                f"state dict mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}"
                )
            p.data = arr.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """y = x @ W + b with W stored [in, out]; applied along the last axis."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = Parameter(trunc_normal(rng, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = T.reshape(x, (int(np.prod(lead)), x.shape[-1]))
        out = T.add(T.matmul(flat, self.weight), self.bias)
        return T.reshape(out, lead + (self.weight.shape[1],))


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 groups: int = 1, zero_init: bool = False,
                 init_std: float | None = None):
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        if init_std is None:
            # fan-in scaling for feed-forward conv stacks; residual-branch
            # convs pass a small explicit std instead
            fan_in = (in_channels // groups) * kernel_size * kernel_size
            init_std = float(np.sqrt(2.0 / fan_in))
        init = np.zeros(shape) if zero_init else trunc_normal(rng, shape, init_std)
        self.weight = Parameter(init)
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)


class LayerNorm(Module):
    def __init__(self, extent: int, axis: int = -1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(extent))
        self.beta = Parameter(np.zeros(extent))
        self.axis = axis
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.axis, self.gamma, self.beta, self.eps)
