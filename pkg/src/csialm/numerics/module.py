"""Parameter registry and the small set of layers shared by every network here."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, name: str | None = None):
        super().__init__(data, requires_grad=requires_grad, name=name)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Parameter:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


def normal(rng: np.random.Generator, shape, std: float = 0.02) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape))


def zeros(shape) -> Parameter:
    return Parameter(np.zeros(shape))


def ones(shape) -> Parameter:
    return Parameter(np.ones(shape))


class Module:
    """Walks attributes in assignment order to name parameters, buffers and children."""

    training: bool = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value) -> None:
        if "_buffers" not in self.__dict__:
            self._buffers = {}
        self._buffers[name] = np.array(value, dtype=get_default_dtype())

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self.__dict__.get("_buffers", {}).items():
            yield f"{prefix}{key}", value
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def num_parameters(self, trainable_only: bool = False) -> int:
        params = self.trainable_parameters() if trainable_only else self.parameters()
        return int(sum(p.size for p in params))

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({f"buffer:{name}": b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [n for n in params if n not in state] + [
            f"buffer:{n}" for n in buffers if f"buffer:{n}" not in state
        ]
        if missing:
            raise KeyError(f"state is missing entries: {missing}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
        for name, b in buffers.items():
            b[...] = state[f"buffer:{name}"]

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored as [in x out]."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = xavier_uniform(rng, n_in, n_out)
        self.bias = zeros(n_out) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = ones(dim)
        self.bias = zeros(dim)

    def forward(self, x):
        return F.layer_norm(x, self.gain, self.bias, axis=-1)
