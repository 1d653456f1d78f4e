"""Minimal module system, affine layers and the Adam optimizer on top of the tape."""

from __future__ import annotations

from collections.abc import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Module:
    """Container that enumerates its :class:`Parameter` leaves by attribute path.

    Attributes are visited in assignment order, so the enumeration is stable
    across runs. A parameter object reachable under several paths (e.g. a
    public expert shared by every task) is reported once, under its first path.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) in seen or not p.trainable:
                continue
            seen.add(id(p))
            p.name = name
            out[name] = p
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def _walk(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            yield from _walk_value(val, path)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.value[...] = arr


def _walk_value(val, path: str):
    if isinstance(val, Parameter):
        yield path, val
    elif isinstance(val, Module):
        yield from val._walk(path + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk_value(item, f"{path}.{i}")
    elif isinstance(val, dict):
        for k, item in val.items():
            yield from _walk_value(item, f"{path}.{k}")


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape: Sequence[int]) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(kaiming_uniform(rng, in_dim, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"Linear expects last dim {self.in_dim}, got shape {x.shape}")
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class MLP(Module):
    """Affine + relu stack; the last layer is linear."""

    def __init__(self, in_dim: int, widths: Sequence[int], rng: np.random.Generator):
        dims = [in_dim, *widths]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim if self.layers else 0

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class Adam:
    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Parameter], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
