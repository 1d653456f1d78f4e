"""Heterogeneous interaction experts: cross stacks, field-wise stacks and DNNs."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .autodiff import Parameter, Tensor
from .nn import MLP, Linear, Module, kaiming_uniform

EXPERT_KINDS = ("dnn", "cross", "field")


class CrossStack(Module):
    """DCN / DCNv2 cross layers followed by a bias-free projection to ``out_dim``.

    ``dcn``:   x_{l+1} = x0 * (x_l . w_l) + b_l + x_l
    ``dcnv2``: x_{l+1} = x0 * (x_l W_l + b_l) + x_l
    """

    def __init__(self, dim: int, depth: int, out_dim: int, rng: np.random.Generator, mode: str = "dcnv2"):
        if mode not in ("dcn", "dcnv2"):
            raise ValueError(f"unknown cross mode {mode!r}")
        self.dim, self.depth, self.mode = dim, depth, mode
        if mode == "dcn":
            self.weights = [Parameter(kaiming_uniform(rng, dim, (dim, 1))) for _ in range(depth)]
        else:
            self.weights = [Parameter(kaiming_uniform(rng, dim, (dim, dim))) for _ in range(depth)]
        self.biases = [Parameter(np.zeros(dim)) for _ in range(depth)]
        self.projection = Linear(dim, out_dim, rng, bias=False)

    def layers(self, x0: Tensor) -> Tensor:
        if x0.shape[-1] != self.dim:
            raise ValueError(f"cross stack expects dim {self.dim}, got shape {x0.shape}")
        x = x0
        for w, b in zip(self.weights, self.biases):
            if self.mode == "dcn":
                x = x0 * (x @ w) + b + x
            else:
                x = x0 * (x @ w + b) + x
        return x

    def __call__(self, x0: Tensor) -> Tensor:
        return self.projection(self.layers(x0))


def cross_forward(x0: Tensor, stack: CrossStack) -> Tensor:
    return stack(x0)


class FieldStack(Module):
    """Vector-wise field interaction: H_{l+1}[i] = H0[i] * sum_j M_l[i, j] H_l[j] + H_l[i]."""

    def __init__(self, n_fields: int, embed_dim: int, depth: int, out_dim: int, rng: np.random.Generator):
        self.n_fields, self.embed_dim, self.depth = n_fields, embed_dim, depth
        self.mixing = [Parameter(kaiming_uniform(rng, n_fields, (n_fields, n_fields))) for _ in range(depth)]
        self.projection = Linear(n_fields * embed_dim, out_dim, rng, bias=False)

    def layers(self, H0: Tensor) -> Tensor:
        if H0.shape[-2:] != (self.n_fields, self.embed_dim):
            raise ValueError(f"field stack expects [.., {self.n_fields}, {self.embed_dim}], got {H0.shape}")
        H = H0
        for M in self.mixing:
            H = H0 * (M @ H) + H
        return H

    def __call__(self, H0: Tensor) -> Tensor:
        H = self.layers(H0)
        return self.projection(H.reshape(H.shape[0], -1))


def field_interaction_forward(H0: Tensor, stack: FieldStack) -> Tensor:
    return stack(H0)


def dnn_forward(z: Tensor, net: MLP) -> Tensor:
    return net(z)


def trainable_residual(expert_in: Tensor, expert_out: Tensor, scale: Tensor, projection: Linear | None = None) -> Tensor:
    """expert_out + scale * project(expert_in); identity projection when ``projection`` is None."""
    x = expert_in.reshape(expert_in.shape[0], -1) if expert_in.ndim > 2 else expert_in
    if projection is not None:
        x = projection(x)
    if x.shape != expert_out.shape:
        raise ValueError(f"residual shape {x.shape} does not match expert output {expert_out.shape}")
    return expert_out + scale * x


class Expert(Module):
    """An interaction core wrapped with a trainable (zero-initialized) residual link."""

    def __init__(self, kind: str, core: Module, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.kind = kind
        self.core = core
        self.residual_scale = Parameter(np.zeros(1))
        self.residual_proj = None if in_dim == out_dim else Linear(in_dim, out_dim, rng, bias=False)
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        return trainable_residual(x, self.core(x), self.residual_scale, self.residual_proj)


def make_expert(
    kind: str,
    n_fields: int,
    embed_dim: int,
    out_dim: int,
    rng: np.random.Generator,
    depth: int = 2,
    dnn_widths: Sequence[int] = (64, 32),
    cross_mode: str = "dcnv2",
) -> Expert:
    flat = n_fields * embed_dim
    if kind == "dnn":
        core = MLP(flat, [*dnn_widths, out_dim], rng)
    elif kind == "cross":
        core = CrossStack(flat, depth, out_dim, rng, mode=cross_mode)
    elif kind == "field":
        core = FieldStack(n_fields, embed_dim, depth, out_dim, rng)
    else:
        raise ValueError(f"unknown expert kind {kind!r}; expected one of {EXPERT_KINDS}")
    return Expert(kind, core, flat, out_dim, rng)


class ExpertBank(Module):
    """Public experts shared by all tasks plus per-task private experts."""

    def __init__(
        self,
        n_tasks: int,
        n_fields: int,
        embed_dim: int,
        rng: np.random.Generator,
        public_kinds: Sequence[str] = ("dnn", "dnn", "dnn"),
        private_kinds: Sequence[str] = ("cross", "field"),
        out_dim: int = 16,
        **expert_kw,
    ):
        self.out_dim = out_dim
        self.public = [make_expert(k, n_fields, embed_dim, out_dim, rng, **expert_kw) for k in public_kinds]
        self.private = [
            [make_expert(k, n_fields, embed_dim, out_dim, rng, **expert_kw) for k in private_kinds]
            for _ in range(n_tasks)
        ]

    @property
    def n_public(self) -> int:
        return len(self.public)

    @property
    def n_private(self) -> int:
        return len(self.private[0]) if self.private else 0


def route(expert: Expert, inputs) -> Tensor:
    """Feed an expert the branch input matching its interaction kind."""
    return expert(getattr(inputs, expert.kind))
