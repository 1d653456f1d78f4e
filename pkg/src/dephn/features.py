"""Shared field embeddings, multi-head self-attention and soft selection gating."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .nn import Linear, Module

BRANCHES = ("cross", "field", "dnn")


@dataclass(frozen=True)
class FieldSchema:
    cardinalities: tuple[int, ...]
    embed_dim: int = 8

    def __post_init__(self):
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        if len(self.cardinalities) < 1:
            raise ValueError("need at least one field")
        if any(c < 2 for c in self.cardinalities):
            raise ValueError(f"every cardinality must be >= 2, got {self.cardinalities}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")

    @property
    def n_fields(self) -> int:
        return len(self.cardinalities)

    @property
    def flat_dim(self) -> int:
        return self.n_fields * self.embed_dim

    def validate(self, X: np.ndarray) -> None:
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != self.n_fields:
            raise ValueError(f"expected feature matrix with {self.n_fields} columns, got shape {X.shape}")
        card = np.asarray(self.cardinalities)
        bad = (X < 0) | (X >= card)
        if bad.any():
            j = int(np.argmax(bad.any(axis=0)))
            raise IndexError(f"out-of-vocabulary index in field f{j} (cardinality {card[j]})")


class Embedding(Module):
    """One table per field, stored stacked with per-field row offsets."""

    def __init__(self, schema: FieldSchema, rng: np.random.Generator, scale: float = 0.1):
        self.schema = schema
        self._offsets = np.concatenate([[0], np.cumsum(schema.cardinalities)[:-1]]).astype(np.int64)
        self.table = Parameter(rng.normal(0.0, scale, size=(sum(schema.cardinalities), schema.embed_dim)))

    def __call__(self, X: np.ndarray) -> Tensor:
        X = np.asarray(X, dtype=np.int64)
        self.schema.validate(X)
        return ad.take(self.table, X + self._offsets)


def embed_batch(X: np.ndarray, table: Embedding) -> Tensor:
    """[B, c] integer indices -> [B, c, d_f] embeddings."""
    return table(X)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product attention across the field axis; no positional encoding."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"embed_dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, c, _ = x.shape
        return ad.transpose(x.reshape(B, c, self.heads, self.dim // self.heads), (0, 2, 1, 3))

    def __call__(self, E: Tensor) -> Tensor:
        B, c, d = E.shape
        q, k, v = self._split(self.query(E)), self._split(self.key(E)), self._split(self.value(E))
        scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d // self.heads))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.transpose(attn @ v, (0, 2, 1, 3)).reshape(B, c, d)
        return self.out(ctx)


def multi_head_self_attention(E: Tensor, attention: MultiHeadSelfAttention) -> Tensor:
    return attention(E)


class SsgGate(Module):
    """Sigmoid-parameterized blend weights for one branch.

    ``per_field`` keeps one weight per field (broadcast over the embedding
    dimension) instead of one per coordinate.
    """

    def __init__(self, n_fields: int, embed_dim: int, per_field: bool = False, init: float = 0.0):
        self.n_fields, self.embed_dim, self.per_field = n_fields, embed_dim, per_field
        size = n_fields if per_field else n_fields * embed_dim
        self.raw = Parameter(np.full(size, float(init)))

    def gate(self) -> Tensor:
        g = ad.sigmoid(self.raw)
        return g.reshape(self.n_fields, 1) if self.per_field else g.reshape(self.n_fields, self.embed_dim)

    def values(self) -> np.ndarray:
        g = 0.5 * (1.0 + np.tanh(0.5 * self.raw.value))
        return np.repeat(g, self.embed_dim) if self.per_field else g.copy()


def soft_selection_gate(E: Tensor, E_sa: Tensor, gate: SsgGate) -> Tensor:
    """E_sg = g * E_sa + (1 - g) * E, with g broadcast over the batch."""
    if E.shape != E_sa.shape:
        raise ValueError(f"soft_selection_gate: shapes differ {E.shape} vs {E_sa.shape}")
    if E.shape[1:] != (gate.n_fields, gate.embed_dim):
        raise ValueError(f"gate expects fields x dim {(gate.n_fields, gate.embed_dim)}, got {E.shape[1:]}")
    g = gate.gate()
    return g * E_sa + (1.0 - g) * E


def build_branch_input(E_sg: Tensor, keep_fields: bool = False) -> Tensor:
    """Flatten [B, c, d_f] to the concatenated [B, c*d_f] vector unless ``keep_fields``."""
    if keep_fields:
        return E_sg
    B = E_sg.shape[0]
    return E_sg.reshape(B, -1)


@dataclass
class BranchInputs:
    dnn: Tensor
    cross: Tensor
    field: Tensor
    embeddings: Tensor | None = None


class FeaturePipeline(Module):
    """Embedding -> one shared MSA pass -> one SSG gate per interaction branch.

    With ``use_ssg=False`` the raw embedding feeds every branch (MMoE-style input).
    """

    def __init__(
        self,
        schema: FieldSchema,
        rng: np.random.Generator,
        heads: int = 2,
        use_ssg: bool = True,
        per_field_gate: bool = False,
        branches: Sequence[str] = BRANCHES,
    ):
        self.schema = schema
        self.embedding = Embedding(schema, rng)
        self.use_ssg = use_ssg
        if use_ssg:
            self.attention = MultiHeadSelfAttention(schema.embed_dim, heads, rng)
            self.ssg = {b: SsgGate(schema.n_fields, schema.embed_dim, per_field_gate) for b in branches}

    def __call__(self, X: np.ndarray) -> BranchInputs:
        E = embed_batch(X, self.embedding)
        if not self.use_ssg:
            flat = build_branch_input(E)
            return BranchInputs(dnn=flat, cross=flat, field=E, embeddings=E)
        E_sa = multi_head_self_attention(E, self.attention)
        blended = {b: soft_selection_gate(E, E_sa, g) for b, g in self.ssg.items()}
        return BranchInputs(
            dnn=build_branch_input(blended["dnn"]) if "dnn" in blended else None,
            cross=build_branch_input(blended["cross"]) if "cross" in blended else None,
            field=blended.get("field"),
            embeddings=E,
        )
