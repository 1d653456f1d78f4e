"""Explicit mappings, task gates, towers and the assembled multi-task models.

Models share one calling convention: ``model(X, modulation=None)`` returns a
:class:`ModelOutput` with one probability node per task. ``modulation`` is a
callable from the [T, K, P] gate snapshot to per-gate gradient scales; only
models with public gates (DEPHN/MTPHN) consume it.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .experts import Expert, ExpertBank, make_expert, route
from .features import Embedding, FeaturePipeline, FieldSchema
from .nn import MLP, Linear, Module, kaiming_uniform
from .virtual_gradient import apply_gradient_scaling

MAPPINGS: dict[str, Callable[[Tensor], Tensor]] = {
    "rm": lambda x: x,
    "sin": ad.sin,
    "cos": ad.cos,
}

GATING_MODES = ("tvg", "mg")
COMBINE_MODES = ("logit-sum", "literal")
PROB_EPS = 1e-7


def apply_mappings(expert_out: Tensor, mappings: Sequence[str]) -> list[Tensor]:
    """One elementwise-mapped copy of ``expert_out`` per mapping name."""
    for m in mappings:
        if m not in MAPPINGS:
            raise ValueError(f"unknown mapping {m!r}; expected one of {sorted(MAPPINGS)}")
    return [MAPPINGS[m](expert_out) for m in mappings]


class GateTable(Module):
    """Gate values G[t][k][p].

    ``tvg``: one trainable raw scalar per entry, squashed by a sigmoid.
    ``mg``: per-task linear map of z_pub to K*P logits, softmax over (k, p).
    """

    def __init__(self, mode: str, n_tasks: int, n_experts: int, n_mappings: int, in_dim: int, rng: np.random.Generator):
        if mode not in GATING_MODES:
            raise ValueError(f"unknown gating mode {mode!r}")
        self.mode = mode
        self.shape = (n_tasks, n_experts, n_mappings)
        if mode == "tvg":
            self.raw = [Parameter(np.zeros((n_experts, n_mappings))) for _ in range(n_tasks)]
        else:
            self.linear = [Linear(in_dim, n_experts * n_mappings, rng) for _ in range(n_tasks)]

    def __call__(self, z_pub: Tensor, task: int) -> Tensor:
        """[K, P] in tvg mode, [B, K, P] in mg mode."""
        if not 0 <= task < self.shape[0]:
            raise IndexError(f"task index {task} out of range for {self.shape[0]} tasks")
        _, K, P = self.shape
        if self.mode == "tvg":
            return ad.sigmoid(self.raw[task])
        logits = self.linear[task](z_pub)
        return ad.softmax(logits, axis=-1).reshape(z_pub.shape[0], K, P)


def gate_values(z_pub: Tensor, table: GateTable, task: int) -> Tensor:
    return table(z_pub, task)


class TaskTower(Module):
    """Per-task weights over gated mapped public outputs and over private outputs.

    ``hidden=()`` is the literal linear read-out; otherwise each side gets an
    MLP with the given hidden widths ending in one logit.
    """

    def __init__(self, n_public: int, n_mappings: int, n_private: int, dim: int, rng: np.random.Generator, hidden: Sequence[int] = ()):
        self.hidden = tuple(hidden)
        pub_in = n_public * n_mappings * dim
        pri_in = n_private * dim
        if self.hidden:
            self.public_mlp = MLP(pub_in, [*self.hidden, 1], rng) if pub_in else None
            self.private_mlp = MLP(pri_in, [*self.hidden, 1], rng) if pri_in else None
        else:
            self.w_pub = Parameter(kaiming_uniform(rng, max(pub_in, 1), (n_public, n_mappings, dim)))
            self.w_pri = Parameter(kaiming_uniform(rng, max(pri_in, 1), (n_private, dim)))
        self.b_pub = Parameter(np.zeros(1))
        self.b_pri = Parameter(np.zeros(1))


def assemble_public_logit(mapped: Tensor, gates: Tensor, tower: TaskTower) -> Tensor:
    """sum_k sum_p <W_kp, G_kp * f_p(e_k)> + b_pub, per sample.

    ``mapped`` is [B, K, P, d_e]; ``gates`` is [K, P] or [B, K, P].
    """
    B = mapped.shape[0]
    gated = mapped * gates.reshape(*gates.shape, 1)
    if tower.hidden:
        return tower.public_mlp(gated.reshape(B, -1)).reshape(B) + tower.b_pub
    return ad.sum(gated * tower.w_pub, axis=(1, 2, 3)) + tower.b_pub


def assemble_private_logit(private_outs: Sequence[Tensor], tower: TaskTower, batch: int) -> Tensor:
    """sum_k' <W_k', e_k'(z_pri)> + b_pri; just the bias when there are no private experts."""
    if not private_outs:
        return ad.constant(np.zeros(batch)) + tower.b_pri
    stacked = ad.stack(private_outs, axis=1)
    if tower.hidden:
        return tower.private_mlp(stacked.reshape(batch, -1)).reshape(batch) + tower.b_pri
    return ad.sum(stacked * tower.w_pri, axis=(1, 2)) + tower.b_pri


def combine_predictions(logit_pub: Tensor, logit_pri: Tensor, mode: str = "logit-sum") -> Tensor:
    """``logit-sum``: sigmoid(pub + pri). ``literal``: sigmoid(pub) + sigmoid(pri), range (0, 2)."""
    if mode == "logit-sum":
        return ad.sigmoid(logit_pub + logit_pri)
    if mode == "literal":
        return ad.sigmoid(logit_pub) + ad.sigmoid(logit_pri)
    raise ValueError(f"unknown combine mode {mode!r}")


@dataclass
class ModelOutput:
    probs: list[Tensor]
    logits: list[Tensor | None]
    logit_pub: list[Tensor] = field(default_factory=list)
    logit_pri: list[Tensor] = field(default_factory=list)
    gate_nodes: list[Tensor] = field(default_factory=list)
    gate_snapshot: np.ndarray | None = None
    gamma: np.ndarray | None = None

    def prob_matrix(self) -> np.ndarray:
        return np.stack([p.value for p in self.probs], axis=1)

    def logit_matrix(self) -> np.ndarray:
        return np.stack([lg.value for lg in self.logits], axis=1)


def task_loss(prob: Tensor, y: np.ndarray) -> Tensor:
    """Mean binary log-loss with predictions clamped to (1e-7, 1 - 1e-7)."""
    p = ad.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    ll = ad.constant(y) * ad.log(p) + ad.constant(1.0 - y) * ad.log(1.0 - p)
    return -ad.mean(ll)


class MultiTaskModel(Module):
    n_tasks: int
    kind: str = "base"

    def losses(self, out: ModelOutput, Y: np.ndarray) -> list[Tensor]:
        return [task_loss(p, Y[:, t]) for t, p in enumerate(out.probs)]


class DEPHN(MultiTaskModel):
    """SSG inputs, heterogeneous public/private experts, explicit mappings and gated towers.

    MTPHN is the same network with only the raw mapping and softmax gating
    (see :func:`build_model`).
    """

    kind = "dephn"

    def __init__(
        self,
        schema: FieldSchema,
        n_tasks: int = 2,
        seed: int = 0,
        public_kinds: Sequence[str] = ("dnn", "dnn", "dnn"),
        private_kinds: Sequence[str] = ("cross", "field"),
        mappings: Sequence[str] = ("rm", "sin", "cos"),
        gating: str = "tvg",
        combine: str = "logit-sum",
        expert_dim: int = 16,
        depth: int = 2,
        dnn_widths: Sequence[int] = (64, 32),
        cross_mode: str = "dcnv2",
        heads: int = 2,
        use_ssg: bool = True,
        per_field_gate: bool = False,
        tower_hidden: Sequence[int] = (),
    ):
        if combine not in COMBINE_MODES:
            raise ValueError(f"unknown combine mode {combine!r}")
        rng = np.random.default_rng(seed)
        self.n_tasks = n_tasks
        self.mappings = tuple(mappings)
        apply_mappings(ad.constant(np.zeros((1, 1))), self.mappings)
        self.combine = combine
        self.features = FeaturePipeline(schema, rng, heads=heads, use_ssg=use_ssg, per_field_gate=per_field_gate)
        self.bank = ExpertBank(
            n_tasks,
            schema.n_fields,
            schema.embed_dim,
            rng,
            public_kinds=public_kinds,
            private_kinds=private_kinds,
            out_dim=expert_dim,
            depth=depth,
            dnn_widths=dnn_widths,
            cross_mode=cross_mode,
        )
        K, P = self.bank.n_public, len(self.mappings)
        self.gates = GateTable(gating, n_tasks, K, P, schema.flat_dim, rng)
        self.towers = [TaskTower(K, P, self.bank.n_private, expert_dim, rng, tower_hidden) for _ in range(n_tasks)]

    @property
    def gating(self) -> str:
        return self.gates.mode

    def public_mapped(self, inputs) -> Tensor | None:
        if not self.bank.public:
            return None
        outs = ad.stack([route(e, inputs) for e in self.bank.public], axis=1)  # [B, K, d_e]
        return ad.stack(apply_mappings(outs, self.mappings), axis=2)  # [B, K, P, d_e]

    def __call__(self, X: np.ndarray, modulation=None) -> ModelOutput:
        inputs = self.features(X)
        B = inputs.embeddings.shape[0]
        mapped = self.public_mapped(inputs)
        gates = [self.gates(inputs.dnn, t) for t in range(self.n_tasks)] if mapped is not None else []
        snapshot = gamma = None
        if gates:
            snapshot = np.stack([g.value if g.ndim == 2 else g.value.mean(axis=0) for g in gates])
            if modulation is not None and self.n_tasks > 1:
                gamma = np.asarray(modulation(snapshot), dtype=np.float64)
                gates = [apply_gradient_scaling(g, gamma[t]) for t, g in enumerate(gates)]
        out = ModelOutput(probs=[], logits=[], gate_nodes=gates, gate_snapshot=snapshot, gamma=gamma)
        for t in range(self.n_tasks):
            tower = self.towers[t]
            if mapped is not None:
                pub = assemble_public_logit(mapped, gates[t], tower)
            else:
                pub = ad.constant(np.zeros(B)) + tower.b_pub
            pri = assemble_private_logit([route(e, inputs) for e in self.bank.private[t]], tower, B)
            out.logit_pub.append(pub)
            out.logit_pri.append(pri)
            out.logits.append(pub + pri if self.combine == "logit-sum" else None)
            out.probs.append(combine_predictions(pub, pri, self.combine))
        return out

    def gate_table(self, X: np.ndarray | None = None) -> np.ndarray:
        """[T, K, P] effective gates; mg gates are averaged over ``X``."""
        if self.gates.mode == "tvg":
            return np.stack([0.5 * (1.0 + np.tanh(0.5 * r.value)) for r in self.gates.raw])
        if X is None:
            raise ValueError("mg gate values depend on the input; pass X")
        with ad.no_grad():
            z = self.features(X).dnn
            return np.stack([self.gates(z, t).value.mean(axis=0) for t in range(self.n_tasks)])


def mmoe_lite_forward(
    z_pub: Tensor,
    experts: Sequence[Expert],
    gates: Sequence[Linear],
    towers: Sequence[Module],
) -> list[Tensor]:
    """tower_t(sum_k g_k^t e_k(z)) logits, with g^t = softmax(gate_t(z))."""
    outs = ad.stack([e(z_pub) for e in experts], axis=1)  # [B, K, d_e]
    logits = []
    for gate, tower in zip(gates, towers):
        g = ad.softmax(gate(z_pub), axis=-1)
        pooled = ad.sum(outs * g.reshape(*g.shape, 1), axis=1)
        logits.append(tower(pooled).reshape(z_pub.shape[0]))
    return logits


class MMoELite(MultiTaskModel):
    """Classic multi-gate mixture of DNN experts on the raw flattened embedding."""

    kind = "mmoe"

    def __init__(
        self,
        schema: FieldSchema,
        n_tasks: int = 2,
        seed: int = 0,
        n_experts: int = 3,
        expert_dim: int = 16,
        dnn_widths: Sequence[int] = (64, 32),
        tower_hidden: Sequence[int] = (),
        **_ignored,
    ):
        rng = np.random.default_rng(seed)
        self.n_tasks = n_tasks
        self.features = FeaturePipeline(schema, rng, use_ssg=False)
        self.experts = [make_expert("dnn", schema.n_fields, schema.embed_dim, expert_dim, rng, dnn_widths=dnn_widths) for _ in range(n_experts)]
        self.gates = [Linear(schema.flat_dim, n_experts, rng) for _ in range(n_tasks)]
        self.towers = [MLP(expert_dim, [*tower_hidden, 1], rng) for _ in range(n_tasks)]

    def __call__(self, X: np.ndarray, modulation=None) -> ModelOutput:
        z = self.features(X).dnn
        logits = mmoe_lite_forward(z, self.experts, self.gates, self.towers)
        return ModelOutput(probs=[ad.sigmoid(lg) for lg in logits], logits=logits)


class SingleTaskDNN(MultiTaskModel):
    """Independent per-task networks (own embedding, own MLP); nothing is shared."""

    kind = "dnn"

    def __init__(self, schema: FieldSchema, n_tasks: int = 2, seed: int = 0, dnn_widths: Sequence[int] = (64, 32), **_ignored):
        rng = np.random.default_rng(seed)
        self.n_tasks = n_tasks
        self.embeddings = [Embedding(schema, rng) for _ in range(n_tasks)]
        self.nets = [MLP(schema.flat_dim, [*dnn_widths, 1], rng) for _ in range(n_tasks)]

    def __call__(self, X: np.ndarray, modulation=None) -> ModelOutput:
        logits = []
        for emb, net in zip(self.embeddings, self.nets):
            E = emb(X)
            logits.append(net(E.reshape(E.shape[0], -1)).reshape(E.shape[0]))
        return ModelOutput(probs=[ad.sigmoid(lg) for lg in logits], logits=logits)


MODEL_NAMES = ("dnn", "mmoe", "mtphn", "dephn")


def build_model(name: str, schema: FieldSchema, n_tasks: int, seed: int = 0, **kw) -> MultiTaskModel:
    """Instantiate one of ``MODEL_NAMES``. MTPHN forces the raw mapping and softmax gating."""
    name = name.lower()
    if name == "dnn":
        return SingleTaskDNN(schema, n_tasks, seed, **_pick(kw, "dnn_widths"))
    if name == "mmoe":
        kw = dict(kw)
        if "public_kinds" in kw:
            kw["n_experts"] = len(kw.pop("public_kinds"))
        return MMoELite(schema, n_tasks, seed, **_pick(kw, "n_experts", "expert_dim", "dnn_widths", "tower_hidden"))
    if name == "mtphn":
        kw = {**kw, "mappings": ("rm",), "gating": "mg"}
        return DEPHN(schema, n_tasks, seed, **kw)
    if name == "dephn":
        return DEPHN(schema, n_tasks, seed, **kw)
    raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")


def _pick(kw: dict, *keys: str) -> dict:
    return {k: kw[k] for k in keys if k in kw}


def public_private_activation_ratio(model: DEPHN, X: np.ndarray) -> np.ndarray:
    """Per task: mean|logit_pub| / (mean|logit_pub| + mean|logit_pri|); 0.5 when both vanish."""
    with ad.no_grad():
        out = model(X)
    ratios = []
    for pub, pri in zip(out.logit_pub, out.logit_pri):
        a = float(np.mean(np.abs(pub.value)))
        b = float(np.mean(np.abs(pri.value)))
        ratios.append(0.5 if a + b == 0 else a / (a + b))
    return np.array(ratios)
