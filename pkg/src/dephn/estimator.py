"""scikit-learn style wrapper: ``MultiTaskClassifier(...).fit(X, Y).predict_proba(X)``.

``X`` is an integer matrix of categorical field indices, ``Y`` a binary
[N, T] label matrix. All numerical work goes through the package's own tape.
"""

from __future__ import annotations

import logging
import time

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .assembly import DEPHN, MODEL_NAMES, ModelOutput, MultiTaskModel, build_model
from .features import FieldSchema
from .metrics import SingleClassError, auc
from .nn import Adam
from .virtual_gradient import make_modulation

logger = logging.getLogger(__name__)


def train_step(
    model: MultiTaskModel,
    optimizer: Adam,
    X: np.ndarray,
    Y: np.ndarray,
    virtual_gradient: bool = False,
    similarity: str = "abs-pearson",
    coefficient: str = "add-sqrt",
    gamma_override: float | None = None,
    params: dict | None = None,
) -> tuple[np.ndarray, ModelOutput]:
    """Forward every task, sum the task log-losses, backpropagate, update.

    With ``virtual_gradient`` the gate gradients of a :class:`DEPHN` are
    rescaled by coefficients computed from this batch's labels and the current
    gate values. ``gamma_override`` pins every coefficient to a constant.
    """
    params = params if params is not None else model.named_parameters()
    modulation = None
    if virtual_gradient and isinstance(model, DEPHN) and model.n_tasks > 1:
        if gamma_override is not None:
            modulation = lambda g: np.full_like(g, float(gamma_override))
        else:
            modulation = make_modulation(Y, similarity, coefficient)
    out = model(X, modulation)
    losses = model.losses(out, Y)
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    values = np.array([float(l.value) for l in losses])
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"non-finite task loss {values.tolist()} (batch of {len(X)})")
    grads = ad.backward(total, params)
    optimizer.step(params, grads)
    return values, out


class MultiTaskClassifier(ClassifierMixin, BaseEstimator):
    """Multi-task binary classifier over categorical fields.

    ``model`` selects the architecture: ``dnn`` (independent per-task nets),
    ``mmoe`` (MMoE-lite), ``mtphn`` or ``dephn``. The virtual gradient only
    applies to ``dephn``.
    """

    def __init__(
        self,
        model: str = "dephn",
        epochs: int = 5,
        batch_size: int = 256,
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        adam_eps: float = 1e-8,
        gating: str = "tvg",
        mappings: tuple = ("rm", "sin", "cos"),
        combine: str = "logit-sum",
        virtual_gradient: bool = True,
        similarity: str = "abs-pearson",
        coefficient: str = "add-sqrt",
        embed_dim: int = 8,
        heads: int = 2,
        expert_dim: int = 16,
        depth: int = 2,
        dnn_widths: tuple = (64, 32),
        public_kinds: tuple = ("dnn", "dnn", "dnn"),
        private_kinds: tuple = ("cross", "field"),
        cross_mode: str = "dcnv2",
        tower_hidden: tuple = (),
        per_field_gate: bool = False,
        use_ssg: bool = True,
        cardinalities: tuple | None = None,
        seed: int = 0,
    ):
        self.model = model
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.gating = gating
        self.mappings = mappings
        self.combine = combine
        self.virtual_gradient = virtual_gradient
        self.similarity = similarity
        self.coefficient = coefficient
        self.embed_dim = embed_dim
        self.heads = heads
        self.expert_dim = expert_dim
        self.depth = depth
        self.dnn_widths = dnn_widths
        self.public_kinds = public_kinds
        self.private_kinds = private_kinds
        self.cross_mode = cross_mode
        self.tower_hidden = tower_hidden
        self.per_field_gate = per_field_gate
        self.use_ssg = use_ssg
        self.cardinalities = cardinalities
        self.seed = seed

    # -- construction -----------------------------------------------------

    def _validate_X(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.int64, ensure_min_samples=1)
        if np.any(X < 0):
            raise ValueError("feature indices must be non-negative")
        return X

    def _validate_Y(self, Y, n: int) -> np.ndarray:
        Y = np.asarray(Y)
        if Y.ndim == 1:
            Y = Y[:, None]
        Y = check_array(Y, dtype=np.int64)
        if Y.shape[0] != n:
            raise ValueError(f"X has {n} rows but Y has {Y.shape[0]}")
        if not np.isin(Y, (0, 1)).all():
            raise ValueError("labels must be binary 0/1")
        return Y

    def build(self, n_tasks: int, cardinalities) -> MultiTaskClassifier:
        """Create a fresh, untrained network (``fit`` calls this)."""
        if self.model not in MODEL_NAMES:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODEL_NAMES}")
        self.schema_ = FieldSchema(tuple(cardinalities), self.embed_dim)
        self.n_tasks_ = n_tasks
        self.model_ = build_model(
            self.model,
            self.schema_,
            n_tasks,
            seed=self.seed,
            public_kinds=tuple(self.public_kinds),
            private_kinds=tuple(self.private_kinds),
            mappings=tuple(self.mappings),
            gating=self.gating,
            combine=self.combine,
            expert_dim=self.expert_dim,
            depth=self.depth,
            dnn_widths=tuple(self.dnn_widths),
            cross_mode=self.cross_mode,
            heads=self.heads,
            use_ssg=self.use_ssg,
            per_field_gate=self.per_field_gate,
            tower_hidden=tuple(self.tower_hidden),
        )
        self.params_ = self.model_.named_parameters()
        self.optimizer_ = Adam(self.learning_rate, (self.beta1, self.beta2), self.adam_eps)
        self.history_: list[np.ndarray] = []
        return self

    @property
    def uses_virtual_gradient(self) -> bool:
        return bool(self.virtual_gradient) and self.model == "dephn"

    # -- training ---------------------------------------------------------

    def fit(self, X, Y, callback=None) -> MultiTaskClassifier:
        X = self._validate_X(X)
        Y = self._validate_Y(Y, X.shape[0])
        cards = self.cardinalities
        if cards is None:
            cards = tuple(max(2, int(c) + 1) for c in X.max(axis=0))
        self.build(Y.shape[1], cards)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1]))
        for epoch in range(self.epochs):
            start = time.perf_counter()
            order = rng.permutation(X.shape[0])
            totals = np.zeros(self.n_tasks_)
            count = 0
            for lo in range(0, len(order), self.batch_size):
                idx = order[lo : lo + self.batch_size]
                losses = self.partial_fit(X[idx], Y[idx])
                totals += losses * len(idx)
                count += len(idx)
            epoch_loss = totals / count
            self.history_.append(epoch_loss)
            logger.info("epoch %d loss %s (%.1fs)", epoch + 1, np.round(epoch_loss, 5).tolist(), time.perf_counter() - start)
            if callback is not None:
                callback(self, epoch)
        return self

    def partial_fit(self, X, Y) -> np.ndarray:
        """One optimizer step on a batch; returns the per-task losses."""
        check_is_fitted(self, "model_")
        losses, _ = train_step(
            self.model_,
            self.optimizer_,
            X,
            Y,
            virtual_gradient=self.uses_virtual_gradient,
            similarity=self.similarity,
            coefficient=self.coefficient,
            params=self.params_,
        )
        return losses

    # -- inference --------------------------------------------------------

    def _forward(self, X, batch: int = 4096) -> tuple[np.ndarray, np.ndarray]:
        check_is_fitted(self, "model_")
        X = self._validate_X(X)
        probs, logits = [], []
        with ad.no_grad():
            for lo in range(0, X.shape[0], batch):
                out = self.model_(X[lo : lo + batch])
                probs.append(out.prob_matrix())
                if out.logit_pub:
                    logits.append(np.stack([(a + b).value for a, b in zip(out.logit_pub, out.logit_pri)], axis=1))
                else:
                    logits.append(out.logit_matrix())
        return np.concatenate(probs), np.concatenate(logits)

    def predict_proba(self, X) -> np.ndarray:
        """[N, T] task probabilities (range (0, 2) under the literal combine mode)."""
        return self._forward(X)[0]

    def decision_function(self, X) -> np.ndarray:
        """[N, T] pre-activation scores (public + private logit for DEPHN/MTPHN)."""
        return self._forward(X)[1]

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > 0.5).astype(np.int64)

    def score(self, X, Y, sample_weight=None) -> float:
        """Mean AUC over the tasks that have both classes present."""
        P = self.predict_proba(X)
        Y = self._validate_Y(Y, P.shape[0])
        vals = []
        for t in range(Y.shape[1]):
            try:
                vals.append(auc(P[:, t], Y[:, t]))
            except SingleClassError:
                continue
        if not vals:
            raise SingleClassError("no task has both classes present")
        return float(np.mean(vals))

    def gate_table(self, X=None) -> np.ndarray | None:
        check_is_fitted(self, "model_")
        if not isinstance(self.model_, DEPHN) or not self.model_.bank.public:
            return None
        return self.model_.gate_table(None if X is None else self._validate_X(X))
