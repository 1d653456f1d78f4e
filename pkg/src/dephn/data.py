"""Synthetic multi-task datasets built from a frozen teacher network, plus CSV I/O.

Every sample gets a base confidence ``c`` from the teacher. A second task is
derived from ``c`` either through the related transform (log/exp, nearly
monotone) or the unrelated one (sin/cos of |c|, non-monotone), and labels are
indicator thresholds of the confidences.
"""

from __future__ import annotations

import csv
import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_CARDINALITIES = (10, 12, 8, 16, 6, 20, 14, 9)
VARIANTS = ("related", "unrelated")
THRESHOLDS = ("zero", "median", "quantile")
# exp(|c|) overflows float64 beyond ~709.78
MAX_ABS_CONFIDENCE = 700.0


@dataclass
class DatasetSpec:
    n_samples: int = 55_000
    cardinalities: tuple[int, ...] = DEFAULT_CARDINALITIES
    seed: int = 0
    noise_std: float = 0.1
    variant: str = "unrelated"
    threshold: str = "quantile"
    quantile: float = 0.7
    teacher_scale: float = 3.0
    teacher_embed_dim: int = 4
    teacher_hidden: int = 32

    def __post_init__(self):
        self.cardinalities = tuple(int(c) for c in self.cardinalities)
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.threshold not in THRESHOLDS:
            raise ValueError(f"threshold must be one of {THRESHOLDS}, got {self.threshold!r}")
        if any(c < 2 for c in self.cardinalities):
            raise ValueError("every cardinality must be >= 2")


@dataclass
class LabeledDataset:
    features: np.ndarray  # [N, c] int64
    labels: np.ndarray  # [N, T] int64 in {0, 1}
    cardinalities: tuple[int, ...]
    confidences: np.ndarray | None = None  # [N, T]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels differ in row count")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.labels.shape[1]

    @property
    def n_fields(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> LabeledDataset:
        conf = None if self.confidences is None else self.confidences[idx]
        return LabeledDataset(self.features[idx], self.labels[idx], self.cardinalities, conf, dict(self.meta))


class TeacherNet:
    """Frozen random embeddings + one tanh hidden layer -> scalar score."""

    def __init__(self, cardinalities: Sequence[int], rng: np.random.Generator, embed_dim: int = 4, hidden: int = 32):
        self.cardinalities = tuple(cardinalities)
        self.tables = [rng.normal(0.0, 1.0, size=(card, embed_dim)) for card in self.cardinalities]
        d_in = len(self.cardinalities) * embed_dim
        self.w1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, hidden))
        self.b1 = rng.normal(0.0, 0.1, size=hidden)
        self.w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=hidden)

    def raw(self, features: np.ndarray) -> np.ndarray:
        x = np.concatenate([tab[features[:, j]] for j, tab in enumerate(self.tables)], axis=1)
        return np.tanh(x @ self.w1 + self.b1) @ self.w2


def sample_features(spec: DatasetSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    cols = [rng.integers(0, card, size=spec.n_samples) for card in spec.cardinalities]
    return np.stack(cols, axis=1).astype(np.int64)


def teacher_confidence(features: np.ndarray, teacher: TeacherNet, scale: float = 3.0) -> np.ndarray:
    """Standardize the teacher score, squash into (-scale, scale), then mean-center."""
    raw = teacher.raw(features)
    sd = raw.std()
    if sd == 0:
        raise ValueError("degenerate teacher: constant output")
    c = scale * np.tanh((raw - raw.mean()) / sd)
    return c - c.mean()


def _check_range(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ValueError("confidences must be finite")
    if np.any(np.abs(c) > MAX_ABS_CONFIDENCE):
        raise OverflowError(f"|c| > {MAX_ABS_CONFIDENCE} would overflow exp(|c|)")
    return c


def related_confidence(c, noise_std: float = 0.1, rng: np.random.Generator | None = None) -> np.ndarray:
    """sign(c) * 2 ln(|c| + 1) + 0.1 exp(|c|) + eps, eps ~ N(0, noise_std^2)."""
    c = _check_range(c)
    a = np.abs(c)
    y = np.sign(c) * 2.0 * np.log(a + 1.0) + 0.1 * np.exp(a)
    if noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        y = y + rng.normal(0.0, noise_std, size=c.shape)
    return y


def unrelated_confidence(c) -> np.ndarray:
    """sign(c) * (2 sin|c| + 0.1 cos|c|)."""
    c = _check_range(c)
    a = np.abs(c)
    return np.sign(c) * (2.0 * np.sin(a) + 0.1 * np.cos(a))


def binarize(confidences, rule: str = "zero", quantile: float = 0.7) -> np.ndarray:
    """Indicator labels: ``zero`` (> 0), ``median`` (> median) or ``quantile`` (> q-quantile)."""
    v = np.asarray(confidences, dtype=np.float64)
    if rule == "zero":
        thr = 0.0
    elif rule == "median":
        thr = np.median(v)
    elif rule == "quantile":
        thr = np.quantile(v, quantile)
    else:
        raise ValueError(f"unknown threshold rule {rule!r}")
    return (v > thr).astype(np.int64)


def measure_task_correlation(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or a.shape != b.shape:
        raise ValueError("need two equal-length vectors with at least 2 entries")
    if a.std() == 0 or b.std() == 0:
        raise ValueError("zero variance: correlation undefined (degenerate teacher?)")
    return float(np.corrcoef(a, b)[0, 1])


def generate_dataset(spec: DatasetSpec) -> LabeledDataset:
    """Features, base + derived task confidences and labels, fully determined by ``spec``."""
    feat_ss, teacher_ss, noise_ss = np.random.SeedSequence(spec.seed).spawn(3)
    features = sample_features(spec, np.random.default_rng(feat_ss))
    teacher = TeacherNet(spec.cardinalities, np.random.default_rng(teacher_ss), spec.teacher_embed_dim, spec.teacher_hidden)
    c = teacher_confidence(features, teacher, spec.teacher_scale)
    if spec.variant == "related":
        task = related_confidence(c, spec.noise_std, np.random.default_rng(noise_ss))
    else:
        task = unrelated_confidence(c)
    conf = np.stack([c, task], axis=1)
    labels = np.stack([binarize(col, spec.threshold, spec.quantile) for col in conf.T], axis=1)
    meta = {
        "spec": {**asdict(spec), "cardinalities": list(spec.cardinalities)},
        "confidence_correlation": measure_task_correlation(c, task),
        "label_correlation": float(np.corrcoef(labels[:, 0], labels[:, 1])[0, 1]),
        "positive_rate": labels.mean(axis=0).tolist(),
        "teacher": f"frozen embeddings(d={spec.teacher_embed_dim}) -> tanh({spec.teacher_hidden}) -> linear; "
        f"standardized, {spec.teacher_scale}*tanh, mean-centered",
    }
    return LabeledDataset(features, labels, spec.cardinalities, conf, meta)


def split_dataset(ds: LabeledDataset, valid_fraction: float = 0.1, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded shuffle, then the last ``round(N * valid_fraction)`` rows form the validation fold."""
    if not 0 < valid_fraction < 1:
        raise ValueError("valid_fraction must be in (0, 1)")
    n = len(ds)
    n_valid = int(round(n * valid_fraction))
    if n_valid < 1 or n_valid >= n:
        raise ValueError(f"split leaves an empty fold for N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(perm[: n - n_valid])), ds.subset(np.sort(perm[n - n_valid :]))


# ---------------------------------------------------------------------------
# CSV interchange


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_csv(ds: LabeledDataset, path, manifest: bool = True) -> None:
    """Columns ``f0..f{c-1}``, ``y0..y{T-1}`` and, when known, confidences ``c0..``."""
    path = Path(path)
    c, T = ds.n_fields, ds.n_tasks
    header = [f"f{j}" for j in range(c)] + [f"y{t}" for t in range(T)]
    has_conf = ds.confidences is not None
    if has_conf:
        header += [f"c{t}" for t in range(T)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [str(v) for v in ds.features[i]] + [str(v) for v in ds.labels[i]]
            if has_conf:
                row += [repr(float(v)) for v in ds.confidences[i]]
            w.writerow(row)
    if manifest:
        info = {
            "rows": len(ds),
            "n_fields": c,
            "n_tasks": T,
            "cardinalities": list(ds.cardinalities),
            **ds.meta,
        }
        manifest_path(path).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_csv(path, cardinalities: Sequence[int] | None = None, n_tasks: int | None = None) -> LabeledDataset:
    """Parse a dataset CSV, validating header, row shape and vocabulary bounds."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    meta = {}
    mpath = manifest_path(path)
    if mpath.exists():
        meta = json.loads(mpath.read_text(encoding="utf-8"))
        cardinalities = cardinalities or meta.get("cardinalities")
        n_tasks = n_tasks or meta.get("n_tasks")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        feat_cols = [h for h in header if h.startswith("f")]
        label_cols = [h for h in header if h.startswith("y")]
        conf_cols = [h for h in header if h.startswith("c")]
        c, T = len(feat_cols), len(label_cols)
        expected = [f"f{j}" for j in range(c)] + [f"y{t}" for t in range(T)]
        if conf_cols:
            expected += [f"c{t}" for t in range(T)]
        if header != expected or c == 0 or T == 0:
            raise ValueError(f"{path}: header {header} does not match schema f0..f{{c-1}},y0..y{{T-1}}[,c0..]")
        if cardinalities is not None and len(cardinalities) != c:
            raise ValueError(f"{path}: {c} feature columns but schema has {len(cardinalities)} fields")
        if n_tasks is not None and n_tasks != T:
            raise ValueError(f"{path}: {T} label columns but schema has {n_tasks} tasks")
        feats, labels, confs = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                feats.append([int(v) for v in row[:c]])
                lab = [int(v) for v in row[c : c + T]]
                if conf_cols:
                    confs.append([float(v) for v in row[c + T :]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed value in row {row}") from None
            if any(v not in (0, 1) for v in lab):
                raise ValueError(f"{path}:{lineno}: labels must be 0/1")
            labels.append(lab)
    features = np.asarray(feats, dtype=np.int64).reshape(-1, c)
    if cardinalities is None:
        cardinalities = tuple(max(2, int(features[:, j].max()) + 1) for j in range(c))
    card = np.asarray(cardinalities)
    bad = (features < 0) | (features >= card)
    if bad.any():
        row, j = map(int, np.argwhere(bad)[0])
        raise ValueError(f"{path}:{row + 2}: out-of-vocabulary index {features[row, j]} in field f{j} (cardinality {card[j]})")
    conf = np.asarray(confs, dtype=np.float64) if conf_cols else None
    meta.pop("cardinalities", None)
    return LabeledDataset(features, np.asarray(labels, dtype=np.int64).reshape(-1, T), tuple(int(x) for x in card), conf, meta)


def load_csv_dataset(
    path,
    cardinalities: Sequence[int] | None = None,
    n_tasks: int | None = None,
    valid_fraction: float = 0.1,
    seed: int = 0,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Read a dataset CSV and return a seeded (train, validation) split."""
    return split_dataset(read_csv(path, cardinalities, n_tasks), valid_fraction, seed)
