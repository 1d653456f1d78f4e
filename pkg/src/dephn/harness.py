"""Experiment configuration, runs, sweeps and CSV report emitters.

A run directory holds:

    config.json          resolved config + hash
    metrics.csv          per-task validation logloss / AUC
    loss_curve.csv       per-epoch mean training loss per task
    gates.csv            task, expert, mapping, gate_value (gated models)
    ssg.csv              SSG gate value per branch and coordinate
    activation_ratio.csv public share of |logit| per task
    scatter.csv          teacher confidence vs model logit on validation rows
    model.npz            trained parameters
    run_info.json        wall-clock timings (not part of the reproducible set)

Every CSV carries ``config_hash`` and ``seed`` columns.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import virtual_gradient as vg
from .assembly import DEPHN, public_private_activation_ratio
from .data import DatasetSpec, LabeledDataset, generate_dataset, read_csv, split_dataset
from .estimator import MultiTaskClassifier
from .features import BRANCHES
from .metrics import SingleClassError, auc, logloss

logger = logging.getLogger(__name__)

REPRODUCIBLE_FILES = (
    "metrics.csv",
    "loss_curve.csv",
    "gates.csv",
    "ssg.csv",
    "activation_ratio.csv",
    "scatter.csv",
)


@dataclass
class TrainConfig:
    """Everything that determines a run. Keys mirror the JSON config file."""

    model: str = "dephn"
    epochs: int = 5
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gating: str = "tvg"
    mappings: tuple = ("rm", "sin", "cos")
    combine: str = "logit-sum"
    virtual_gradient: bool = True
    similarity: str = "abs-pearson"
    coefficient: str = "add-sqrt"
    embed_dim: int = 8
    heads: int = 2
    expert_dim: int = 16
    depth: int = 2
    dnn_widths: tuple = (64, 32)
    public_kinds: tuple = ("dnn", "dnn", "dnn")
    private_kinds: tuple = ("cross", "field")
    cross_mode: str = "dcnv2"
    tower_hidden: tuple = ()
    per_field_gate: bool = False
    use_ssg: bool = True
    seed: int = 0
    # data
    data_path: str | None = None
    valid_fraction: float = 1 / 11
    dataset: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in ("mappings", "dnn_widths", "public_kinds", "private_kinds", "tower_hidden"):
            setattr(self, key, tuple(getattr(self, key)))
        if self.model == "dephn" and self.virtual_gradient:
            if self.similarity not in vg.SIMILARITIES:
                raise ValueError(f"unknown similarity {self.similarity!r}")
            if self.coefficient not in vg.COEFFICIENTS:
                raise ValueError(f"unknown coefficient function {self.coefficient!r}")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> TrainConfig:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON config ({exc})") from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(**self.dataset)

    def estimator(self, cardinalities=None) -> MultiTaskClassifier:
        names = MultiTaskClassifier._get_param_names()
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        kw["cardinalities"] = None if cardinalities is None else tuple(cardinalities)
        return MultiTaskClassifier(**kw)


@dataclass
class RunArtifacts:
    out_dir: Path
    config: TrainConfig
    metrics: list[dict]
    files: dict[str, Path]
    estimator: MultiTaskClassifier | None = None
    wall_clock: float = 0.0


# ---------------------------------------------------------------------------
# csv helpers


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return str(v)


def write_rows(path: Path, header: list[str], rows, config_hash: str, seed: int) -> Path:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*header, "config_hash", "seed"])
        for row in rows:
            w.writerow([_fmt(v) for v in row] + [config_hash, seed])
    return Path(path)


def read_rows(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# evaluation


def evaluate(est: MultiTaskClassifier, ds: LabeledDataset) -> list[dict]:
    """Per-task validation metrics; AUC is omitted (NaN + error note) for single-class folds."""
    probs = est.predict_proba(ds.features)
    rows = []
    for t in range(ds.n_tasks):
        p = np.clip(probs[:, t], 0.0, 1.0)
        row = {"task": t, "logloss": logloss(p, ds.labels[:, t]), "auc": float("nan"), "note": ""}
        try:
            row["auc"] = auc(probs[:, t], ds.labels[:, t])
        except SingleClassError as exc:
            row["note"] = f"auc omitted: {exc}"
            logger.warning("task %d: %s", t, exc)
        rows.append(row)
    return rows


def export_reports(
    est: MultiTaskClassifier,
    valid: LabeledDataset,
    out_dir,
    config_hash: str,
    seed: int,
) -> dict[str, Path]:
    """Write loss-curve, gate, SSG, activation-ratio and confidence-scatter CSVs."""
    out_dir = Path(out_dir)
    files = {}
    T = est.n_tasks_
    mode = {"dephn": est.gating, "mtphn": "mg"}.get(est.model, est.model)
    files["loss_curve"] = write_rows(
        out_dir / "loss_curve.csv",
        ["epoch", "task", "gating", "train_loss"],
        [(e + 1, t, mode, float(h[t])) for e, h in enumerate(est.history_) for t in range(T)],
        config_hash,
        seed,
    )
    model = est.model_
    if isinstance(model, DEPHN):
        table = est.gate_table(valid.features)
        if table is not None:
            rows = [
                (t, k, model.mappings[p], float(table[t, k, p]))
                for t in range(table.shape[0])
                for k in range(table.shape[1])
                for p in range(table.shape[2])
            ]
            files["gates"] = write_rows(out_dir / "gates.csv", ["task", "expert", "mapping", "gate_value"], rows, config_hash, seed)
        if model.features.use_ssg:
            d = model.features.schema.embed_dim
            rows = []
            for branch in BRANCHES:
                vals = model.features.ssg[branch].values()
                rows += [(branch, i, i // d, i % d, float(v)) for i, v in enumerate(vals)]
            files["ssg"] = write_rows(out_dir / "ssg.csv", ["branch", "coordinate", "field", "dim", "gate_value"], rows, config_hash, seed)
        ratios = public_private_activation_ratio(model, valid.features)
        files["activation_ratio"] = write_rows(
            out_dir / "activation_ratio.csv", ["task", "public_ratio"], [(t, float(r)) for t, r in enumerate(ratios)], config_hash, seed
        )
    scores = est.decision_function(valid.features)
    conf = valid.confidences
    rows = []
    for i in range(len(valid)):
        c = [float(conf[i, t]) if conf is not None else float("nan") for t in range(T)]
        rows.append((i, *c, *valid.labels[i].tolist(), *scores[i].tolist()))
    header = ["index", *[f"c{t}" for t in range(T)], *[f"y{t}" for t in range(T)], *[f"logit{t}" for t in range(T)]]
    files["scatter"] = write_rows(out_dir / "scatter.csv", header, rows, config_hash, seed)
    return files


# ---------------------------------------------------------------------------
# runs


def load_data(cfg: TrainConfig, dataset: LabeledDataset | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    if dataset is None:
        dataset = read_csv(cfg.data_path) if cfg.data_path else generate_dataset(cfg.dataset_spec())
    return split_dataset(dataset, cfg.valid_fraction, seed=cfg.seed)


def run_experiment(
    cfg: TrainConfig,
    out_dir=None,
    dataset: LabeledDataset | None = None,
    split: tuple[LabeledDataset, LabeledDataset] | None = None,
) -> RunArtifacts:
    """Train on the configured data, evaluate on the validation fold, emit artifacts."""
    start = time.perf_counter()
    train, valid = split if split is not None else load_data(cfg, dataset)
    h, seed = cfg.config_hash, cfg.seed
    est = cfg.estimator(train.cardinalities).fit(train.features, train.labels)
    metrics = evaluate(est, valid)
    elapsed = time.perf_counter() - start
    files: dict[str, Path] = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(
            json.dumps(
                {"config": cfg.to_dict(), "config_hash": h, "cardinalities": list(train.cardinalities), "n_tasks": train.n_tasks},
                indent=2,
                sort_keys=True,
            ) + "\n",
            encoding="utf-8",
        )
        files["metrics"] = write_rows(
            out_dir / "metrics.csv",
            ["model", "task", "logloss", "auc", "note"],
            [(cfg.model, m["task"], m["logloss"], m["auc"], m["note"]) for m in metrics],
            h,
            seed,
        )
        files.update(export_reports(est, valid, out_dir, h, seed))
        np.savez(out_dir / "model.npz", **est.model_.state_dict())
        files["model"] = out_dir / "model.npz"
        (out_dir / "run_info.json").write_text(
            json.dumps({"wall_clock_seconds": elapsed, "n_train": len(train), "n_valid": len(valid)}, indent=2) + "\n",
            encoding="utf-8",
        )
    return RunArtifacts(out_dir, cfg, metrics, files, est, elapsed)


def _sweep_one(args):
    cfg, split = args
    run = run_experiment(cfg, split=split)
    return run.metrics


def sweep(cfg: TrainConfig, out_dir=None, n_jobs: int = 1, dataset: LabeledDataset | None = None) -> list[dict]:
    """DEPHN over every coefficient function x similarity measure (16 runs, one row each)."""
    split = load_data(cfg, dataset)
    grid = [(f, m) for m in vg.SIMILARITIES for f in vg.COEFFICIENTS]
    cfgs = [cfg.replace(model="dephn", virtual_gradient=True, coefficient=f, similarity=m) for f, m in grid]
    jobs = [(c, split) for c in cfgs]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    T = split[0].n_tasks
    rows = []
    for (f, m), c, metrics in zip(grid, cfgs, results):
        row = {"function": f, "similarity": m, "config_hash": c.config_hash}
        for met in metrics:
            row[f"logloss{met['task']}"] = met["logloss"]
            row[f"auc{met['task']}"] = met["auc"]
        rows.append(row)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        header = ["function", "similarity"] + [f"{k}{t}" for t in range(T) for k in ("logloss", "auc")]
        write_rows(out_dir / "sweep_metrics.csv", header, [[r[k] for k in header] for r in rows], cfg.config_hash, cfg.seed)
    return rows


def summarize(run_dirs) -> list[dict]:
    """Collect metrics.csv rows from run directories (recursively) into one table."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        paths = [d / "metrics.csv"] if (d / "metrics.csv").exists() else sorted(d.rglob("metrics.csv"))
        for p in paths:
            for r in read_rows(p):
                rows.append({"run": str(p.parent), **r})
        for p in ([d / "sweep_metrics.csv"] if (d / "sweep_metrics.csv").exists() else []):
            for r in read_rows(p):
                rows.append({"run": str(p.parent), "model": "dephn-sweep", **r})
    return rows


def format_table(rows: list[dict], columns: list[str] | None = None) -> str:
    if not rows:
        return "(no rows)"
    columns = columns or [c for c in rows[0] if c not in ("config_hash",)]
    cells = [[str(r.get(c, "")) for c in columns] for r in rows]
    for row in cells:
        for i, v in enumerate(row):
            try:
                row[i] = f"{float(v):.6f}" if "." in v else v
            except ValueError:
                pass
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def load_run(run_dir) -> MultiTaskClassifier:
    """Rebuild a trained estimator from ``config.json`` + ``model.npz``."""
    run_dir = Path(run_dir)
    info = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    cfg = TrainConfig.from_dict(info["config"])
    est = cfg.estimator(info["cardinalities"])
    with np.load(run_dir / "model.npz") as state:
        state = dict(state)
    est.build(int(info["n_tasks"]), info["cardinalities"])
    est.model_.load_state_dict(state)
    return est
