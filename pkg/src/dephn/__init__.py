"""Multi-task learning lab built around DEPHN: heterogeneous experts, explicit
mappings and virtual-gradient-modulated gates, on a small numpy autodiff tape."""

from .assembly import DEPHN, MMoELite, SingleTaskDNN, build_model
from .data import DatasetSpec, LabeledDataset, generate_dataset, load_csv_dataset
from .estimator import MultiTaskClassifier, train_step
from .features import FieldSchema
from .harness import TrainConfig, run_experiment, sweep
from .metrics import auc, logloss

__all__ = [
    "DEPHN",
    "DatasetSpec",
    "FieldSchema",
    "LabeledDataset",
    "MMoELite",
    "MultiTaskClassifier",
    "SingleTaskDNN",
    "TrainConfig",
    "auc",
    "build_model",
    "generate_dataset",
    "load_csv_dataset",
    "logloss",
    "run_experiment",
    "sweep",
    "train_step",
]

__version__ = "0.1.0"
