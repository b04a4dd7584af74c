"""Experiment configuration: JSON documents validated before any run."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .federation import METRIC_ACCURACY, METRIC_JACCARD, FLConfig
from .models import ARCHITECTURES, CLS_CNN_PLAIN, SEG_UNET_MINI
from .optim import OptimizerSpec

TASK_SEGMENTATION = "segmentation"
TASK_CLASSIFICATION = "classification"

# per-task training defaults (rounds, batch, optimizer)
_TASK_DEFAULTS = {
    TASK_SEGMENTATION: dict(
        architecture=SEG_UNET_MINI,
        rounds=15,
        batch_size=2,
        optimizer=OptimizerSpec("adagrad", 1e-3, 0.0),
    ),
    TASK_CLASSIFICATION: dict(
        architecture=CLS_CNN_PLAIN,
        rounds=10,
        batch_size=8,
        optimizer=OptimizerSpec("adam", 1e-3, 1e-5),
    ),
}

_KNOWN_KEYS = {
    "task",
    "architecture",
    "dataset_root",
    "segmented_root",
    "dataset_kind",
    "num_clients",
    "selected_per_round",
    "local_epochs",
    "rounds",
    "batch_size",
    "optimizer",
    "seed",
    "eval_metric",
    "augment",
    "round_timeout",
    "repetitions",
    "threshold",
    "output_dir",
}
_KNOWN_OPT_KEYS = {"kind", "lr", "weight_decay"}


@dataclass
class ExperimentConfig:
    task: str
    dataset_root: str
    output_dir: str
    architecture: str
    num_clients: int = 3
    selected_per_round: int | None = None
    local_epochs: int = 1
    rounds: int = 15
    batch_size: int = 2
    optimizer: OptimizerSpec = field(default_factory=lambda: OptimizerSpec("adagrad", 1e-3))
    seed: int = 0
    augment: bool = True
    round_timeout: float | None = None
    repetitions: int = 2
    threshold: float = 0.92
    dataset_kind: str = "full"
    segmented_root: str | None = None

    def __post_init__(self):
        if self.task not in (TASK_SEGMENTATION, TASK_CLASSIFICATION):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.task == TASK_SEGMENTATION and self.architecture != SEG_UNET_MINI:
            raise ConfigError("segmentation task requires seg-unet-mini")
        if self.task == TASK_CLASSIFICATION and self.architecture == SEG_UNET_MINI:
            raise ConfigError("classification task requires a classifier architecture")
        if self.dataset_kind not in ("full", "segmented"):
            raise ConfigError(f"unknown dataset_kind {self.dataset_kind!r}")
        if self.selected_per_round is None:
            self.selected_per_round = self.num_clients
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        self.to_fl_config().validate()

    @property
    def eval_metric(self) -> str:
        return METRIC_JACCARD if self.task == TASK_SEGMENTATION else METRIC_ACCURACY

    def to_fl_config(self, seed_offset: int = 0, num_clients: int | None = None) -> FLConfig:
        nc = self.num_clients if num_clients is None else num_clients
        return FLConfig(
            architecture=self.architecture,
            num_clients=nc,
            selected_per_round=min(self.selected_per_round, nc),
            local_epochs=self.local_epochs,
            rounds=self.rounds,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            seed=self.seed + seed_offset,
            eval_metric=self.eval_metric,
            augment=self.augment,
            round_timeout=self.round_timeout,
        )


def _parse_optimizer(doc) -> OptimizerSpec:
    if not isinstance(doc, dict):
        raise ConfigError("optimizer must be an object with kind/lr/weight_decay")
    unknown = set(doc) - _KNOWN_OPT_KEYS
    if unknown:
        raise ConfigError(f"unknown optimizer keys: {sorted(unknown)}")
    if "kind" not in doc or "lr" not in doc:
        raise ConfigError("optimizer requires at least kind and lr")
    spec = OptimizerSpec(doc["kind"], float(doc["lr"]), float(doc.get("weight_decay", 0.0)))
    spec.validate()
    return spec


def experiment_from_dict(doc: dict) -> ExperimentConfig:
    unknown = set(doc) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "task" not in doc:
        raise ConfigError("config requires a 'task' key")
    task = doc["task"]
    if task not in _TASK_DEFAULTS:
        raise ConfigError(f"unknown task {task!r}")
    if "eval_metric" in doc:
        raise ConfigError("eval_metric is derived from the task; remove it")
    defaults = _TASK_DEFAULTS[task]

    kwargs = dict(
        task=task,
        dataset_root=doc.get("dataset_root", ""),
        output_dir=doc.get("output_dir", "out"),
        architecture=doc.get("architecture", defaults["architecture"]),
        rounds=int(doc.get("rounds", defaults["rounds"])),
        batch_size=int(doc.get("batch_size", defaults["batch_size"])),
        optimizer=(
            _parse_optimizer(doc["optimizer"]) if "optimizer" in doc else defaults["optimizer"]
        ),
    )
    for key, cast in (
        ("num_clients", int),
        ("selected_per_round", int),
        ("local_epochs", int),
        ("seed", int),
        ("augment", bool),
        ("repetitions", int),
        ("threshold", float),
        ("dataset_kind", str),
        ("segmented_root", str),
    ):
        if key in doc:
            kwargs[key] = cast(doc[key])
    if "round_timeout" in doc and doc["round_timeout"] is not None:
        kwargs["round_timeout"] = float(doc["round_timeout"])
    return ExperimentConfig(**kwargs)


def experiment_from_file(path) -> ExperimentConfig:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top-level JSON must be an object")
    return experiment_from_dict(doc)
