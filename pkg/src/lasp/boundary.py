"""Everything that runs at a task boundary: assembling the selection
dataset from memory and the incoming first batch, training the salient
dimension mask from random restarts, and detecting boundaries from a
per-batch accuracy stream.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError, DegenerateInputError
from .losses import (
    ClassMeans,
    MaskVector,
    class_means,
    mask_training_loss,
    ncmc_masked_predict,
)
from .numerics import as_matrix

DSRS_SETTINGS = ("onlypast", "onlycurrent", "combined")


@dataclass(frozen=True)
class MaskTrainConfig:
    """Random-restart gradient descent on the mask objective. The winning
    restart has the best masked-classifier accuracy on the selection set,
    ties going to the smaller L1 norm (the more minimal mask)."""

    restarts: int = 8
    epochs: int = 100
    step_size: float = 0.05
    l1_weight: float = 0.01
    threshold: float = 0.5
    init_scale: float = 0.5
    keep_above: bool = True
    maximize_alignment: bool = True

    def __post_init__(self):
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if self.l1_weight < 0:
            raise ConfigError("l1_weight must be non-negative")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.init_scale < 0:
            raise ConfigError("init_scale must be non-negative")


@dataclass(frozen=True)
class BoundaryDetectorConfig:
    window: int = 5
    drop_ratio: float = 0.5
    metric: str = "ncmc_accuracy"

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if not 0.0 < self.drop_ratio < 1.0:
            raise ConfigError("drop_ratio must lie in (0, 1)")
        if self.metric != "ncmc_accuracy":
            raise ConfigError(f"unsupported detector metric {self.metric!r}")


def assemble_dsrs(memory, first_batch: Dataset, setting: str) -> Dataset:
    """Selection dataset: memory contents, the incoming first batch, or
    their union."""
    if setting not in DSRS_SETTINGS:
        raise ConfigError(f"dsrs setting must be one of {DSRS_SETTINGS}, got {setting!r}")
    have_memory = memory is not None and len(memory) > 0
    have_batch = first_batch is not None and len(first_batch) > 0
    if setting == "onlypast":
        if not have_memory:
            raise DegenerateInputError("onlypast selection needs a non-empty memory")
        inputs, labels, _ = memory.contents()
        return Dataset(inputs, labels)
    if setting == "onlycurrent":
        if not have_batch:
            raise DegenerateInputError("onlycurrent selection needs a captured first batch")
        return first_batch
    if not have_memory and not have_batch:
        raise DegenerateInputError("combined selection needs memory or a first batch")
    parts = []
    if have_memory:
        inputs, labels, _ = memory.contents()
        parts.append(Dataset(inputs, labels))
    if have_batch:
        parts.append(first_batch)
    return Dataset.concatenate(parts)


def _score_mask(embeddings: np.ndarray, labels: np.ndarray, means: ClassMeans, mask: MaskVector) -> float:
    preds = ncmc_masked_predict(embeddings, means, mask)
    return float(np.mean(preds == labels))


def fit_mask(
    embeddings: np.ndarray,
    labels: np.ndarray,
    cfg: MaskTrainConfig,
    rng: np.random.Generator,
) -> tuple[MaskVector, list]:
    """Train the dimension mask directly on a fixed embedding matrix.

    Returns the winning mask and one report per restart (accuracy, L1 norm,
    selected-dimension count, failure flag)."""
    embeddings = as_matrix(embeddings, "embeddings")
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    means = class_means(embeddings, labels)
    if means.classes.size < 2:
        raise DegenerateInputError(
            f"mask training needs >= 2 classes, got {means.classes.size}"
        )
    dim = embeddings.shape[1]
    reports = []
    candidates = []
    for restart in range(cfg.restarts):
        s = rng.uniform(-cfg.init_scale, cfg.init_scale, size=dim)
        failed = None
        for _ in range(cfg.epochs):
            try:
                _, grad, _ = mask_training_loss(
                    embeddings, labels, means, MaskVector(s), cfg.l1_weight, cfg.maximize_alignment
                )
            except DegenerateInputError as exc:
                failed = str(exc)
                break
            s = s - cfg.step_size * grad
        report = {"restart": restart, "failed": failed}
        if failed is None:
            mask = MaskVector(s)
            try:
                accuracy = _score_mask(embeddings, labels, means, mask)
            except DegenerateInputError as exc:
                report["failed"] = str(exc)
            else:
                l1 = mask.l1()
                report.update(
                    accuracy=accuracy,
                    l1_norm=l1,
                    selected_count=int(mask.selected(cfg.threshold, cfg.keep_above).size),
                )
                candidates.append((-accuracy, l1, restart, mask))
        reports.append(report)
    if not candidates:
        raise DegenerateInputError(
            "every mask restart degenerated; reports: "
            + "; ".join(f"restart {r['restart']}: {r['failed']}" for r in reports)
        )
    candidates.sort(key=lambda c: c[:3])
    return candidates[0][3], reports


def train_salient_mask(
    model, dsrs: Dataset, cfg: MaskTrainConfig, rng: np.random.Generator
) -> tuple[MaskVector, list]:
    """Embed the selection dataset through the frozen model and fit the
    mask. The model's parameters are asserted unchanged afterwards."""
    before = model.params_hash()
    _, embeddings, _ = model.embed(dsrs.inputs)
    mask, reports = fit_mask(embeddings, dsrs.labels, cfg, rng)
    if model.params_hash() != before:
        raise RuntimeError("mask training mutated the model parameters")
    return mask, reports


class BoundaryDetector:
    """Streaming drop detector: flags a batch whose accuracy falls below
    drop_ratio times the mean of the trailing window, then restarts the
    window from the flagged batch."""

    def __init__(self, cfg: BoundaryDetectorConfig):
        self.cfg = cfg
        self._window = deque(maxlen=cfg.window)

    def update(self, accuracy: float) -> bool:
        flagged = (
            len(self._window) == self.cfg.window
            and accuracy < self.cfg.drop_ratio * (sum(self._window) / len(self._window))
        )
        if flagged:
            self._window.clear()
        self._window.append(accuracy)
        return flagged

    def reset(self) -> None:
        self._window.clear()


def detect_boundary(accuracies, cfg: BoundaryDetectorConfig) -> list:
    """One flag per batch of the accuracy stream."""
    detector = BoundaryDetector(cfg)
    return [detector.update(float(a)) for a in accuracies]


def oracle_boundaries(task_ids) -> list:
    """Flags exactly where the stream's task id changes."""
    ids = list(task_ids)
    return [False] + [ids[i] != ids[i - 1] for i in range(1, len(ids))]
