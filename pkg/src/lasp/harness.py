"""Config-driven continual-learning runs: the full task loop with its
boundary-time pipeline, linear-probe evaluation, the random-subset
embedding analysis, the embedding-size sweep, and metrics persistence
(JSONL events, a deterministic summary CSV, and a binary checkpoint).
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from . import _kernels
from .boundary import (
    DSRS_SETTINGS,
    BoundaryDetector,
    BoundaryDetectorConfig,
    MaskTrainConfig,
    assemble_dsrs,
    train_salient_mask,
)
from .data import (
    SCENARIOS,
    AugmentConfig,
    Dataset,
    TaskSpec,
    TaskStream,
    augment_batch,
    load_csv,
    load_idx,
    make_synthetic,
    rotate_image,
    rotate_planar,
    split_by_class,
)
from .errors import ConfigError, ConfigMismatchError, DegenerateInputError, EmptySelectionError, ShapeError
from .losses import (
    IRDConfig,
    LabeledEmbeddingBatch,
    MaskVector,
    SupConConfig,
    async_supcon,
    class_means,
    ird_loss,
    ncmc_masked_predict,
    selective_ird,
    similarity_matrix,
)
from .memory import ReplayBuffer
from .model import ContrastiveModel, ModelConfig, load_params, save_params
from .numerics import make_rng, spawn_rngs
from .saliency import (
    EBConfig,
    ParameterSalience,
    compute_parameter_salience,
    modulate_gradients,
)

METHODS = ("finetune", "ird", "sd", "gm", "sd_gm")
DATASET_KINDS = ("synthetic", "idx", "csv")
BOUNDARY_MODES = ("oracle", "detector")
MODULATE_SCOPES = ("total", "supcon")

_RNG_STREAMS = ("data", "init", "train", "memory", "mask", "analysis")


@dataclass(frozen=True)
class DatasetConfig:
    """Where samples come from: the synthetic Gaussian generator or IDX/CSV
    files with explicit train and test sides."""

    kind: str = "synthetic"
    classes: int = 10
    dim: int = 32
    separation: float = 8.0
    samples_per_class: int = 200
    test_samples_per_class: int = 50
    images: str = None
    labels: str = None
    test_images: str = None
    test_labels: str = None
    train_path: str = None
    test_path: str = None
    csv_header: bool = False

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "idx":
            missing = [k for k in ("images", "labels", "test_images", "test_labels") if getattr(self, k) is None]
            if missing:
                raise ConfigError(f"idx dataset needs paths for {missing}")
        if self.kind == "csv":
            missing = [k for k in ("train_path", "test_path") if getattr(self, k) is None]
            if missing:
                raise ConfigError(f"csv dataset needs paths for {missing}")


@dataclass(frozen=True)
class ModelSettings:
    """Model widths; the input width always comes from the dataset."""

    encoder_widths: tuple = (256, 128)
    representation_dim: int = 128
    projection_hidden_dim: int = 128
    embedding_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))

    def to_model_config(self, input_dim: int) -> ModelConfig:
        return ModelConfig(
            input_dim=input_dim,
            encoder_widths=self.encoder_widths,
            representation_dim=self.representation_dim,
            projection_hidden_dim=self.projection_hidden_dim,
            embedding_dim=self.embedding_dim,
        )


@dataclass(frozen=True)
class BoundarySettings:
    """Oracle mode trusts the stream's task transitions; detector mode flags
    drops in per-batch masked-classifier accuracy."""

    mode: str = "oracle"
    window: int = 5
    drop_ratio: float = 0.5
    metric: str = "ncmc_accuracy"

    def __post_init__(self):
        if self.mode not in BOUNDARY_MODES:
            raise ConfigError(f"boundary mode must be one of {BOUNDARY_MODES}, got {self.mode!r}")
        self.detector_config()

    def detector_config(self) -> BoundaryDetectorConfig:
        return BoundaryDetectorConfig(self.window, self.drop_ratio, self.metric)


@dataclass(frozen=True)
class EBSettings:
    """How output salience is seeded and which loss gradients modulation
    shrinks."""

    salience_source: str = "thresholded_uniform"
    modulate_scope: str = "total"

    def __post_init__(self):
        EBConfig(self.salience_source)
        if self.modulate_scope not in MODULATE_SCOPES:
            raise ConfigError(f"modulate_scope must be one of {MODULATE_SCOPES}")


@dataclass(frozen=True)
class SubsetAnalysisConfig:
    """Random-subset probe analysis run at the first boundaries of training."""

    enabled: bool = False
    k: int = 10
    n_subsets: int = 100
    max_boundaries: int = 2

    def __post_init__(self):
        if self.k < 1 or self.n_subsets < 1 or self.max_boundaries < 0:
            raise ConfigError("subset analysis needs k >= 1, n_subsets >= 1, max_boundaries >= 0")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = DatasetConfig()
    augment: AugmentConfig = AugmentConfig()
    scenario: str = "class_incremental"
    n_tasks: int = 5
    rotation_kind: str = "planar"
    model: ModelSettings = ModelSettings()
    supcon: SupConConfig = SupConConfig()
    ird: IRDConfig = IRDConfig()
    distill_weight: float = 1.0
    dsrs: str = "combined"
    mask_train: MaskTrainConfig = MaskTrainConfig()
    boundary: BoundarySettings = BoundarySettings()
    eb: EBSettings = EBSettings()
    memory_capacity: int = 100
    memory_fraction: float = 0.5
    method: str = "ird"
    epochs_per_task: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    seed: int = 0
    probe_epochs: int = 200
    probe_step_size: float = 0.1
    eval_every_task: bool = True
    subset_analysis: SubsetAnalysisConfig = SubsetAnalysisConfig()

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.dsrs not in DSRS_SETTINGS:
            raise ConfigError(f"dsrs must be one of {DSRS_SETTINGS}, got {self.dsrs!r}")
        if self.distill_weight < 0:
            raise ConfigError("distill_weight must be non-negative")
        if not 0.0 <= self.memory_fraction < 1.0:
            raise ConfigError("memory_fraction must lie in [0, 1)")
        if self.n_tasks < 1 or self.epochs_per_task < 1 or self.batch_size < 1:
            raise ConfigError("n_tasks, epochs_per_task and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.probe_step_size <= 0:
            raise ConfigError("learning_rate and probe_step_size must be positive")
        if self.memory_capacity < 1:
            raise ConfigError("memory_capacity must be >= 1")
        if self.probe_epochs < 1:
            raise ConfigError("probe_epochs must be >= 1")
        if self.rotation_kind not in ("planar", "image"):
            raise ConfigError("rotation_kind must be planar or image")


_NESTED = {
    "dataset": DatasetConfig,
    "augment": AugmentConfig,
    "model": ModelSettings,
    "supcon": SupConConfig,
    "ird": IRDConfig,
    "mask_train": MaskTrainConfig,
    "boundary": BoundarySettings,
    "eb": EBSettings,
    "subset_analysis": SubsetAnalysisConfig,
}


def _build_config(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must be a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown config keys under {path}: {unknown}")
    kwargs = {}
    for name, value in raw.items():
        sub = _NESTED.get(name) if cls is RunConfig else None
        kwargs[name] = _build_config(sub, value, f"{path}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value under {path}: {exc}") from exc


def run_config_from_dict(raw: dict) -> RunConfig:
    return _build_config(RunConfig, raw, "config")


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    return run_config_from_dict(raw)


def config_as_dict(cfg: RunConfig) -> dict:
    """JSON-normalized config (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


@dataclass
class TrainOverrides:
    """Programmatic test seams, deliberately not reachable from config
    files: pin the mask to full selection, zero out parameter salience, or
    stop after a fixed number of optimizer steps."""

    force_full_mask: bool = False
    force_zero_salience: bool = False
    max_steps: int = None


@dataclass
class MetricsRecord:
    config: dict
    events: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    boundary_reports: list = field(default_factory=list)
    eval_history: list = field(default_factory=list)
    final: dict = field(default_factory=dict)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _split_train_test(full: Dataset, per_class_train: int) -> tuple[Dataset, Dataset]:
    train_idx, test_idx = [], []
    for c in full.classes:
        rows = np.flatnonzero(full.labels == c)
        train_idx.append(rows[:per_class_train])
        test_idx.append(rows[per_class_train:])
    return full.subset(np.concatenate(train_idx)), full.subset(np.concatenate(test_idx))


def build_streams(cfg: RunConfig, rng: np.random.Generator) -> tuple[TaskStream, TaskStream]:
    """Materialize the train and test task streams the config describes."""
    ds = cfg.dataset
    if ds.kind == "synthetic":
        full = make_synthetic(
            ds.classes, ds.dim, ds.separation, ds.samples_per_class + ds.test_samples_per_class, rng
        )
        train, test = _split_train_test(full, ds.samples_per_class)
    elif ds.kind == "idx":
        train = load_idx(ds.images, ds.labels)
        test = load_idx(ds.test_images, ds.test_labels)
    else:
        train = load_csv(ds.train_path, ds.csv_header)
        test = load_csv(ds.test_path, ds.csv_header)

    if cfg.scenario == "domain_incremental":
        rotate = rotate_planar if cfg.rotation_kind == "planar" else rotate_image
        angles = rng.uniform(0.0, np.pi, size=cfg.n_tasks)
        classes = tuple(train.classes.tolist())
        train_tasks, test_tasks = [], []
        for t in range(cfg.n_tasks):
            train_tasks.append(
                TaskSpec(t, Dataset(rotate(train.inputs, angles[t]), train.labels), classes, float(angles[t]))
            )
            test_tasks.append(
                TaskSpec(t, Dataset(rotate(test.inputs, angles[t]), test.labels), classes, float(angles[t]))
            )
        return TaskStream(train_tasks, cfg.scenario), TaskStream(test_tasks, cfg.scenario)
    return (
        split_by_class(train, cfg.n_tasks, cfg.scenario),
        split_by_class(test, cfg.n_tasks, cfg.scenario),
    )


def _embed_features(model, inputs: np.ndarray, kind: str = "representation", chunk: int = 1024) -> np.ndarray:
    outs = []
    for start in range(0, inputs.shape[0], chunk):
        r, e, _ = model.embed(inputs[start : start + chunk])
        outs.append(r if kind == "representation" else e)
    return np.concatenate(outs, axis=0)


def _train_probe(features: np.ndarray, labels: np.ndarray, classes: np.ndarray, epochs: int, step: float):
    """Zero-initialized linear softmax probe trained by full-batch descent."""
    n, d = features.shape
    y = np.searchsorted(classes, labels)
    onehot = np.zeros((n, classes.size))
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((d, classes.size))
    b = np.zeros(classes.size)
    for _ in range(epochs):
        logits = features @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= step * (features.T @ g)
        b -= step * g.sum(axis=0)
    return w, b


def evaluate(
    model,
    train_stream: TaskStream,
    test_stream: TaskStream,
    memory,
    scenario: str,
    upto_task: int = None,
    probe_epochs: int = 200,
    probe_step_size: float = 0.1,
) -> dict:
    """Linear probe on representations, trained only on memory plus the last
    task's samples, then scored per test task.

    Class-IL takes the argmax over every seen class; Task-IL restricts it to
    the test task's own classes; the domain scenario shares one class set so
    both rules coincide.
    """
    upto = len(train_stream) - 1 if upto_task is None else upto_task
    last = train_stream.tasks[upto].data
    pool = [last]
    cap = None
    if memory is not None and len(memory) > 0:
        mem_inputs, mem_labels, _ = memory.contents()
        pool.append(Dataset(mem_inputs, mem_labels))
        # cap every class at the buffer's per-class level; otherwise the
        # last task outnumbers each remembered class ~20:1 and the probe
        # degenerates into a current-task classifier
        cap = max(memory.class_counts().values())
    pool_data = Dataset.concatenate(pool)
    if len(pool_data) == 0:
        raise DegenerateInputError("probe pool is empty (no memory and no last-task samples)")
    if cap is not None:
        keep = [np.where(pool_data.labels == c)[0][:cap] for c in pool_data.classes]
        pool_data = pool_data.subset(np.concatenate(keep))

    seen = train_stream.seen_classes(upto)
    features = _embed_features(model, pool_data.inputs)
    w, b = _train_probe(features, pool_data.labels, seen, probe_epochs, probe_step_size)

    per_class_il, per_task_il = [], []
    for j in range(upto + 1):
        test = test_stream.tasks[j].data
        logits = _embed_features(model, test.inputs) @ w + b
        pred = seen[np.argmax(logits, axis=1)]
        per_class_il.append(float(np.mean(pred == test.labels)))
        cols = np.searchsorted(seen, np.array(test_stream.tasks[j].classes, dtype=np.int64))
        restricted = seen[cols][np.argmax(logits[:, cols], axis=1)]
        per_task_il.append(float(np.mean(restricted == test.labels)))
    return {
        "per_task_class_il": per_class_il,
        "per_task_task_il": per_task_il,
        "average_class_il": float(np.mean(per_class_il)),
        "average_task_il": float(np.mean(per_task_il)),
        "seen_classes": [int(c) for c in seen],
    }


def analyze_subsets(
    model,
    past_data: Dataset,
    future_data: Dataset,
    k: int = 10,
    n_subsets: int = 100,
    rng: np.random.Generator = None,
    probe_epochs: int = 200,
    probe_step_size: float = 0.1,
) -> dict:
    """Probe accuracy over random k-dimension embedding subsets, past tasks
    against future tasks, reported as means and standard deviations."""
    dim = model.config.embedding_dim
    if k >= dim:
        raise ShapeError("subset size", f"< embedding dim {dim}", k)
    if n_subsets < 1:
        raise ConfigError("n_subsets must be >= 1")
    if rng is None:
        rng = make_rng(0)
    sides = {}
    for side, dataset in (("past", past_data), ("future", future_data)):
        if len(dataset) == 0:
            raise DegenerateInputError(f"{side} dataset is empty")
        sides[side] = (
            _embed_features(model, dataset.inputs, kind="embedding"),
            dataset.labels,
            np.unique(dataset.labels),
        )
    accs = {"past": [], "future": []}
    for _ in range(n_subsets):
        idx = np.sort(rng.choice(dim, size=k, replace=False))
        for side, (emb, labels, classes) in sides.items():
            sub = emb[:, idx]
            w, b = _train_probe(sub, labels, classes, probe_epochs, probe_step_size)
            pred = classes[np.argmax(sub @ w + b, axis=1)]
            accs[side].append(float(np.mean(pred == labels)))
    result = {
        "k": k,
        "n_subsets": n_subsets,
        "mean_accuracy_past": float(np.mean(accs["past"])),
        "std_accuracy_past": float(np.std(accs["past"])),
        "mean_accuracy_future": float(np.mean(accs["future"])),
        "std_accuracy_future": float(np.std(accs["future"])),
    }
    result["higher_std_on_future"] = result["std_accuracy_future"] > result["std_accuracy_past"]
    return result


def subset_table_rows(result: dict) -> list:
    """The four-row (label, value) table the analysis reports."""
    return [
        ("mean subset accuracy on past tasks", result["mean_accuracy_past"]),
        ("std of subset accuracy on past tasks", result["std_accuracy_past"]),
        ("mean subset accuracy on future tasks", result["mean_accuracy_future"]),
        ("std of subset accuracy on future tasks", result["std_accuracy_future"]),
    ]


class _OnlineMeans:
    """Running per-class embedding means for the streaming drop detector."""

    def __init__(self):
        self.sums = {}
        self.counts = {}

    def update(self, embeddings: np.ndarray, labels: np.ndarray) -> None:
        for c in np.unique(labels):
            pick = labels == c
            key = int(c)
            if key in self.sums:
                self.sums[key] = self.sums[key] + embeddings[pick].sum(axis=0)
                self.counts[key] += int(pick.sum())
            else:
                self.sums[key] = embeddings[pick].sum(axis=0)
                self.counts[key] = int(pick.sum())

    def means(self):
        if len(self.sums) < 1:
            return None
        classes = np.array(sorted(self.sums), dtype=np.int64)
        means = np.stack([self.sums[int(c)] / self.counts[int(c)] for c in classes])
        counts = np.array([self.counts[int(c)] for c in classes], dtype=np.int64)
        from .losses import ClassMeans

        return ClassMeans(classes, means, counts)


def train_continual(cfg: RunConfig, out_dir=None, overrides: TrainOverrides = None) -> MetricsRecord:
    """Run the full continual-learning loop the config describes and return
    (and optionally persist) its metrics."""
    overrides = overrides or TrainOverrides()
    rngs = dict(zip(_RNG_STREAMS, spawn_rngs(cfg.seed, len(_RNG_STREAMS))))
    train_stream, test_stream = build_streams(cfg, rngs["data"])
    input_dim = train_stream.tasks[0].data.dim
    model = ContrastiveModel.initialize(cfg.model.to_model_config(input_dim), rngs["init"])
    memory = ReplayBuffer(
        cfg.memory_capacity, rngs["memory"], composite_keys=cfg.scenario == "domain_incremental"
    )

    record = MetricsRecord(config=config_as_dict(cfg))
    ticker = itertools.count()

    def emit(event: str, **fields) -> dict:
        entry = _jsonable({"tick": next(ticker), "event": event, **fields})
        record.events.append(entry)
        return entry

    emit(
        "run_start",
        method=cfg.method,
        scenario=cfg.scenario,
        seed=cfg.seed,
        n_tasks=len(train_stream),
        kernel_backend=_kernels.backend_name(),
    )

    needs_distill = cfg.method != "finetune"
    needs_mask = cfg.method in ("sd", "gm", "sd_gm")
    selective = cfg.method in ("sd", "sd_gm")
    modulates = cfg.method in ("gm", "sd_gm")
    detector_mode = cfg.boundary.mode == "detector" and cfg.method != "finetune"
    detector = BoundaryDetector(cfg.boundary.detector_config()) if detector_mode else None
    online_means = _OnlineMeans() if detector_mode else None

    snapshot = None
    mask: MaskVector = None
    param_sal: ParameterSalience = None
    boundaries_seen = 0
    steps_done = 0
    stopped = False
    best_acc = {}
    fallback_reported = False

    def run_boundary(bt: Dataset, task_id: int, trigger: str) -> None:
        nonlocal snapshot, mask, param_sal, boundaries_seen, fallback_reported
        snapshot = model.snapshot()
        fallback_reported = False
        report = {"task": task_id, "trigger": trigger, "dsrs": cfg.dsrs, "method": cfg.method}
        dsrs_data = None
        if needs_mask:
            skip_fit = overrides.force_full_mask or (overrides.force_zero_salience and not selective)
            if skip_fit:
                mask = MaskVector.full(cfg.model.embedding_dim)
                report["mask"] = "forced_full"
            else:
                dsrs_data = assemble_dsrs(memory if len(memory) else None, bt, cfg.dsrs)
                fitted, restarts = train_salient_mask(model, dsrs_data, cfg.mask_train, rngs["mask"])
                mask = fitted
                selected = mask.selected(cfg.mask_train.threshold, cfg.mask_train.keep_above)
                report.update(
                    dsrs_size=len(dsrs_data),
                    restarts=restarts,
                    selected_count=int(selected.size),
                    selected_dims=selected.tolist(),
                )
        if modulates:
            if overrides.force_zero_salience:
                param_sal = ParameterSalience.zeros_like(model.stages)
                report["salience"] = "forced_zero"
            else:
                if dsrs_data is None:
                    dsrs_data = assemble_dsrs(memory if len(memory) else None, bt, cfg.dsrs)
                acts, param_sal = compute_parameter_salience(
                    model,
                    dsrs_data.inputs,
                    mask,
                    cfg.mask_train.threshold,
                    EBConfig(cfg.eb.salience_source),
                    cfg.mask_train.keep_above,
                )
                report["salience_layer_sums"] = acts.layer_sums()
        sa = cfg.subset_analysis
        if sa.enabled and boundaries_seen < sa.max_boundaries and task_id > 0:
            past = Dataset.concatenate([t.data for t in train_stream.tasks[:task_id]])
            future = Dataset.concatenate([t.data for t in train_stream.tasks[task_id:]])
            analysis = analyze_subsets(
                model, past, future, sa.k, sa.n_subsets, rngs["analysis"],
                cfg.probe_epochs, cfg.probe_step_size,
            )
            report["subset_analysis"] = analysis
            report["subset_table"] = subset_table_rows(analysis)
        boundaries_seen += 1
        entry = emit("boundary", **report)
        record.boundary_reports.append(entry)

    for t, task in enumerate(train_stream.tasks):
        emit("task_start", task=t, classes=list(task.classes), size=len(task.data))
        mem_n = int(cfg.batch_size * cfg.memory_fraction) if len(memory) > 0 else 0
        cur_n = max(1, cfg.batch_size - mem_n)
        perm = rngs["train"].permutation(len(task.data))

        if not detector_mode and t > 0 and needs_distill:
            run_boundary(task.data.subset(perm[:cur_n]), t, "oracle")

        for epoch in range(cfg.epochs_per_task):
            if epoch > 0:
                perm = rngs["train"].permutation(len(task.data))
            sup_sum = dist_sum = 0.0
            n_steps = 0
            for start in range(0, len(task.data), cur_n):
                idx = perm[start : start + cur_n]
                cur_inputs = task.data.inputs[idx]
                cur_labels = task.data.labels[idx]

                if detector_mode:
                    _, batch_emb, _ = model.embed(cur_inputs)
                    means = online_means.means()
                    if means is not None:
                        metric_mask = mask if mask is not None else MaskVector.full(cfg.model.embedding_dim)
                        try:
                            preds = ncmc_masked_predict(batch_emb, means, metric_mask)
                            acc = float(np.mean(preds == cur_labels))
                        except DegenerateInputError:
                            acc = None
                        if acc is not None:
                            flagged = detector.update(acc)
                            emit("detector", task=t, epoch=epoch, accuracy=acc, flagged=flagged)
                            if flagged:
                                run_boundary(Dataset(cur_inputs, cur_labels), t, "detector")
                    online_means.update(batch_emb, cur_labels)

                if mem_n > 0 and len(memory) > 0:
                    mem_inputs, mem_labels, _ = memory.sample(mem_n, rngs["memory"])
                    step_inputs = np.concatenate([cur_inputs, mem_inputs], axis=0)
                    step_labels = np.concatenate([cur_labels, mem_labels])
                    current_flags = np.concatenate(
                        [np.ones(cur_inputs.shape[0], dtype=bool), np.zeros(mem_n, dtype=bool)]
                    )
                else:
                    step_inputs, step_labels = cur_inputs, cur_labels
                    current_flags = np.ones(cur_inputs.shape[0], dtype=bool)

                views, vlabels, vorigin = augment_batch(step_inputs, step_labels, cfg.augment, rngs["train"])
                vflags = np.concatenate([current_flags, current_flags])
                _, emb, cache = model.embed(views)
                batch = LabeledEmbeddingBatch(emb, vlabels, vorigin, vflags)
                sup_loss, g_sup = async_supcon(batch, cfg.supcon)

                dist_loss = 0.0
                g_dist = None
                if snapshot is not None and needs_distill and cfg.distill_weight != 0.0:
                    _, e_old, _ = snapshot.embed(views)
                    if selective and mask is not None:
                        try:
                            dist_loss, g_dist = selective_ird(
                                e_old, emb, mask, cfg.ird,
                                cfg.mask_train.threshold, cfg.mask_train.keep_above,
                            )
                        except EmptySelectionError:
                            if not fallback_reported:
                                emit("full_distillation_fallback", task=t, epoch=epoch)
                                fallback_reported = True
                            r_old = similarity_matrix(e_old, cfg.ird.past_temperature)
                            dist_loss, g_dist = ird_loss(r_old, emb, cfg.ird.current_temperature)
                    else:
                        r_old = similarity_matrix(e_old, cfg.ird.past_temperature)
                        dist_loss, g_dist = ird_loss(r_old, emb, cfg.ird.current_temperature)

                if g_dist is None:
                    g_total = g_sup
                else:
                    g_total = g_sup + cfg.distill_weight * g_dist

                if modulates and param_sal is not None:
                    if cfg.eb.modulate_scope == "total" or g_dist is None:
                        grads = modulate_gradients(model.backward(cache, g_total), param_sal)
                    else:
                        mod = modulate_gradients(model.backward(cache, g_sup), param_sal)
                        dist_grads = model.backward(cache, cfg.distill_weight * g_dist)
                        grads = [
                            (gw + dw, gb + db) for (gw, gb), (dw, db) in zip(mod, dist_grads)
                        ]
                else:
                    grads = model.backward(cache, g_total)
                model.apply_gradients(grads, cfg.learning_rate)

                total = sup_loss + cfg.distill_weight * dist_loss
                step_entry = {
                    "task": t, "epoch": epoch, "step": steps_done,
                    "supcon": sup_loss, "distill": dist_loss, "total": total,
                }
                record.step_losses.append(step_entry)
                emit("step", **step_entry)
                sup_sum += sup_loss
                dist_sum += dist_loss
                n_steps += 1
                steps_done += 1
                if overrides.max_steps is not None and steps_done >= overrides.max_steps:
                    stopped = True
                    break
            emit(
                "epoch", task=t, epoch=epoch,
                mean_supcon=sup_sum / max(1, n_steps),
                mean_distill=dist_sum / max(1, n_steps),
            )
            if stopped:
                break
        if stopped:
            break

        memory.rebalance_after_task(task.data.inputs, task.data.labels, t)
        emit("rebalance", task=t, stored=len(memory), per_class={str(k): v for k, v in memory.class_counts().items()})

        if cfg.eval_every_task or t == len(train_stream) - 1:
            res = evaluate(
                model, train_stream, test_stream, memory, cfg.scenario,
                upto_task=t, probe_epochs=cfg.probe_epochs, probe_step_size=cfg.probe_step_size,
            )
            emit("eval", after_task=t, **res)
            record.eval_history.append({"after_task": t, **res})
            for j, acc in enumerate(res["per_task_class_il"]):
                best_acc[j] = max(best_acc.get(j, acc), acc)

    if stopped or not record.eval_history:
        record.final = {"stopped_early": True, "steps": steps_done}
    else:
        last_eval = record.eval_history[-1]
        per_task = last_eval["per_task_class_il"]
        forgetting = [float(best_acc[j] - per_task[j]) for j in range(len(per_task))]
        early = forgetting[:-1] if len(forgetting) > 1 else forgetting
        record.final = {
            "method": cfg.method,
            "scenario": cfg.scenario,
            "seed": cfg.seed,
            "n_tasks": len(train_stream),
            "per_task_class_il": per_task,
            "per_task_task_il": last_eval["per_task_task_il"],
            "average_class_il": last_eval["average_class_il"],
            "average_task_il": last_eval["average_task_il"],
            "forgetting_per_task": forgetting,
            "average_forgetting": float(np.mean(early)),
        }
    emit("run_end", **record.final)

    if out_dir is not None:
        write_outputs(record, model, memory, cfg, out_dir)
    return record


def summary_rows(record: MetricsRecord) -> list:
    """Deterministic (key, value) rows for summary.csv; floats rendered via
    repr so identical runs serialize byte-identically."""
    final = record.final
    rows = [("format", "1")]
    for key in ("method", "scenario", "seed", "n_tasks", "stopped_early", "steps"):
        if key in final:
            rows.append((key, str(final[key])))
    for key in ("average_class_il", "average_task_il", "average_forgetting"):
        if key in final:
            rows.append((key, repr(float(final[key]))))
    for key in ("per_task_class_il", "per_task_task_il", "forgetting_per_task"):
        for j, value in enumerate(final.get(key, [])):
            rows.append((f"{key}_{j}", repr(float(value))))
    return rows


def write_outputs(record: MetricsRecord, model, memory, cfg: RunConfig, out_dir) -> None:
    """metrics.jsonl, boundary_reports.jsonl, summary.csv, checkpoint.bin."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
        for entry in record.events:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "boundary_reports.jsonl"), "w") as fh:
        for entry in record.boundary_reports:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        writer.writerows(summary_rows(record))
    buffer_meta, buffer_arrays = memory.to_arrays()
    save_params(
        model,
        os.path.join(out_dir, "checkpoint.bin"),
        extra_meta={"run_config": record.config, "buffer": buffer_meta, "final": _jsonable(record.final)},
        arrays=buffer_arrays,
    )


def load_run_checkpoint(path, cfg: RunConfig = None):
    """Read a checkpoint written by a run. Returns (model, meta, buffer);
    a config, when given, must match the one stored."""
    expected = None
    if cfg is not None:
        dim = None
        if cfg.dataset.kind == "synthetic":
            dim = cfg.dataset.dim
        if dim is not None:
            expected = cfg.model.to_model_config(dim)
    model, meta, arrays = load_params(path, expected_config=expected)
    if cfg is not None and meta.get("run_config") != config_as_dict(cfg):
        raise ConfigMismatchError("checkpoint was produced by a different run config")
    buffer = None
    if meta.get("buffer"):
        buffer = ReplayBuffer.from_arrays(meta["buffer"], arrays, make_rng(0))
    return model, meta, buffer


def sweep_embedding_size(base_cfg: RunConfig, sizes: list, n_seeds: int = 3, out_dir=None) -> list:
    """Train the distillation method with and without subset selection at
    each embedding size, identical seeds across methods, and tabulate final
    average accuracy."""
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    rows = []
    for size in sizes:
        if size > base_cfg.model.projection_hidden_dim:
            raise ConfigError(
                f"embedding size {size} exceeds projection hidden width "
                f"{base_cfg.model.projection_hidden_dim}"
            )
        for method in ("ird", "sd"):
            accs = []
            for offset in range(n_seeds):
                cfg = replace(
                    base_cfg,
                    model=replace(base_cfg.model, embedding_dim=int(size)),
                    method=method,
                    seed=base_cfg.seed + offset,
                )
                rec = train_continual(cfg)
                accs.append(rec.final["average_class_il"])
            rows.append(
                {
                    "embedding_dim": int(size),
                    "method": method,
                    "scenario": base_cfg.scenario,
                    "accuracy_mean": float(np.mean(accs)),
                    "accuracy_std": float(np.std(accs)),
                }
            )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["embedding_dim", "method", "scenario", "accuracy_mean", "accuracy_std"])
            for row in rows:
                writer.writerow(
                    [
                        row["embedding_dim"],
                        row["method"],
                        row["scenario"],
                        repr(row["accuracy_mean"]),
                        repr(row["accuracy_std"]),
                    ]
                )
    return rows
