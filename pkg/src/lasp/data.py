"""Task streams: synthetic Gaussian generators, IDX/CSV ingestion,
class-block and rotated-domain task splitting, and two-view augmentation.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError, ShapeError
from .numerics import as_matrix

SCENARIOS = ("task_incremental", "class_incremental", "domain_incremental")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Immutable-by-convention input matrix with integer labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = as_matrix(self.inputs, "inputs")
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError("labels", (self.inputs.shape[0],), self.labels.shape)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx])

    @staticmethod
    def concatenate(parts: list) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.inputs for p in parts], axis=0),
            np.concatenate([p.labels for p in parts]),
        )


@dataclass
class TaskSpec:
    """One task of a stream: its samples, declared classes, and (for rotated
    domains) the rotation angle in radians."""

    task_id: int
    data: Dataset
    classes: tuple
    domain_value: float = None

    def __post_init__(self):
        self.classes = tuple(int(c) for c in self.classes)
        if len(self.data) == 0:
            raise ValueError(f"task {self.task_id} has no samples")
        stray = set(self.data.classes.tolist()) - set(self.classes)
        if stray:
            raise ValueError(f"task {self.task_id} contains labels {sorted(stray)} outside its declared classes")


@dataclass
class TaskStream:
    """Ordered tasks plus the continual-learning scenario. Class sets are
    pairwise disjoint except in the domain-incremental scenario, where every
    task shares one class set."""

    tasks: list
    scenario: str

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if not self.tasks:
            raise ValueError("a stream needs at least one task")
        if self.scenario == "domain_incremental":
            base = set(self.tasks[0].classes)
            for t in self.tasks[1:]:
                if set(t.classes) != base:
                    raise ValueError("domain-incremental tasks must share one class set")
        else:
            seen = set()
            for t in self.tasks:
                overlap = seen & set(t.classes)
                if overlap:
                    raise ValueError(f"classes {sorted(overlap)} appear in more than one task")
                seen |= set(t.classes)

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def all_classes(self) -> np.ndarray:
        return np.unique(np.concatenate([np.array(t.classes, dtype=np.int64) for t in self.tasks]))

    def seen_classes(self, upto_task: int) -> np.ndarray:
        """Distinct classes in tasks 0..upto_task inclusive."""
        parts = [np.array(t.classes, dtype=np.int64) for t in self.tasks[: upto_task + 1]]
        return np.unique(np.concatenate(parts))


@dataclass(frozen=True)
class AugmentConfig:
    """Vector mode adds Gaussian noise and a per-view uniform scale; image
    mode random-crops after zero padding and flips horizontally."""

    mode: str = "vector"
    noise_sigma: float = 0.1
    scale_range: tuple = (0.8, 1.2)
    pad: int = 2
    flip_prob: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(s) for s in self.scale_range))
        if self.mode not in ("vector", "image"):
            raise ConfigError(f"augmentation mode must be vector or image, got {self.mode!r}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if len(self.scale_range) != 2 or self.scale_range[0] > self.scale_range[1]:
            raise ConfigError("scale_range must be (low, high) with low <= high")
        if self.pad < 0 or not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("pad must be >= 0 and flip_prob within [0, 1]")


def _augment_vector(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    return scale * x + rng.normal(0.0, cfg.noise_sigma, size=x.shape)


def _augment_image(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    side = math.isqrt(x.size)
    if side * side != x.size:
        raise ShapeError("image payload", "a square pixel count", x.size)
    img = x.reshape(side, side)
    padded = np.pad(img, cfg.pad)
    dy, dx = rng.integers(0, 2 * cfg.pad + 1, size=2)
    img = padded[dy : dy + side, dx : dx + side]
    if rng.random() < cfg.flip_prob:
        img = img[:, ::-1]
    return img.reshape(-1).astype(np.float64)


def two_views(sample: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independent augmentations of one input vector."""
    x = np.ascontiguousarray(sample, dtype=np.float64).reshape(-1)
    fn = _augment_vector if cfg.mode == "vector" else _augment_image
    return fn(x, cfg, rng), fn(x, cfg, rng)


def augment_batch(
    inputs: np.ndarray, labels: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Two views per row. Returns (views, view_labels, view_origin) with the
    two views of sample i at rows i and n + i."""
    inputs = as_matrix(inputs, "batch inputs")
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    n = inputs.shape[0]
    if labels.shape != (n,):
        raise ShapeError("labels", (n,), labels.shape)
    tiled = np.concatenate([inputs, inputs], axis=0)
    if cfg.mode == "vector":
        scales = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=(2 * n, 1))
        views = scales * tiled + rng.normal(0.0, cfg.noise_sigma, size=tiled.shape)
    else:
        views = np.empty_like(tiled)
        for i in range(2 * n):
            views[i] = _augment_image(tiled[i], cfg, rng)
    origin = np.concatenate([np.arange(n), np.arange(n)])
    return views, np.concatenate([labels, labels]), origin


def make_synthetic(
    classes: int, dim: int, separation: float, samples_per_class: int, rng: np.random.Generator
) -> Dataset:
    """Class-conditional unit-covariance Gaussians whose means sit on a
    sphere of radius ``separation``."""
    if classes < 2 or dim < 2:
        raise ConfigError("need classes >= 2 and dim >= 2")
    if separation <= 0:
        raise ConfigError("separation must be positive")
    if samples_per_class < 1:
        raise ConfigError("samples_per_class must be >= 1")
    directions = rng.normal(size=(classes, dim))
    means = separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes, dtype=np.int64), samples_per_class)
    noise = rng.normal(size=(classes * samples_per_class, dim))
    return Dataset(means[labels] + noise, labels)


def split_by_class(dataset: Dataset, n_tasks: int, scenario: str = "class_incremental") -> TaskStream:
    """Contiguous class blocks in ascending id order, one block per task."""
    if scenario == "domain_incremental":
        raise ConfigError("class splitting defines task- or class-incremental streams only")
    classes = dataset.classes
    if n_tasks < 1 or classes.size % n_tasks != 0:
        raise ConfigError(f"{classes.size} classes do not divide into {n_tasks} tasks")
    per = classes.size // n_tasks
    tasks = []
    for t in range(n_tasks):
        block = classes[t * per : (t + 1) * per]
        pick = np.isin(dataset.labels, block)
        tasks.append(TaskSpec(t, dataset.subset(pick), tuple(block.tolist())))
    return TaskStream(tasks, scenario)


def rotate_planar(inputs: np.ndarray, angle: float) -> np.ndarray:
    """Rotate consecutive coordinate pairs by the same angle (an isometry)."""
    inputs = as_matrix(inputs, "inputs")
    if inputs.shape[1] % 2 != 0:
        raise ShapeError("planar rotation dim", "an even width", inputs.shape[1])
    c, s = math.cos(angle), math.sin(angle)
    x = inputs[:, 0::2]
    y = inputs[:, 1::2]
    out = np.empty_like(inputs)
    out[:, 0::2] = c * x - s * y
    out[:, 1::2] = s * x + c * y
    return out


def rotate_image(inputs: np.ndarray, angle: float) -> np.ndarray:
    """Rotate square images about their center (bilinear, zero fill)."""
    from scipy import ndimage

    inputs = as_matrix(inputs, "inputs")
    side = math.isqrt(inputs.shape[1])
    if side * side != inputs.shape[1]:
        raise ShapeError("image payload", "a square pixel count", inputs.shape[1])
    out = np.empty_like(inputs)
    degrees = math.degrees(angle)
    for i in range(inputs.shape[0]):
        out[i] = ndimage.rotate(
            inputs[i].reshape(side, side), degrees, reshape=False, order=1, mode="constant"
        ).reshape(-1)
    return out


def make_rotated_stream(
    base: Dataset, n_tasks: int, rng: np.random.Generator, kind: str = "planar"
) -> TaskStream:
    """Domain-incremental stream: each task is the base set under its own
    uniformly drawn rotation in [0, pi)."""
    if n_tasks < 1:
        raise ConfigError("need at least one task")
    if kind not in ("planar", "image"):
        raise ConfigError(f"rotation kind must be planar or image, got {kind!r}")
    rotate = rotate_planar if kind == "planar" else rotate_image
    angles = rng.uniform(0.0, math.pi, size=n_tasks)
    classes = tuple(base.classes.tolist())
    tasks = [
        TaskSpec(t, Dataset(rotate(base.inputs, angles[t]), base.labels), classes, float(angles[t]))
        for t in range(n_tasks)
    ]
    return TaskStream(tasks, "domain_incremental")


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise DataFormatError(f"file truncated while reading {what}")
    return raw


def load_idx(images_path, labels_path) -> Dataset:
    """MNIST-style IDX pair: big-endian headers, pixel bytes scaled to
    [0, 1], one u8 label per image."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(f"image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        pixels = np.frombuffer(_read_exact(fh, count * rows * cols, "image payload"), dtype=np.uint8)
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(f"label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(fh, n_labels, "label payload"), dtype=np.uint8)
    if n_labels != count:
        raise DataFormatError(f"{count} images but {n_labels} labels")
    inputs = pixels.astype(np.float64).reshape(count, rows * cols) / 255.0
    return Dataset(inputs, labels.astype(np.int64))


def load_csv(path, header: bool = False) -> Dataset:
    """Label-first CSV rows with feature values in [0, 255], scaled to [0, 1]."""
    rows = []
    labels = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row:
                continue
            try:
                labels.append(int(row[0]))
                values = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from exc
            if values.size == 0:
                raise DataFormatError(f"line {lineno}: no feature values after the label")
            if values.min() < 0 or values.max() > 255:
                raise DataFormatError(f"line {lineno}: feature values outside [0, 255]")
            rows.append(values / 255.0)
    if not rows:
        raise DataFormatError("no data rows found")
    widths = {r.size for r in rows}
    if len(widths) != 1:
        raise DataFormatError(f"inconsistent row widths {sorted(widths)}")
    return Dataset(np.vstack(rows), np.array(labels, dtype=np.int64))
