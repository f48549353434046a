"""Losses and classifiers defined on embedding batches: the anchored
contrastive loss, instance-wise relation matrices and their distillation
(full-width and restricted to a salient dimension subset), class means, the
masked nearest-class-mean classifier, and the mask-training loss.

Every loss returns ``(value, gradient)`` with an analytic gradient; the test
suite checks each against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DegenerateInputError, EmptySelectionError, ShapeError
from .numerics import NORM_EPS, as_matrix, ensure_finite, l2_normalize_rows, l2_normalize_rows_backward


@dataclass(frozen=True)
class SupConConfig:
    """Temperature for the contrastive loss."""

    temperature: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class IRDConfig:
    """Relation-distillation temperatures: one for the model being trained,
    one for the frozen snapshot that produced the target matrix."""

    current_temperature: float = 0.2
    past_temperature: float = 0.1

    def __post_init__(self):
        if self.current_temperature <= 0 or self.past_temperature <= 0:
            raise ValueError("temperatures must be positive")


@dataclass
class LabeledEmbeddingBatch:
    """Unit-row embeddings with labels, view origins, and a flag marking the
    views that belong to the task currently being trained (the anchor set)."""

    embeddings: np.ndarray
    labels: np.ndarray
    view_origin: np.ndarray
    current_task: np.ndarray

    def __post_init__(self):
        self.embeddings = as_matrix(self.embeddings, "embeddings")
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.view_origin = np.ascontiguousarray(self.view_origin, dtype=np.int64)
        self.current_task = np.ascontiguousarray(self.current_task, dtype=bool)
        n = self.embeddings.shape[0]
        if n % 2 != 0:
            raise ShapeError("view count", "even (two views per sample)", n)
        for name, arr in (("labels", self.labels), ("view_origin", self.view_origin), ("current_task", self.current_task)):
            if arr.shape != (n,):
                raise ShapeError(name, (n,), arr.shape)
        _, counts = np.unique(self.view_origin, return_counts=True)
        if not np.all(counts == 2):
            raise ValueError("every sample must contribute exactly two views")

    @property
    def n_views(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class MaskVector:
    """Raw mask over embedding dimensions; the sigmoid of it weights each
    dimension and thresholding it selects the salient subset."""

    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.ascontiguousarray(self.raw, dtype=np.float64).reshape(-1)
        ensure_finite(self.raw, "mask")

    @property
    def dim(self) -> int:
        return self.raw.size

    def weights(self) -> np.ndarray:
        """Sigmoid of the raw mask, elementwise in (0, 1)."""
        return 1.0 / (1.0 + np.exp(-self.raw))

    def selected(self, threshold: float = 0.5, keep_above: bool = True) -> np.ndarray:
        """Indices of the selected dimensions."""
        if not 0.0 < threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        w = self.weights()
        mask = w > threshold if keep_above else w <= threshold
        return np.flatnonzero(mask)

    def l1(self) -> float:
        return float(np.abs(self.raw).sum())

    @staticmethod
    def full(dim: int, scale: float = 20.0) -> "MaskVector":
        """Mask whose sigmoid saturates near 1, selecting every dimension."""
        return MaskVector(np.full(dim, scale))


@dataclass
class ClassMeans:
    """Per-class mean embeddings (not re-normalized) with sample counts."""

    classes: np.ndarray
    means: np.ndarray
    counts: np.ndarray

    def mean_for(self, label: int) -> np.ndarray:
        idx = np.searchsorted(self.classes, label)
        if idx >= self.classes.size or self.classes[idx] != label:
            raise KeyError(f"no mean stored for class {label}")
        return self.means[idx]


def async_supcon(batch: LabeledEmbeddingBatch, cfg: SupConConfig) -> tuple[float, np.ndarray]:
    """Anchored contrastive loss: anchors are the current-task views, the
    denominator spans every other view in the batch. Returns the loss and
    its gradient with respect to the embedding rows."""
    anchors = batch.current_task
    if not anchors.any():
        return 0.0, np.zeros_like(batch.embeddings)
    same = batch.labels[:, None] == batch.labels[None, :]
    np.fill_diagonal(same, False)
    npos = same.sum(axis=1)
    bad = anchors & (npos == 0)
    if bad.any():
        raise DegenerateInputError(
            f"anchor views {np.flatnonzero(bad).tolist()} have no positives in the batch "
            "(singleton class cannot be an anchor)"
        )
    loss, grad = _kernels.supcon_loss_grad(batch.embeddings, batch.labels, anchors, cfg.temperature)
    ensure_finite(grad, "contrastive gradient")
    return loss, grad


def similarity_matrix(e: np.ndarray, temperature: float) -> np.ndarray:
    """Row-stochastic instance-relation matrix: softmax over pairwise dot
    products with self-similarity excluded (diagonal stored as 0)."""
    e = as_matrix(e, "embeddings")
    if e.shape[0] < 2:
        raise ShapeError("embedding rows", ">= 2", e.shape[0])
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    r = _kernels.similarity_matrix(e, temperature)
    ensure_finite(r, "similarity matrix")
    return r


def ird_loss(r_old: np.ndarray, e_new: np.ndarray, current_temperature: float) -> tuple[float, np.ndarray]:
    """Relation distillation: cross-entropy between the frozen matrix
    ``r_old`` (treated as constant) and the matrix induced by ``e_new``.
    Returns the loss and its gradient with respect to ``e_new``."""
    r_old = as_matrix(r_old, "target relation matrix")
    e_new = as_matrix(e_new, "embeddings")
    n = e_new.shape[0]
    if r_old.shape != (n, n):
        raise ShapeError("relation matrix", (n, n), r_old.shape)
    loss, grad = _kernels.ird_loss_grad(r_old, e_new, current_temperature)
    ensure_finite(grad, "distillation gradient")
    return loss, grad


def selective_embeddings(
    e: np.ndarray, mask: MaskVector, threshold: float = 0.5, keep_above: bool = True
) -> np.ndarray:
    """Embeddings restricted to the selected dimensions and re-normalized."""
    e = as_matrix(e, "embeddings")
    if e.shape[1] != mask.dim:
        raise ShapeError("mask length", e.shape[1], mask.dim)
    idx = mask.selected(threshold, keep_above)
    if idx.size == 0:
        raise EmptySelectionError(
            "mask selects no dimensions; fall back to full-width relation distillation"
        )
    out, _, _ = l2_normalize_rows(e[:, idx])
    return out


def selective_ird(
    e_old: np.ndarray,
    e_new: np.ndarray,
    mask: MaskVector,
    cfg: IRDConfig,
    threshold: float = 0.5,
    keep_above: bool = True,
) -> tuple[float, np.ndarray]:
    """Relation distillation on the masked dimension subset only. The same
    mask restricts both the snapshot and current embeddings; the gradient is
    with respect to the full-width ``e_new``."""
    e_old = as_matrix(e_old, "snapshot embeddings")
    e_new = as_matrix(e_new, "embeddings")
    if e_old.shape != e_new.shape:
        raise ShapeError("snapshot embeddings", e_new.shape, e_old.shape)
    if e_new.shape[1] != mask.dim:
        raise ShapeError("mask length", e_new.shape[1], mask.dim)
    idx = mask.selected(threshold, keep_above)
    if idx.size == 0:
        raise EmptySelectionError(
            "mask selects no dimensions; fall back to full-width relation distillation"
        )
    old_sel, _, _ = l2_normalize_rows(e_old[:, idx])
    r_old = similarity_matrix(old_sel, cfg.past_temperature)

    sub = e_new[:, idx]
    new_sel, norms, _ = l2_normalize_rows(sub)
    loss, g_sel = _kernels.ird_loss_grad(r_old, new_sel, cfg.current_temperature)
    g_sub = l2_normalize_rows_backward(g_sel, sub, new_sel, norms)
    grad = np.zeros_like(e_new)
    grad[:, idx] = g_sub
    ensure_finite(grad, "selective distillation gradient")
    return loss, grad


def class_means(embeddings: np.ndarray, labels: np.ndarray) -> ClassMeans:
    """Arithmetic mean embedding per class (no re-normalization; the masked
    cosine downstream normalizes)."""
    embeddings = as_matrix(embeddings, "embeddings")
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if labels.shape != (embeddings.shape[0],):
        raise ShapeError("labels", (embeddings.shape[0],), labels.shape)
    if embeddings.shape[0] == 0:
        raise DegenerateInputError("cannot compute class means of an empty dataset")
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    means = np.zeros((classes.size, embeddings.shape[1]))
    np.add.at(means, inverse, embeddings)
    means /= counts[:, None]
    return ClassMeans(classes, means, counts)


def _masked_unit(rows: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scaled = rows * weights
    normed, _, degenerate = l2_normalize_rows(scaled)
    return normed, degenerate


def ncmc_masked_predict(e: np.ndarray, means: ClassMeans, mask: MaskVector) -> np.ndarray:
    """Assign each embedding to the class whose mean is nearest by cosine
    after reweighting both sides with the sigmoid mask. Ties break toward
    the smallest class id; degenerate (zero-norm) masked means never win."""
    arr = np.asarray(e, dtype=np.float64)
    single = arr.ndim == 1
    e = as_matrix(arr.reshape(1, -1) if single else arr, "embeddings")
    if means.classes.size == 0:
        raise DegenerateInputError("no classes in means")
    w = mask.weights()
    if e.shape[1] != mask.dim or means.means.shape[1] != mask.dim:
        raise ShapeError("mask length", e.shape[1], mask.dim)
    me, _ = _masked_unit(e, w)
    mm, degenerate = _masked_unit(means.means, w)
    if degenerate.all():
        raise DegenerateInputError("every masked class mean has zero norm")
    sims = me @ mm.T
    sims[:, degenerate] = -np.inf
    # argmax returns the first (lowest class id) maximum; classes are sorted
    pred = means.classes[np.argmax(sims, axis=1)]
    return pred[0] if single else pred


def mask_training_loss(
    embeddings: np.ndarray,
    labels: np.ndarray,
    means: ClassMeans,
    mask: MaskVector,
    l1_weight: float,
    maximize_alignment: bool = True,
) -> tuple[float, np.ndarray, int]:
    """Mask objective: cosine alignment between each masked embedding and its
    masked class mean, averaged over the dataset, plus an L1 penalty on the
    raw mask.

    With ``maximize_alignment`` (default) the alignment term enters
    negatively, so gradient descent trains the masked classifier; the switch
    flips it to the minimizing variant. Samples whose masked mean is
    degenerate are skipped and counted. Returns (loss, grad_raw_mask,
    n_skipped).
    """
    if l1_weight < 0:
        raise ValueError("l1_weight must be non-negative")
    embeddings = as_matrix(embeddings, "embeddings")
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    n, dim = embeddings.shape
    if labels.shape != (n,):
        raise ShapeError("labels", (n,), labels.shape)
    if dim != mask.dim:
        raise ShapeError("mask length", dim, mask.dim)

    s = mask.raw
    w = mask.weights()
    dw_ds = w * (1.0 - w)

    class_pos = np.searchsorted(means.classes, labels)
    valid_class = (class_pos < means.classes.size) & (means.classes[np.minimum(class_pos, means.classes.size - 1)] == labels)
    if not valid_class.all():
        missing = np.unique(labels[~valid_class]).tolist()
        raise KeyError(f"no class means stored for labels {missing}")
    m = means.means[class_pos]

    a = embeddings * w
    b = m * w
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    live = (na > NORM_EPS) & (nb > NORM_EPS)
    n_skipped = int(np.count_nonzero(~live))
    if n_skipped == n:
        raise DegenerateInputError("all samples degenerate under the current mask")

    sign = -1.0 if maximize_alignment else 1.0
    e_l, m_l, a_l, b_l = embeddings[live], m[live], a[live], b[live]
    na_l, nb_l = na[live], nb[live]
    dot = np.sum(a_l * b_l, axis=1)
    cos = dot / (na_l * nb_l)

    # d cos / d w_k = 2 e_k m_k w_k / (|a||b|) - cos * (e_k^2 w_k / |a|^2 + m_k^2 w_k / |b|^2)
    term = 2.0 * e_l * m_l * w / (na_l * nb_l)[:, None]
    term -= cos[:, None] * (e_l**2 * w / (na_l**2)[:, None] + m_l**2 * w / (nb_l**2)[:, None])
    grad_w = sign * term.sum(axis=0) / n

    loss = sign * float(cos.sum()) / n + l1_weight * float(np.abs(s).sum())
    grad = grad_w * dw_ds + l1_weight * np.sign(s)
    ensure_finite(grad, "mask gradient")
    return loss, grad, n_skipped
