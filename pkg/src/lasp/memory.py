"""Fixed-capacity, class-balanced replay memory storing raw inputs (never
embeddings; those drift as the encoder trains).

Domain-incremental streams key slots by (class, task) so the same label
from a new domain occupies its own balanced share.
"""

from __future__ import annotations

import numpy as np

from .errors import CapacityError, ShapeError
from .numerics import as_matrix


class ReplayBuffer:
    """Per-class sample slots rebalanced after every task: each class gets
    floor(capacity / n_classes), with the remainder going one sample each to
    the lowest class keys. Down-sampling and admission draws are uniform
    under the buffer's own seeded generator."""

    def __init__(self, capacity: int, rng: np.random.Generator, composite_keys: bool = False):
        if capacity < 1:
            raise CapacityError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.rng = rng
        self.composite_keys = bool(composite_keys)
        self._slots = {}

    def _key(self, label: int, task: int):
        return (int(label), int(task)) if self.composite_keys else (int(label),)

    def __len__(self) -> int:
        return sum(arr[0].shape[0] for arr in self._slots.values())

    @property
    def keys(self) -> list:
        return sorted(self._slots)

    def class_counts(self) -> dict:
        return {key: self._slots[key][0].shape[0] for key in self.keys}

    def labels_stored(self) -> np.ndarray:
        """Distinct true labels currently in memory, ascending."""
        return np.unique(np.array([k[0] for k in self._slots], dtype=np.int64))

    def rebalance_after_task(self, inputs: np.ndarray, labels: np.ndarray, task_id: int) -> None:
        """Admit a finished task's samples and re-equalize every slot."""
        inputs = as_matrix(inputs, "task samples")
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if labels.shape != (inputs.shape[0],):
            raise ShapeError("labels", (inputs.shape[0],), labels.shape)

        new_keys = sorted({self._key(l, task_id) for l in labels})
        overlap = set(new_keys) & set(self._slots)
        if overlap:
            raise ValueError(f"classes {sorted(overlap)} are already in memory; task classes must be new")

        all_keys = sorted(set(self._slots) | set(new_keys))
        quota, rem = divmod(self.capacity, len(all_keys))
        if quota == 0:
            raise CapacityError(
                f"capacity {self.capacity} leaves no slot for some of {len(all_keys)} classes"
            )
        quotas = {key: quota + (1 if rank < rem else 0) for rank, key in enumerate(all_keys)}

        for key in self.keys:
            ins, labs, tasks = self._slots[key]
            q = quotas[key]
            if ins.shape[0] > q:
                keep = np.sort(self.rng.choice(ins.shape[0], size=q, replace=False))
                self._slots[key] = (ins[keep], labs[keep], tasks[keep])

        for key in new_keys:
            # one task arrives at a time, so the label alone identifies the pool
            pool = np.flatnonzero(labels == key[0])
            q = min(quotas[key], pool.size)
            take = np.sort(self.rng.choice(pool, size=q, replace=False))
            self._slots[key] = (
                inputs[take].copy(),
                labels[take].copy(),
                np.full(q, task_id, dtype=np.int64),
            )

    def _flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        keys = self.keys
        ins = np.concatenate([self._slots[k][0] for k in keys], axis=0)
        labs = np.concatenate([self._slots[k][1] for k in keys])
        tasks = np.concatenate([self._slots[k][2] for k in keys])
        return ins, labs, tasks

    def contents(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(inputs, labels, task_ids) of everything stored, in key order."""
        if not self._slots:
            raise ValueError("memory is empty")
        return self._flat()

    def sample(self, n: int, rng: np.random.Generator = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Uniform draw of n stored samples: without replacement when n fits
        the buffer, with replacement otherwise."""
        if not self._slots:
            raise ValueError("cannot sample from an empty memory")
        if n < 1:
            raise ValueError("sample size must be >= 1")
        gen = rng if rng is not None else self.rng
        ins, labs, tasks = self._flat()
        idx = gen.choice(ins.shape[0], size=n, replace=n > ins.shape[0])
        return ins[idx], labs[idx], tasks[idx]

    def to_arrays(self) -> tuple[dict, dict]:
        """Serializable (meta, arrays) pair for the checkpoint container."""
        meta = {"capacity": self.capacity, "composite_keys": self.composite_keys}
        if not self._slots:
            return meta, {}
        ins, labs, tasks = self._flat()
        return meta, {
            "buffer_inputs": ins.astype(np.float64),
            "buffer_labels": labs.astype(np.int64),
            "buffer_tasks": tasks.astype(np.int64),
        }

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict, rng: np.random.Generator) -> "ReplayBuffer":
        buffer = cls(meta["capacity"], rng, composite_keys=meta["composite_keys"])
        if "buffer_inputs" not in arrays:
            return buffer
        ins = arrays["buffer_inputs"]
        labs = arrays["buffer_labels"]
        tasks = arrays["buffer_tasks"]
        for label, task in sorted({(int(l), int(t)) for l, t in zip(labs, tasks)}):
            key = buffer._key(label, task)
            pick = (labs == label) & (tasks == task)
            entry = (ins[pick].copy(), labs[pick].copy(), tasks[pick].copy())
            if key in buffer._slots:
                old = buffer._slots[key]
                entry = tuple(np.concatenate([o, e]) for o, e in zip(old, entry))
            buffer._slots[key] = entry
        if len(buffer) > buffer.capacity:
            raise CapacityError(f"stored {len(buffer)} samples exceed capacity {buffer.capacity}")
        return buffer
