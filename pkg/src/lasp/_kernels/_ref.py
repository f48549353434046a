"""Pure-NumPy reference implementation of the hot kernels.

Mirrors ``_core`` (the Cython extension) function-for-function; the two
backends are parity-tested against each other and against the
finite-difference oracle. Inputs are float64 C-contiguous arrays, already
validated by the dispatch layer in ``__init__``.
"""

from __future__ import annotations

import numpy as np


def _row_softmax_offdiag(e: np.ndarray, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic softmax of pairwise dot products, self-similarity
    excluded. Returns (probabilities, log_probabilities); diagonals are
    0 and -inf respectively."""
    z = (e @ e.T) / temperature
    np.fill_diagonal(z, -np.inf)
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    exps = np.exp(shifted)
    denom = exps.sum(axis=1, keepdims=True)
    return exps / denom, shifted - np.log(denom)


def similarity_matrix(e: np.ndarray, temperature: float) -> np.ndarray:
    p, _ = _row_softmax_offdiag(e, temperature)
    return p


def supcon_loss_grad(
    e: np.ndarray, labels: np.ndarray, anchors: np.ndarray, temperature: float
) -> tuple[float, np.ndarray]:
    """Contrastive loss over anchor views with same-label positives.

    loss = sum over anchors i of -(1/|P_i|) sum_{j in P_i} log p_ij where
    p is the off-diagonal row softmax of e_i . e_k / temperature. Gradient
    is with respect to every row of e.
    """
    n = e.shape[0]
    p, logp = _row_softmax_offdiag(e, temperature)
    pos = labels[:, None] == labels[None, :]
    np.fill_diagonal(pos, False)
    npos = pos.sum(axis=1)

    anchor_idx = np.flatnonzero(anchors)
    if anchor_idx.size == 0:
        return 0.0, np.zeros_like(e)

    pos_logp = np.where(pos, logp, 0.0)
    loss = float(-(pos_logp[anchor_idx].sum(axis=1) / npos[anchor_idx]).sum())

    g = np.zeros((n, n))
    g[anchor_idx] = p[anchor_idx] - pos[anchor_idx] / npos[anchor_idx, None]
    grad = (g @ e + g.T @ e) / temperature
    return loss, grad


def ird_loss_grad(r_old: np.ndarray, e: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """Cross-entropy between a fixed row-stochastic relation matrix and the
    one induced by ``e``; gradient flows only through ``e``."""
    p, logp = _row_softmax_offdiag(e, temperature)
    off = ~np.eye(r_old.shape[0], dtype=bool)
    loss = float(-np.sum(r_old * np.where(off, logp, 0.0)))
    g = p - r_old
    grad = (g @ e + g.T @ e) / temperature
    return loss, grad


def mwp_propagate(acts: np.ndarray, weights: np.ndarray, p_upper: np.ndarray) -> np.ndarray:
    """One top-down winning-probability step through a linear stage.

    acts (n, j): layer inputs; weights (j, i); p_upper (n, i). Negative
    weights and negative activations contribute nothing; upper neurons with
    no positive contribution dissipate their probability mass.
    """
    apos = np.maximum(acts, 0.0)
    wpos = np.maximum(weights, 0.0)
    denom = apos @ wpos
    scale = np.divide(p_upper, denom, out=np.zeros_like(p_upper), where=denom > 0.0)
    return apos * (scale @ wpos.T)
