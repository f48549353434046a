"""Dense-array math primitives: linear layers, normalization, seeded RNG,
and the central-difference gradient oracle used throughout the test suite.

All arrays are float64 C-contiguous 2-D matrices unless stated otherwise.
Randomness comes from ``numpy.random.Generator`` backed by PCG64; identical
seeds give bit-identical streams on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

ACTIVATIONS = ("relu", "identity")

#: Norm floor used by :func:`l2_normalize`; vectors below it are flagged
#: degenerate instead of raising, because zero embeddings can occur
#: transiently while a mask is being trained.
NORM_EPS = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64) for the given seed."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """n independent deterministic generators derived from one seed."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def as_matrix(x, what: str = "input") -> np.ndarray:
    """Coerce to a float64 C-contiguous 2-D array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(what, "2-D array", f"{arr.ndim}-D array")
    return arr


def ensure_finite(arr: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return arr


@dataclass
class LinearLayer:
    """Dense layer ``out = phi(x @ weights + bias)`` with phi in
    {relu, identity}. ``weights`` is (in_dim, out_dim)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError("weights", "2-D array", f"{self.weights.ndim}-D array")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError("bias", f"({self.weights.shape[1]},)", self.bias.shape)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        ensure_finite(self.weights, "weights")
        ensure_finite(self.bias, "bias")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weights.copy(), self.bias.copy(), self.activation)


def he_init_layer(in_dim: int, out_dim: int, activation: str, rng: np.random.Generator) -> LinearLayer:
    """Fan-in scaled Gaussian init: sqrt(2/fan_in) for ReLU layers,
    sqrt(1/fan_in) for identity layers. Biases start at zero."""
    gain = 2.0 if activation == "relu" else 1.0
    scale = np.sqrt(gain / in_dim)
    weights = rng.normal(0.0, scale, size=(in_dim, out_dim))
    return LinearLayer(weights, np.zeros(out_dim), activation)


@dataclass
class LayerCache:
    """Forward state retained for backprop and salience propagation."""

    inputs: np.ndarray
    pre_activation: np.ndarray


def forward_linear(layer: LinearLayer, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray, LayerCache]:
    """Apply the layer to a batch. Returns (pre_activation, output, cache)."""
    inputs = as_matrix(inputs)
    if inputs.shape[1] != layer.in_dim:
        raise ShapeError("layer input columns", layer.in_dim, inputs.shape[1])
    pre = inputs @ layer.weights + layer.bias
    out = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return pre, out, LayerCache(inputs, pre)


def backward_linear(
    layer: LinearLayer, cache: LayerCache, upstream_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of the layer map. Returns (grad_weights, grad_bias,
    grad_input) for the cached forward pass."""
    if cache is None:
        raise ValueError("backward_linear needs the cache from forward_linear")
    upstream_grad = as_matrix(upstream_grad, "upstream gradient")
    if upstream_grad.shape != cache.pre_activation.shape:
        raise ShapeError("upstream gradient", cache.pre_activation.shape, upstream_grad.shape)
    if layer.activation == "relu":
        d_pre = upstream_grad * (cache.pre_activation > 0.0)
    else:
        d_pre = upstream_grad
    grad_weights = cache.inputs.T @ d_pre
    grad_bias = d_pre.sum(axis=0)
    grad_input = d_pre @ layer.weights.T
    return grad_weights, grad_bias, grad_input


def l2_normalize(v: np.ndarray, eps: float = NORM_EPS) -> tuple[np.ndarray, bool]:
    """Scale a vector to unit length: ``v / max(||v||, eps)``.

    Returns (vector, degenerate) where degenerate flags ``||v|| <= eps``;
    a zero vector comes back unchanged rather than raising.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    return v / max(norm, eps), norm <= eps


def l2_normalize_rows(x: np.ndarray, eps: float = NORM_EPS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise unit normalization. Returns (rows, norms, degenerate_mask)."""
    x = as_matrix(x)
    norms = np.linalg.norm(x, axis=1)
    degenerate = norms <= eps
    out = x / np.maximum(norms, eps)[:, None]
    return out, norms, degenerate


def l2_normalize_rows_backward(
    grad_out: np.ndarray, x: np.ndarray, normalized: np.ndarray, norms: np.ndarray, eps: float = NORM_EPS
) -> np.ndarray:
    """Backward pass of :func:`l2_normalize_rows`.

    For rows with ``||x|| > eps`` uses d(x/||x||); degenerate rows fall back
    to the constant 1/eps scaling of the forward clamp.
    """
    grad_out = as_matrix(grad_out, "gradient")
    live = norms > eps
    inner = np.sum(grad_out * normalized, axis=1, keepdims=True)
    grad = (grad_out - inner * normalized) / np.maximum(norms, eps)[:, None]
    if not np.all(live):
        grad[~live] = grad_out[~live] / eps
    return grad


def finite_diff_grad(scalar_fn, point: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient estimate ``(f(x+h) - f(x-h)) / 2h`` per
    coordinate. ``point`` may have any shape; the result matches it."""
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(scalar_fn(point))
        flat[i] = orig - step
        f_minus = float(scalar_fn(point))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError("finite_diff_grad: function value is not finite")
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_grad_error(analytic: np.ndarray, estimate: np.ndarray) -> float:
    """Max absolute deviation scaled by the estimate's magnitude (floored at
    1 so near-zero gradients are compared absolutely)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    denom = max(1.0, float(np.max(np.abs(estimate)))) if estimate.size else 1.0
    return float(np.max(np.abs(analytic - estimate))) / denom if analytic.size else 0.0
