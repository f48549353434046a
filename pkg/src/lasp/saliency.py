"""Top-down activation salience (per-neuron winning probabilities carried
through positive-weight connections), per-parameter salience as the
geometric mean of a weight's endpoint saliences, and gradient modulation
that shrinks updates on salient parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, EmptySelectionError, ShapeError
from .losses import MaskVector
from .numerics import as_matrix, forward_linear

SALIENCE_SOURCES = ("thresholded_uniform", "mask_weighted")


@dataclass(frozen=True)
class EBConfig:
    """How the output-layer salience is seeded from the mask: uniform over
    the selected dimensions, or proportional to the sigmoid mask on them."""

    salience_source: str = "thresholded_uniform"

    def __post_init__(self):
        if self.salience_source not in SALIENCE_SOURCES:
            raise ConfigError(f"salience_source must be one of {SALIENCE_SOURCES}")


@dataclass
class ActivationSalience:
    """Batch-averaged winning probability per neuron, one vector per neuron
    layer from the model input (index 0) up to the output layer."""

    layers: list

    def __post_init__(self):
        self.layers = [np.ascontiguousarray(v, dtype=np.float64).reshape(-1) for v in self.layers]
        for i, v in enumerate(self.layers):
            if (v < 0).any():
                raise ValueError(f"negative winning probability in layer {i}")

    def layer_sums(self) -> list:
        return [float(v.sum()) for v in self.layers]


@dataclass
class ParameterSalience:
    """Per-stage salience aligned with the weight matrices and biases."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("salience stages", len(self.weights), len(self.biases))

    @staticmethod
    def zeros_like(stages: list) -> "ParameterSalience":
        return ParameterSalience(
            [np.zeros_like(l.weights) for l in stages],
            [np.zeros_like(l.bias) for l in stages],
        )


def init_output_salience(
    mask: MaskVector, threshold: float = 0.5, cfg: EBConfig = EBConfig(), keep_above: bool = True
) -> np.ndarray:
    """Output-layer winning probabilities over embedding dimensions; sums
    to 1 over the mask's selected set."""
    idx = mask.selected(threshold, keep_above)
    if idx.size == 0:
        raise EmptySelectionError("mask selects no dimensions to seed salience from")
    p = np.zeros(mask.dim)
    if cfg.salience_source == "thresholded_uniform":
        p[idx] = 1.0 / idx.size
    else:
        w = mask.weights()[idx]
        p[idx] = w / w.sum()
    return p


def _propagate(stage_inputs: list, weight_mats: list, output_salience: np.ndarray) -> ActivationSalience:
    n = stage_inputs[0].shape[0]
    p = np.tile(output_salience, (n, 1))
    per_layer = [None] * (len(weight_mats) + 1)
    per_layer[-1] = output_salience.copy()
    for l in range(len(weight_mats) - 1, -1, -1):
        p = _kernels.mwp_propagate(stage_inputs[l], weight_mats[l], p)
        per_layer[l] = p.mean(axis=0)
    return ActivationSalience(per_layer)


def propagate_mwp(model, batch_inputs: np.ndarray, output_salience: np.ndarray) -> ActivationSalience:
    """Carry the output salience down through every linear stage of the
    model, per sample, then average over the batch. Normalization stages
    pass salience through unchanged (they rescale each row by a positive
    constant, which the local normalizer cancels)."""
    batch_inputs = as_matrix(batch_inputs, "salience batch")
    if batch_inputs.shape[0] == 0:
        raise ValueError("salience batch is empty")
    output_salience = np.ascontiguousarray(output_salience, dtype=np.float64).reshape(-1)
    if (output_salience < 0).any():
        raise ValueError("output salience must be non-negative")
    stages = model.stages
    if output_salience.size != stages[-1].out_dim:
        raise ShapeError("output salience", stages[-1].out_dim, output_salience.size)
    _, _, cache = model.embed(batch_inputs)
    return _propagate(cache.stage_inputs(), [l.weights for l in stages], output_salience)


def propagate_mwp_layers(layers: list, batch_inputs: np.ndarray, output_salience: np.ndarray) -> ActivationSalience:
    """Same propagation for a bare stack of linear layers (no head, no
    normalization); used to study conservation on constructed nets."""
    x = as_matrix(batch_inputs, "salience batch")
    inputs = []
    for layer in layers:
        inputs.append(x)
        _, x, _ = forward_linear(layer, x)
    output_salience = np.ascontiguousarray(output_salience, dtype=np.float64).reshape(-1)
    return _propagate(inputs, [l.weights for l in layers], output_salience)


def weight_salience(activation_salience: ActivationSalience) -> ParameterSalience:
    """Per-weight salience = geometric mean of its endpoint neuron
    saliences; a bias inherits its downstream neuron's salience."""
    layers = activation_salience.layers
    if len(layers) < 2:
        raise ShapeError("salience layers", ">= 2", len(layers))
    weights, biases = [], []
    for low, up in zip(layers[:-1], layers[1:]):
        weights.append(np.sqrt(low[:, None] * up[None, :]))
        biases.append(up.copy())
    return ParameterSalience(weights, biases)


def modulate_gradients(grads: list, salience: ParameterSalience) -> list:
    """Shrink each gradient entry by (1 - min(1, salience)); fully salient
    parameters stop moving."""
    if len(grads) != len(salience.weights):
        raise ShapeError("gradient stages", len(salience.weights), len(grads))
    out = []
    for (gw, gb), sw, sb in zip(grads, salience.weights, salience.biases):
        if gw.shape != sw.shape or gb.shape != sb.shape:
            raise ShapeError("salience", gw.shape, sw.shape)
        out.append((gw * (1.0 - np.minimum(1.0, sw)), gb * (1.0 - np.minimum(1.0, sb))))
    return out


def compute_parameter_salience(
    model,
    batch_inputs: np.ndarray,
    mask: MaskVector,
    threshold: float = 0.5,
    cfg: EBConfig = EBConfig(),
    keep_above: bool = True,
) -> tuple[ActivationSalience, ParameterSalience]:
    """Mask-seeded salience for every parameter of the model."""
    p_out = init_output_salience(mask, threshold, cfg, keep_above)
    acts = propagate_mwp(model, batch_inputs, p_out)
    return acts, weight_salience(acts)


def export_salience_csv(salience: ParameterSalience, stage_names: list, path) -> None:
    """One row per parameter: stage, kind, endpoints, salience value.
    Bias rows use -1 for the input index."""
    if len(stage_names) != len(salience.weights):
        raise ShapeError("stage names", len(salience.weights), len(stage_names))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "kind", "row", "col", "salience"])
        for name, sw, sb in zip(stage_names, salience.weights, salience.biases):
            for i in range(sw.shape[0]):
                for j in range(sw.shape[1]):
                    writer.writerow([name, "weight", i, j, repr(float(sw[i, j]))])
            for j in range(sb.shape[0]):
                writer.writerow([name, "bias", -1, j, repr(float(sb[j]))])
