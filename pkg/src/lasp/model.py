"""Encoder and projection head producing unit-norm representations and
embeddings, exact backprop through both normalization stages, parameter
snapshots, and a versioned binary checkpoint format.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    ConfigMismatchError,
    CorruptFileError,
    ShapeError,
    VersionMismatchError,
)
from .numerics import (
    LayerCache,
    LinearLayer,
    as_matrix,
    backward_linear,
    forward_linear,
    he_init_layer,
    l2_normalize_rows,
    l2_normalize_rows_backward,
)

MAGIC = b"LASP"
FORMAT_VERSION = 1

_CONFIG_FIELDS = ("input_dim", "encoder_widths", "representation_dim", "projection_hidden_dim", "embedding_dim")


@dataclass(frozen=True)
class ModelConfig:
    """Widths of every stage. The embedding may not outgrow the projection
    hidden layer (redundancy collapses past that width)."""

    input_dim: int
    encoder_widths: tuple = (256, 128)
    representation_dim: int = 128
    projection_hidden_dim: int = 128
    embedding_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "input_dim", int(self.input_dim))
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "representation_dim", int(self.representation_dim))
        object.__setattr__(self, "projection_hidden_dim", int(self.projection_hidden_dim))
        object.__setattr__(self, "embedding_dim", int(self.embedding_dim))
        dims = (self.input_dim, *self.encoder_widths, self.representation_dim,
                self.projection_hidden_dim, self.embedding_dim)
        if any(d < 1 for d in dims):
            raise ConfigError("every model width must be >= 1")
        if self.embedding_dim > self.projection_hidden_dim:
            raise ConfigError(
                f"embedding_dim {self.embedding_dim} exceeds projection_hidden_dim "
                f"{self.projection_hidden_dim}"
            )

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "encoder_widths": list(self.encoder_widths),
            "representation_dim": self.representation_dim,
            "projection_hidden_dim": self.projection_hidden_dim,
            "embedding_dim": self.embedding_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(_CONFIG_FIELDS)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "input_dim" not in d:
            raise ConfigError("model config requires input_dim")
        return cls(**d)


@dataclass
class Encoder:
    """Stack of ReLU layers; the final output is unit-normalized into the
    representation."""

    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("encoder needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.activation != "relu":
                raise ConfigError(f"encoder layer {i} must use relu")
            if i and layer.in_dim != self.layers[i - 1].out_dim:
                raise ShapeError(f"encoder layer {i} input", self.layers[i - 1].out_dim, layer.in_dim)


@dataclass
class ProjectionHead:
    """Exactly two stages: a ReLU hidden layer and an identity output layer,
    followed by unit normalization into the embedding."""

    hidden: LinearLayer
    output: LinearLayer

    def __post_init__(self):
        if self.hidden.activation != "relu":
            raise ConfigError("projection hidden layer must use relu")
        if self.output.activation != "identity":
            raise ConfigError("projection output layer must use identity")
        if self.output.in_dim != self.hidden.out_dim:
            raise ShapeError("projection output input", self.hidden.out_dim, self.output.in_dim)


@dataclass
class ModelCache:
    """Forward state for one batch: per-stage caches plus both normalization
    inputs/outputs, retained for backprop and salience propagation."""

    layer_caches: list
    stage_outputs: list
    enc_raw: np.ndarray
    r: np.ndarray
    r_norms: np.ndarray
    head_raw: np.ndarray
    e: np.ndarray
    e_norms: np.ndarray

    def stage_inputs(self) -> list:
        """Activations entering each linear stage, input batch first."""
        return [c.inputs for c in self.layer_caches]


class ContrastiveModel:
    """Encoder plus projection head. ``embed`` produces unit representations
    r and unit embeddings e; ``backward`` turns gradients on e (and
    optionally r) into exact parameter gradients."""

    def __init__(self, config: ModelConfig, encoder: Encoder, head: ProjectionHead):
        if encoder.layers[0].in_dim != config.input_dim:
            raise ShapeError("encoder input dim", config.input_dim, encoder.layers[0].in_dim)
        widths = tuple(l.out_dim for l in encoder.layers)
        expected = (*config.encoder_widths, config.representation_dim)
        if widths != expected:
            raise ShapeError("encoder widths", expected, widths)
        if head.hidden.in_dim != config.representation_dim:
            raise ShapeError("projection input dim", config.representation_dim, head.hidden.in_dim)
        if head.hidden.out_dim != config.projection_hidden_dim:
            raise ShapeError("projection hidden dim", config.projection_hidden_dim, head.hidden.out_dim)
        if head.output.out_dim != config.embedding_dim:
            raise ShapeError("embedding dim", config.embedding_dim, head.output.out_dim)
        self.config = config
        self.encoder = encoder
        self.head = head

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "ContrastiveModel":
        dims = (config.input_dim, *config.encoder_widths, config.representation_dim)
        enc = [he_init_layer(dims[i], dims[i + 1], "relu", rng) for i in range(len(dims) - 1)]
        hidden = he_init_layer(config.representation_dim, config.projection_hidden_dim, "relu", rng)
        output = he_init_layer(config.projection_hidden_dim, config.embedding_dim, "identity", rng)
        return cls(config, Encoder(enc), ProjectionHead(hidden, output))

    @property
    def stages(self) -> list:
        """Linear stages in forward order, encoder first."""
        return [*self.encoder.layers, self.head.hidden, self.head.output]

    @property
    def stage_names(self) -> list:
        enc = [f"encoder_{i}" for i in range(len(self.encoder.layers))]
        return [*enc, "head_hidden", "head_output"]

    def embed(self, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray, ModelCache]:
        """Forward pass. Returns (representations, embeddings, cache)."""
        x = as_matrix(inputs, "model inputs")
        if x.shape[1] != self.config.input_dim:
            raise ShapeError("model input columns", self.config.input_dim, x.shape[1])
        caches, outputs = [], []
        out = x
        for layer in self.encoder.layers:
            _, out, cache = forward_linear(layer, out)
            caches.append(cache)
            outputs.append(out)
        enc_raw = out
        r, r_norms, _ = l2_normalize_rows(enc_raw)
        _, hidden_out, cache = forward_linear(self.head.hidden, r)
        caches.append(cache)
        outputs.append(hidden_out)
        _, head_raw, cache = forward_linear(self.head.output, hidden_out)
        caches.append(cache)
        outputs.append(head_raw)
        e, e_norms, _ = l2_normalize_rows(head_raw)
        return r, e, ModelCache(caches, outputs, enc_raw, r, r_norms, head_raw, e, e_norms)

    def backward(self, cache: ModelCache, grad_e: np.ndarray, grad_r: np.ndarray = None) -> list:
        """Parameter gradients (one (grad_weights, grad_bias) pair per stage,
        forward order) of any scalar whose gradients on the embeddings (and
        optionally the representations) are supplied."""
        if grad_e is None:
            g_head_raw = np.zeros_like(cache.head_raw)
        else:
            grad_e = as_matrix(grad_e, "embedding gradient")
            if grad_e.shape != cache.e.shape:
                raise ShapeError("embedding gradient", cache.e.shape, grad_e.shape)
            g_head_raw = l2_normalize_rows_backward(grad_e, cache.head_raw, cache.e, cache.e_norms)
        grads = [None] * len(self.stages)
        gw, gb, g = backward_linear(self.head.output, cache.layer_caches[-1], g_head_raw)
        grads[-1] = (gw, gb)
        gw, gb, g = backward_linear(self.head.hidden, cache.layer_caches[-2], g)
        grads[-2] = (gw, gb)
        if grad_r is not None:
            grad_r = as_matrix(grad_r, "representation gradient")
            if grad_r.shape != cache.r.shape:
                raise ShapeError("representation gradient", cache.r.shape, grad_r.shape)
            g = g + grad_r
        g = l2_normalize_rows_backward(g, cache.enc_raw, cache.r, cache.r_norms)
        for i in range(len(self.encoder.layers) - 1, -1, -1):
            gw, gb, g = backward_linear(self.encoder.layers[i], cache.layer_caches[i], g)
            grads[i] = (gw, gb)
        return grads

    def apply_gradients(self, grads: list, learning_rate: float) -> None:
        stages = self.stages
        if len(grads) != len(stages):
            raise ShapeError("gradient stages", len(stages), len(grads))
        for layer, (gw, gb) in zip(stages, grads):
            if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape:
                raise ShapeError("gradient", layer.weights.shape, gw.shape)
            layer.weights -= learning_rate * gw
            layer.bias -= learning_rate * gb

    def zero_grads(self) -> list:
        return [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in self.stages]

    def copy(self) -> "ContrastiveModel":
        enc = Encoder([l.copy() for l in self.encoder.layers])
        head = ProjectionHead(self.head.hidden.copy(), self.head.output.copy())
        return ContrastiveModel(self.config, enc, head)

    def params_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for layer in self.stages:
            h.update(np.ascontiguousarray(layer.weights).tobytes())
            h.update(np.ascontiguousarray(layer.bias).tobytes())
        return h.hexdigest()

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot(self)


class ModelSnapshot:
    """Deep copy of the model parameters, frozen at a task boundary.
    Training the live model never changes a snapshot's outputs."""

    def __init__(self, model: ContrastiveModel):
        self._model = model.copy()
        self._hash = self._model.params_hash()

    @property
    def config(self) -> ModelConfig:
        return self._model.config

    def embed(self, inputs: np.ndarray):
        return self._model.embed(inputs)

    def params_hash(self) -> str:
        return self._hash

    def verify_unchanged(self) -> bool:
        return self._model.params_hash() == self._hash


_ARRAY_DTYPES = {"float64": "<f8", "int64": "<i8"}


def _blob(arr: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(arr).astype(dtype, copy=False).tobytes()


def save_params(model: ContrastiveModel, path, extra_meta: dict = None, arrays: dict = None) -> None:
    """Write the model (and optional named arrays, e.g. buffer contents) as
    little-endian binary: magic, format version, JSON header, parameter
    blobs in stage order, then the arrays in header order."""
    arrays = arrays or {}
    for name, arr in arrays.items():
        if str(arr.dtype) not in _ARRAY_DTYPES:
            raise ValueError(f"array {name!r} has unsupported dtype {arr.dtype}")
    header = {
        "model": model.config.to_dict(),
        "stages": [[l.in_dim, l.out_dim, l.activation] for l in model.stages],
        "extra": extra_meta or {},
        "arrays": [
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
            for name, arr in arrays.items()
        ],
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hjson)), hjson]
    for layer in model.stages:
        parts.append(_blob(layer.weights, "<f8"))
        parts.append(_blob(layer.bias, "<f8"))
    for name, arr in arrays.items():
        parts.append(_blob(arr, _ARRAY_DTYPES[str(arr.dtype)]))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def _take(buf: bytes, offset: int, nbytes: int, what: str) -> tuple[bytes, int]:
    end = offset + nbytes
    if end > len(buf):
        raise CorruptFileError(f"checkpoint truncated while reading {what}")
    return buf[offset:end], end


def load_params(path, expected_config: ModelConfig = None) -> tuple[ContrastiveModel, dict, dict]:
    """Read a checkpoint written by :func:`save_params`. Returns
    (model, extra_meta, arrays). ``expected_config`` lets callers reject a
    file trained under a different model shape."""
    with open(path, "rb") as fh:
        buf = fh.read()
    raw, offset = _take(buf, 0, 12, "header")
    if raw[:4] != MAGIC:
        raise CorruptFileError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    raw, offset = _take(buf, offset, hlen, "header json")
    try:
        header = json.loads(raw.decode("utf-8"))
        config = ModelConfig.from_dict(header["model"])
        stage_specs = header["stages"]
        array_specs = header["arrays"]
        extra = header["extra"]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CorruptFileError(f"unreadable checkpoint header: {exc}") from exc
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(
            f"checkpoint model config {config.to_dict()} does not match expected {expected_config.to_dict()}"
        )

    layers = []
    for in_dim, out_dim, activation in stage_specs:
        raw, offset = _take(buf, offset, 8 * in_dim * out_dim, "weights")
        w = np.frombuffer(raw, dtype="<f8").reshape(in_dim, out_dim).copy()
        raw, offset = _take(buf, offset, 8 * out_dim, "bias")
        b = np.frombuffer(raw, dtype="<f8").copy()
        layers.append(LinearLayer(w, b, activation))
    if len(layers) < 3:
        raise CorruptFileError(f"checkpoint holds {len(layers)} stages, minimum is 3")
    try:
        model = ContrastiveModel(config, Encoder(layers[:-2]), ProjectionHead(layers[-2], layers[-1]))
    except (ConfigError, ShapeError) as exc:
        raise CorruptFileError(f"checkpoint stages inconsistent with its config: {exc}") from exc

    arrays = {}
    for spec in array_specs:
        shape = tuple(int(s) for s in spec["shape"])
        dtype = _ARRAY_DTYPES.get(spec["dtype"])
        if dtype is None:
            raise CorruptFileError(f"array {spec['name']!r} has unsupported dtype {spec['dtype']!r}")
        count = int(np.prod(shape)) if shape else 1
        raw, offset = _take(buf, offset, 8 * count, f"array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if offset != len(buf):
        raise CorruptFileError(f"{len(buf) - offset} trailing bytes after checkpoint payload")
    return model, extra, arrays
