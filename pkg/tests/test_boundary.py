import numpy as np
import pytest

from lasp.boundary import (
    BoundaryDetector,
    BoundaryDetectorConfig,
    MaskTrainConfig,
    assemble_dsrs,
    detect_boundary,
    fit_mask,
    oracle_boundaries,
    train_salient_mask,
)
from lasp.data import Dataset
from lasp.errors import ConfigError, DegenerateInputError
from lasp.memory import ReplayBuffer
from lasp.model import ContrastiveModel, ModelConfig
from lasp.numerics import make_rng


def _memory_with(rng, classes=(0, 1), per_class=4, dim=3):
    buf = ReplayBuffer(len(classes) * per_class, rng)
    labels = np.repeat(np.array(classes), per_class)
    buf.rebalance_after_task(rng.normal(size=(labels.size, dim)), labels, 0)
    return buf


def _planted_embeddings(rng, n_per_class=40, dim=16, informative=(0, 1, 2), gap=4.0):
    """Two classes separated only along the informative dims; everything else
    is indistinguishable noise."""
    n = 2 * n_per_class
    e = rng.normal(size=(n, dim))
    labels = np.repeat([0, 1], n_per_class)
    for d in informative:
        e[:, d] += np.where(labels == 0, -gap / 2, gap / 2)
    return e, labels


# ----------------------------------------------------------- selection set


def test_assemble_dsrs_settings():
    rng = make_rng(0)
    memory = _memory_with(rng)
    batch = Dataset(rng.normal(size=(5, 3)), np.array([2, 2, 3, 3, 2]))

    past = assemble_dsrs(memory, batch, "onlypast")
    assert len(past) == len(memory)
    current = assemble_dsrs(memory, batch, "onlycurrent")
    assert len(current) == 5
    both = assemble_dsrs(memory, batch, "combined")
    assert len(both) == len(memory) + 5
    np.testing.assert_array_equal(np.unique(both.labels), [0, 1, 2, 3])


def test_assemble_dsrs_degenerate_paths():
    rng = make_rng(1)
    batch = Dataset(rng.normal(size=(4, 3)), np.array([0, 0, 1, 1]))
    with pytest.raises(DegenerateInputError):
        assemble_dsrs(None, batch, "onlypast")
    with pytest.raises(DegenerateInputError):
        assemble_dsrs(_memory_with(rng), None, "onlycurrent")
    with pytest.raises(DegenerateInputError):
        assemble_dsrs(None, None, "combined")
    with pytest.raises(ConfigError):
        assemble_dsrs(None, batch, "everything")
    # combined degrades gracefully when only one side exists
    assert len(assemble_dsrs(None, batch, "combined")) == 4


# ------------------------------------------------------------ mask fitting


def test_fit_mask_finds_informative_dims():
    rng = make_rng(2)
    e, labels = _planted_embeddings(rng, n_per_class=30, dim=12, informative=(1, 4, 7))
    # Small init keeps the uniform draw from dominating the learned ranking;
    # a mild l1 weight prunes noise dims without eating redundant signal dims.
    cfg = MaskTrainConfig(restarts=4, epochs=250, step_size=0.2, l1_weight=0.01,
                          init_scale=0.1)
    mask, reports = fit_mask(e, labels, cfg, make_rng(3))
    assert len(reports) == 4
    top3 = set(np.argsort(mask.raw)[-3:].tolist())
    assert top3 == {1, 4, 7}
    best = max(r["accuracy"] for r in reports if not r["failed"])
    assert best > 0.9


def test_fit_mask_reports_schema():
    rng = make_rng(4)
    e, labels = _planted_embeddings(rng, n_per_class=10, dim=6)
    _, reports = fit_mask(e, labels, MaskTrainConfig(restarts=2, epochs=5), make_rng(5))
    for r in reports:
        assert set(r) >= {"restart", "failed", "accuracy", "l1_norm", "selected_count"}


def test_fit_mask_single_class_raises():
    rng = make_rng(6)
    e = rng.normal(size=(8, 4))
    with pytest.raises(DegenerateInputError, match="2 classes"):
        fit_mask(e, np.zeros(8, dtype=int), MaskTrainConfig(), make_rng(7))


def test_train_salient_mask_leaves_model_untouched():
    cfg = ModelConfig(input_dim=5, encoder_widths=(8,), representation_dim=6,
                      projection_hidden_dim=6, embedding_dim=4)
    model = ContrastiveModel.initialize(cfg, make_rng(8))
    h_before = model.params_hash()
    rng = make_rng(9)
    data = Dataset(rng.normal(size=(20, 5)), np.repeat([0, 1], 10))
    mask, reports = train_salient_mask(model, data, MaskTrainConfig(restarts=2, epochs=10), make_rng(10))
    assert model.params_hash() == h_before
    assert mask.dim == 4
    assert len(reports) == 2


def test_mask_train_config_validation():
    with pytest.raises(ConfigError):
        MaskTrainConfig(restarts=0)
    with pytest.raises(ConfigError):
        MaskTrainConfig(threshold=1.0)
    with pytest.raises(ConfigError):
        MaskTrainConfig(step_size=0.0)


# --------------------------------------------------------------- detector


def test_detector_flags_sharp_drop():
    det = BoundaryDetector(BoundaryDetectorConfig(window=3, drop_ratio=0.5))
    for acc in (0.9, 0.8, 0.85):
        assert not det.update(acc)
    assert det.update(0.1)  # 0.1 < 0.5 * mean(0.9, 0.8, 0.85)


def test_detector_needs_full_window():
    det = BoundaryDetector(BoundaryDetectorConfig(window=4, drop_ratio=0.5))
    assert not det.update(0.9)
    assert not det.update(0.0)  # window not full yet, no verdict


def test_detector_window_restarts_after_flag():
    det = BoundaryDetector(BoundaryDetectorConfig(window=2, drop_ratio=0.5))
    det.update(0.9)
    det.update(0.9)
    assert det.update(0.1)
    # the flag cleared history; the next readings build a fresh window
    assert not det.update(0.1)
    assert not det.update(0.12)
    assert not det.update(0.11)  # similar readings, no second flag


def test_detect_boundary_matches_streaming_detector():
    accs = [0.9, 0.85, 0.9, 0.2, 0.25, 0.3, 0.31]
    cfg = BoundaryDetectorConfig(window=3, drop_ratio=0.5)
    flags = detect_boundary(accs, cfg)
    assert flags == [False, False, False, True, False, False, False]


def test_oracle_boundaries_from_task_ids():
    assert oracle_boundaries([0, 0, 1, 1, 1, 2]) == [False, False, True, False, False, True]
    assert oracle_boundaries([5]) == [False]
