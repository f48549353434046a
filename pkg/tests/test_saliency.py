import csv

import numpy as np
import pytest

from lasp.errors import ConfigError, EmptySelectionError, ShapeError
from lasp.losses import MaskVector
from lasp.model import ContrastiveModel, ModelConfig
from lasp.numerics import LinearLayer, make_rng
from lasp.saliency import (
    ActivationSalience,
    EBConfig,
    ParameterSalience,
    compute_parameter_salience,
    export_salience_csv,
    init_output_salience,
    modulate_gradients,
    propagate_mwp,
    propagate_mwp_layers,
    weight_salience,
)


def _positive_stack(rng, widths):
    layers = []
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        layers.append(LinearLayer(rng.uniform(0.1, 1.0, size=(w_in, w_out)), np.zeros(w_out), "relu"))
    return layers


# ------------------------------------------------------------ seeding


def test_output_salience_uniform_over_selected():
    mask = MaskVector([5.0, -5.0, 5.0, 5.0])
    p = init_output_salience(mask, cfg=EBConfig("thresholded_uniform"))
    np.testing.assert_allclose(p, [1 / 3, 0.0, 1 / 3, 1 / 3])


def test_output_salience_mask_weighted():
    mask = MaskVector([1.0, -5.0, 3.0])
    p = init_output_salience(mask, cfg=EBConfig("mask_weighted"))
    w = mask.weights()
    expected = np.array([w[0], 0.0, w[2]])
    expected /= expected.sum()
    np.testing.assert_allclose(p, expected)
    assert p.sum() == pytest.approx(1.0)


def test_output_salience_empty_selection():
    with pytest.raises(EmptySelectionError):
        init_output_salience(MaskVector([-9.0, -9.0]))


def test_eb_config_rejects_unknown_source():
    with pytest.raises(ConfigError):
        EBConfig("gradient_times_input")


# -------------------------------------------------------- propagation


def test_conservation_on_positive_stack():
    # all-positive weights and positive inputs: nothing dissipates, so each
    # layer's salience sums to the output total
    rng = make_rng(0)
    layers = _positive_stack(rng, [6, 5, 4, 3])
    x = rng.uniform(0.5, 2.0, size=(7, 6))
    p_out = np.array([0.2, 0.5, 0.3])
    acts = propagate_mwp_layers(layers, x, p_out)
    assert len(acts.layers) == 4
    for total in acts.layer_sums():
        assert total == pytest.approx(1.0, abs=1e-12)


def test_dead_output_neuron_dissipates_its_mass():
    # second output unit is reachable only through a negative weight, so the
    # 0.5 assigned to it vanishes from every lower layer
    layers = [LinearLayer(np.array([[1.0, -1.0], [1.0, -1.0]]), np.zeros(2), "relu")]
    x = np.ones((3, 2))
    acts = propagate_mwp_layers(layers, x, np.array([0.5, 0.5]))
    assert acts.layer_sums()[0] == pytest.approx(0.5)


def test_per_sample_row_rescaling_is_invisible():
    # normalization stages multiply each sample's activations by a positive
    # constant; that cancels inside the winning-probability ratio
    rng = make_rng(1)
    layers = _positive_stack(rng, [5, 4, 3])
    x = rng.uniform(0.1, 1.0, size=(6, 5))
    p_out = np.array([0.6, 0.1, 0.3])
    base = propagate_mwp_layers(layers, x, p_out)
    scales = rng.uniform(0.2, 7.0, size=(6, 1))
    rescaled = propagate_mwp_layers(layers, x * scales, p_out)
    # input-layer salience is computed from the rescaled inputs directly
    for a, b in zip(base.layers[1:], rescaled.layers[1:]):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_propagate_through_model_matches_layer_stack():
    # the model inserts normalization between encoder and head; salience must
    # flow through it as if the stages were glued together on the normalized
    # activations
    cfg = ModelConfig(input_dim=4, encoder_widths=(6,), representation_dim=5,
                      projection_hidden_dim=5, embedding_dim=3)
    model = ContrastiveModel.initialize(cfg, make_rng(2))
    x = make_rng(3).uniform(0.1, 1.0, size=(4, 4))
    p_out = np.array([0.5, 0.25, 0.25])
    acts = propagate_mwp(model, x, p_out)
    assert len(acts.layers) == len(model.stages) + 1
    np.testing.assert_allclose(acts.layers[-1], p_out)
    assert all(s >= -1e-15 for v in acts.layers for s in v)
    # ReLU stages and dissipation only remove mass, never create it
    sums = acts.layer_sums()
    for lower, upper in zip(sums[:-1], sums[1:]):
        assert lower <= upper + 1e-9


def test_propagate_rejects_negative_salience():
    cfg = ModelConfig(input_dim=3, encoder_widths=(4,), representation_dim=3,
                      projection_hidden_dim=3, embedding_dim=2)
    model = ContrastiveModel.initialize(cfg, make_rng(4))
    with pytest.raises(ValueError):
        propagate_mwp(model, np.ones((2, 3)), np.array([-0.1, 1.1]))


def test_activation_salience_rejects_negative():
    with pytest.raises(ValueError):
        ActivationSalience([np.array([0.2, -0.1])])


# ------------------------------------------------- parameter salience


def test_weight_salience_geometric_mean():
    acts = ActivationSalience([np.array([0.04, 0.25]), np.array([0.16, 0.0, 1.0])])
    psal = weight_salience(acts)
    expected = np.sqrt(np.array([[0.04 * 0.16, 0.0, 0.04], [0.25 * 0.16, 0.0, 0.25]]))
    np.testing.assert_allclose(psal.weights[0], expected)
    np.testing.assert_array_equal(psal.biases[0], [0.16, 0.0, 1.0])


def test_modulation_contracts_and_zeroes():
    rng = make_rng(5)
    grads = [(rng.normal(size=(3, 2)), rng.normal(size=2))]
    sal = ParameterSalience([np.array([[0.0, 1.0], [0.5, 2.0], [0.25, 1.0]])], [np.array([0.0, 1.0])])
    (gw, gb), = modulate_gradients(grads, sal)
    assert np.all(np.abs(gw) <= np.abs(grads[0][0]) + 1e-15)
    # salience >= 1 freezes the parameter outright
    np.testing.assert_array_equal(gw[:, 1], 0.0)
    assert gw[1, 1] == 0.0  # salience 2.0 clamps to full stop, not negative
    np.testing.assert_allclose(gw[2, 0], grads[0][0][2, 0] * 0.75)
    assert gb[1] == 0.0 and gb[0] == grads[0][1][0]


def test_modulation_shape_mismatch():
    sal = ParameterSalience([np.zeros((2, 2))], [np.zeros(2)])
    with pytest.raises(ShapeError):
        modulate_gradients([(np.zeros((3, 2)), np.zeros(2))], sal)


def test_zeros_like_leaves_gradients_untouched():
    cfg = ModelConfig(input_dim=3, encoder_widths=(4,), representation_dim=3,
                      projection_hidden_dim=3, embedding_dim=2)
    model = ContrastiveModel.initialize(cfg, make_rng(6))
    sal = ParameterSalience.zeros_like(model.stages)
    grads = [(np.ones_like(l.weights), np.ones_like(l.bias)) for l in model.stages]
    out = modulate_gradients(grads, sal)
    for (gw, gb), (ow, ob) in zip(grads, out):
        np.testing.assert_array_equal(gw, ow)
        np.testing.assert_array_equal(gb, ob)


def test_compute_parameter_salience_end_to_end():
    cfg = ModelConfig(input_dim=4, encoder_widths=(5,), representation_dim=4,
                      projection_hidden_dim=4, embedding_dim=3)
    model = ContrastiveModel.initialize(cfg, make_rng(7))
    x = make_rng(8).uniform(0.1, 1.0, size=(6, 4))
    acts, psal = compute_parameter_salience(model, x, MaskVector([4.0, -4.0, 4.0]))
    assert len(psal.weights) == len(model.stages)
    for sw, layer in zip(psal.weights, model.stages):
        assert sw.shape == layer.weights.shape
        assert (sw >= 0).all() and (sw <= 1.0 + 1e-12).all()


def test_export_salience_csv(tmp_path):
    sal = ParameterSalience([np.array([[0.5]])], [np.array([0.25])])
    path = tmp_path / "salience.csv"
    export_salience_csv(sal, ["stage_a"], path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["stage", "kind", "row", "col", "salience"]
    assert rows[1] == ["stage_a", "weight", "0", "0", "0.5"]
    assert rows[2] == ["stage_a", "bias", "-1", "0", "0.25"]
