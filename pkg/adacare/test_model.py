"""Tests for the network: parameter layout, forward pass, loss and backward pass."""
import math

import numpy as np
import pytest

from adacare.conftest import make_patient
from adacare.errors import ConfigError, DataError, ShapeError
from adacare.models.configs import ModelConfig, Variant
from adacare.models.layers import gru_sequence
from adacare.models.network import (Mode, backward, bce_logit_grad, bce_loss, check_params, forward,
                                    gru_params, init_params, param_layout)
from adacare.models.params import ParamSet
from adacare.services.training_service import batch_loss_and_grads
from adacare.utils.numeric import finite_diff_grad


def numeric_grad(patient, params, config, seed=None):
    mode = Mode.EVAL if seed is None else Mode.TRAIN

    def loss_at(vector):
        out = forward(patient, params.unflatten(vector), config, mode=mode, seed=seed)
        return bce_loss(out.predictions, patient.labels, patient.mask)

    return finite_diff_grad(loss_at, params.flatten())


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def test_init_is_deterministic(tiny_config):
    assert init_params(tiny_config, 5).equals(init_params(tiny_config, 5))
    assert not init_params(tiny_config, 5).equals(init_params(tiny_config, 6))


def test_init_biases_are_zero_and_weights_bounded(tiny_config):
    params = init_params(tiny_config, 1)
    for name, (shape, fans) in param_layout(tiny_config).items():
        assert params[name].shape == shape
        if fans is None:
            assert not params[name].any()
        else:
            assert np.abs(params[name]).max() <= math.sqrt(6.0 / sum(fans))


def test_layout_follows_variant():
    gru = param_layout(ModelConfig(preset="tiny", variant=Variant.GRU))
    assert list(gru) == ["gru.W_z", "gru.b_z", "gru.W_r", "gru.b_r", "gru.W_h", "gru.b_h", "out.W_y", "out.b"]
    assert gru["gru.W_z"][0] == (4, 7)

    full = param_layout(ModelConfig(preset="tiny", variant=Variant.CONV_SIGMOID))
    assert list(full)[:8] == ["conv.k1.weight", "conv.k1.bias", "conv.k2.weight", "conv.k2.bias",
                              "conv.k3.weight", "conv.k3.bias", "se_conv.W", "se_conv.U"]
    assert full["conv.k2.weight"][0] == (2, 2, 3)
    assert full["se_conv.W"][0] == (3, 6)
    assert full["se_raw.W"][0] == (2, 3)
    assert full["gru.W_h"][0] == (4, 13)

    conv_only = param_layout(ModelConfig(preset="tiny", variant=Variant.CONV))
    assert "se_raw.W" not in conv_only and "se_conv.W" in conv_only


def test_check_params_names_the_problem(tiny_config):
    params = init_params(tiny_config, 0)
    check_params(params, tiny_config)
    broken = ParamSet({name: value for name, value in params.items() if name != "se_raw.U"})
    with pytest.raises(ShapeError, match="se_raw.U"):
        check_params(broken, tiny_config)


def test_layout_requires_feature_count():
    with pytest.raises(ConfigError):
        param_layout(ModelConfig(hidden_units=4))


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def test_zero_params_predict_one_half(tiny_config):
    params = init_params(tiny_config, 0).map(np.zeros_like)
    out = forward(make_patient(1, 3), params, tiny_config)
    np.testing.assert_array_equal(out.predictions, [0.5])


def test_eval_forward_is_repeatable(tiny_config, patient):
    params = init_params(tiny_config, 2)
    a = forward(patient, params, tiny_config).predictions
    b = forward(patient, params, tiny_config).predictions
    np.testing.assert_array_equal(a, b)
    assert ((a > 0) & (a < 1)).all()


def test_plain_gru_variant_is_a_logistic_gru():
    config = ModelConfig(preset="tiny", variant=Variant.GRU)
    params = init_params(config, 3)
    patient = make_patient(7, 3, seed=4)
    states, _ = gru_sequence(patient.visits, gru_params(params))
    expected = 1.0 / (1.0 + np.exp(-(states @ params["out.W_y"][0] + params["out.b"][0])))
    np.testing.assert_allclose(forward(patient, params, config).predictions, expected, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("variant", list(Variant))
def test_forward_is_causal(variant):
    config = ModelConfig(preset="tiny", variant=variant, dropout=0.3)
    params = init_params(config, 9)
    rng = np.random.default_rng(10)
    for _ in range(100):
        n_visits = int(rng.integers(2, 10))
        t = int(rng.integers(0, n_visits - 1))
        patient = make_patient(n_visits, 3, seed=int(rng.integers(1 << 30)))
        visits = patient.visits.copy()
        visits[t + 1:] = rng.normal(size=(n_visits - t - 1, 3))
        perturbed = patient.with_visits(visits)
        for mode, seed in ((Mode.EVAL, None), (Mode.TRAIN, 17)):
            a = forward(patient, params, config, mode=mode, seed=seed)
            b = forward(perturbed, params, config, mode=mode, seed=seed)
            assert np.array_equal(a.predictions[:t + 1], b.predictions[:t + 1])
            assert np.array_equal(a.trace.raw_weights[:t + 1], b.trace.raw_weights[:t + 1])


def test_trace_shapes(tiny_config, patient):
    trace = forward(patient, init_params(tiny_config, 0), tiny_config).trace
    assert trace.raw_weights.shape == (5, 3)
    assert trace.conv_weights.shape == (5, 6)
    assert trace.rate_labels == ("k1", "k2", "k3")
    assert trace.block_means().shape == (5, 3)


def test_trace_without_raw_recalibration_is_all_ones(patient):
    config = ModelConfig(preset="tiny", variant=Variant.CONV)
    trace = forward(patient, init_params(config, 0), config).trace
    np.testing.assert_array_equal(trace.raw_weights, np.ones((5, 3)))


def test_forward_rejects_bad_input(tiny_config):
    params = init_params(tiny_config, 0)
    with pytest.raises(ShapeError):
        forward(make_patient(4, 2), params, tiny_config)
    with pytest.raises(ShapeError):
        forward(make_patient(5, 3), params, tiny_config.updated(max_seq_len=4))
    visits = np.ones((3, 3))
    visits[1, 2] = np.nan
    with pytest.raises(DataError):
        forward(make_patient(3, 3).with_visits(visits), params, tiny_config)


def test_train_mode_dropout_needs_seed(patient):
    config = ModelConfig(preset="tiny", dropout=0.5)
    params = init_params(config, 0)
    with pytest.raises(ConfigError):
        forward(patient, params, config, mode=Mode.TRAIN)
    a = forward(patient, params, config, mode=Mode.TRAIN, seed=1).predictions
    b = forward(patient, params, config, mode=Mode.TRAIN, seed=1).predictions
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def test_bce_worked_examples():
    assert bce_loss([0.5], [1.0], [1.0]) == pytest.approx(math.log(2.0), abs=1e-12)
    expected = (-math.log(0.9) - math.log(0.8)) / 2.0
    assert bce_loss([0.9, 0.8, 0.1], [1.0, 1.0, 1.0], [1.0, 1.0, 0.0]) == pytest.approx(expected, abs=1e-12)


def test_bce_is_clamped():
    assert bce_loss([1.0], [1.0], [1.0]) < 2e-6
    assert bce_loss([0.0], [1.0], [1.0]) == pytest.approx(-math.log(1e-7))


def test_bce_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        bce_loss([0.5, 0.5], [1.0], [1.0])
    with pytest.raises(DataError):
        bce_loss([0.5], [1.0], [0.0])


def test_logit_grad_is_masked_mean():
    np.testing.assert_allclose(bce_logit_grad([0.25, 0.5, 0.9], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]),
                               [-0.375, 0.25, 0.0])


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("variant", list(Variant))
def test_backward_matches_finite_differences(variant):
    config = ModelConfig(preset="tiny", variant=variant)
    params = init_params(config, 21)
    patient = make_patient(5, 3, seed=22)
    loss, grads = backward(patient, None, None, params, config)
    assert loss == pytest.approx(bce_loss(forward(patient, params, config).predictions,
                                          patient.labels, patient.mask))
    assert grads.names() == params.names()
    np.testing.assert_allclose(grads.flatten(), numeric_grad(patient, params, config), rtol=1e-4, atol=1e-8)


def test_backward_through_dropout_matches_finite_differences():
    config = ModelConfig(preset="tiny", dropout=0.3)
    params = init_params(config, 23)
    patient = make_patient(6, 3, seed=24)
    _, grads = backward(patient, None, None, params, config, dropout_seed=99)
    np.testing.assert_allclose(grads.flatten(), numeric_grad(patient, params, config, seed=99),
                               rtol=1e-4, atol=1e-8)


def test_saturated_predictions_have_zero_gradient(tiny_config):
    params = init_params(tiny_config, 0)
    params["out.b"] = np.array([-50.0])
    patient = make_patient(4, 3, labels=np.zeros(4))
    _, grads = backward(patient, None, None, params, tiny_config)
    assert not grads.flatten().any()


def test_duplicated_patient_leaves_mean_gradient_unchanged(tiny_config, patient):
    params = init_params(tiny_config, 4)
    loss_1, grads_1, _ = batch_loss_and_grads([patient], params, tiny_config)
    loss_2, grads_2, n = batch_loss_and_grads([patient, patient], params, tiny_config)
    assert n == 2
    assert loss_2 == pytest.approx(loss_1, rel=1e-14)
    np.testing.assert_allclose(grads_2.flatten(), grads_1.flatten(), rtol=1e-13, atol=1e-16)


# ---------------------------------------------------------------------------
# ParamSet
# ---------------------------------------------------------------------------

def test_params_save_load_is_bit_exact(tiny_config, tmp_path):
    params = init_params(tiny_config, 8)
    path = params.save(tmp_path / "params.bin", metadata={"seed": 8})
    loaded, metadata = ParamSet.load(path)
    assert loaded.names() == params.names()
    assert loaded.flatten().tobytes() == params.flatten().tobytes()
    assert metadata == {"seed": 8}


def test_unflatten_and_locate(tiny_config):
    params = init_params(tiny_config, 8)
    assert params.unflatten(params.flatten()).equals(params)
    first = params.names()[0]
    assert params.locate(0) == (first, (0, 0, 0))
    assert params.locate(params.size - 1) == ("out.b", (0,))
    with pytest.raises(IndexError):
        params.locate(params.size)
    with pytest.raises(ShapeError):
        params.unflatten(np.zeros(params.size + 1))
