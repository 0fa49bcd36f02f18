"""Tests for the convolution, recalibration and GRU building blocks."""
import numpy as np
import pytest

from adacare.errors import ShapeError
from adacare.models.layers import (ConvBank, GruParams, SEParams, compressed_width,
                                   dilated_causal_conv, dilated_causal_conv_backward, gru_sequence,
                                   gru_sequence_backward, gru_step, multi_scale_conv, se_backward,
                                   se_forward, se_recalibrate)
from adacare.utils.numeric import Activation, finite_diff_grad


def random_bank(rng, n_filters, kernel, n_inputs, rate):
    return ConvBank(rng.normal(size=(n_filters, kernel, n_inputs)), rng.normal(size=n_filters), rate)


def random_gru(rng, n_h, n_in, scale=0.5):
    shape = (n_h, n_h + n_in)
    return GruParams(rng.normal(scale=scale, size=shape), rng.normal(scale=scale, size=n_h),
                     rng.normal(scale=scale, size=shape), rng.normal(scale=scale, size=n_h),
                     rng.normal(scale=scale, size=shape), rng.normal(scale=scale, size=n_h))


def scalar_gru_step(h_prev, v, p):
    """Element-by-element transliteration of the GRU recurrence."""
    def sig(a):
        return 1.0 / (1.0 + np.exp(-a))

    n_h = h_prev.shape[0]
    hv = list(h_prev) + list(v)
    z, r = np.zeros(n_h), np.zeros(n_h)
    for i in range(n_h):
        az = p.b_z[i]
        ar = p.b_r[i]
        for j, value in enumerate(hv):
            az += p.W_z[i, j] * value
            ar += p.W_r[i, j] * value
        z[i], r[i] = sig(az), sig(ar)
    rhv = [r[j] * h_prev[j] for j in range(n_h)] + list(v)
    h = np.zeros(n_h)
    for i in range(n_h):
        ah = p.b_h[i]
        for j, value in enumerate(rhv):
            ah += p.W_h[i, j] * value
        h[i] = (1.0 - z[i]) * h_prev[i] + z[i] * np.tanh(ah)
    return h


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def test_dilated_conv_worked_example():
    series = np.arange(1.0, 6.0)[:, None]
    bank = ConvBank(np.ones((1, 2, 1)), np.zeros(1), rate=2)
    np.testing.assert_array_equal(dilated_causal_conv(series, bank)[:, 0], [1.0, 2.0, 4.0, 6.0, 8.0])


def test_zero_filters_give_zero_output():
    series = np.random.default_rng(0).normal(size=(6, 3))
    bank = ConvBank(np.zeros((4, 2, 3)), np.zeros(4), rate=3)
    np.testing.assert_array_equal(dilated_causal_conv(series, bank), np.zeros((6, 4)))


def test_identity_selector_copies_column():
    series = np.random.default_rng(1).normal(size=(7, 3))
    weight = np.zeros((1, 1, 3))
    weight[0, 0, 2] = 1.0
    out = dilated_causal_conv(series, ConvBank(weight, np.zeros(1), rate=1))
    np.testing.assert_array_equal(out[:, 0], series[:, 2])


def test_conv_shape_mismatch():
    bank = ConvBank(np.ones((2, 2, 3)), np.zeros(2), rate=1)
    with pytest.raises(ShapeError):
        dilated_causal_conv(np.ones((4, 2)), bank)


def test_conv_bank_validation():
    with pytest.raises(ShapeError):
        ConvBank(np.ones((2, 2, 3)), np.zeros(2), rate=0)
    with pytest.raises(ShapeError):
        ConvBank(np.ones((2, 2, 3)), np.zeros(3), rate=1)


def test_causality_of_multi_scale_conv():
    rng = np.random.default_rng(2)
    banks = [random_bank(rng, 3, 2, 4, rate) for rate in (1, 2, 3)]
    for _ in range(50):
        n_visits = int(rng.integers(2, 12))
        t = int(rng.integers(0, n_visits - 1))
        series = rng.normal(size=(n_visits, 4))
        perturbed = series.copy()
        perturbed[t + 1:] = rng.normal(size=(n_visits - t - 1, 4))
        a = multi_scale_conv(series, banks)
        b = multi_scale_conv(perturbed, banks)
        assert np.array_equal(a[:t + 1], b[:t + 1])


def test_receptive_field():
    rng = np.random.default_rng(3)
    bank = random_bank(rng, 2, 2, 3, rate=3)
    series = rng.normal(size=(10, 3))
    t = 9
    for j in range(1, t + 1):
        perturbed = series.copy()
        perturbed[t - j] += 1.0
        changed = not np.array_equal(dilated_causal_conv(series, bank)[t], dilated_causal_conv(perturbed, bank)[t])
        assert changed == (j == 3)


def test_single_bank_multi_scale_equals_conv():
    rng = np.random.default_rng(4)
    bank = random_bank(rng, 3, 2, 2, rate=2)
    series = rng.normal(size=(6, 2))
    np.testing.assert_array_equal(multi_scale_conv(series, [bank]), dilated_causal_conv(series, bank))


def test_zero_second_bank_gives_zero_half():
    rng = np.random.default_rng(5)
    banks = [random_bank(rng, 3, 2, 2, rate=1), ConvBank(np.zeros((3, 2, 2)), np.zeros(3), rate=2)]
    out = multi_scale_conv(rng.normal(size=(5, 2)), banks)
    np.testing.assert_array_equal(out[:, 3:], np.zeros((5, 3)))


def test_multi_scale_slices_match_each_bank():
    rng = np.random.default_rng(6)
    banks = [random_bank(rng, 2, 2, 3, rate) for rate in (1, 2, 3)]
    series = rng.normal(size=(8, 3))
    out = multi_scale_conv(series, banks)
    for b, bank in enumerate(banks):
        np.testing.assert_array_equal(out[:, 2 * b:2 * b + 2], dilated_causal_conv(series, bank))


def test_multi_scale_rejects_inconsistent_banks():
    rng = np.random.default_rng(7)
    with pytest.raises(ShapeError):
        multi_scale_conv(np.ones((3, 2)), [random_bank(rng, 2, 2, 2, 1), random_bank(rng, 3, 2, 2, 2)])
    with pytest.raises(ShapeError):
        multi_scale_conv(np.ones((3, 2)), [])


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(8)
    bank = random_bank(rng, 2, 2, 3, rate=2)
    series = rng.normal(size=(6, 3))
    upstream = rng.normal(size=(6, 2))
    grad_weight, grad_bias = dilated_causal_conv_backward(series, bank, upstream)

    def loss_of_weight(flat):
        return float((dilated_causal_conv(series, ConvBank(flat.reshape(bank.weight.shape), bank.bias, 2))
                      * upstream).sum())

    def loss_of_bias(bias):
        return float((dilated_causal_conv(series, ConvBank(bank.weight, bias, 2)) * upstream).sum())

    np.testing.assert_allclose(grad_weight.ravel(), finite_diff_grad(loss_of_weight, bank.weight.ravel()),
                               rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(grad_bias, finite_diff_grad(loss_of_bias, bank.bias), rtol=1e-6, atol=1e-8)


# ---------------------------------------------------------------------------
# Recalibration
# ---------------------------------------------------------------------------

def test_compressed_width_rounds_up():
    assert compressed_width(3, 2) == 2
    assert compressed_width(6, 4) == 2
    assert compressed_width(5, 1) == 5


def test_zero_se_gives_half_weights():
    x = np.array([2.0, -4.0, 6.0])
    p = SEParams(np.zeros((2, 3)), np.zeros((3, 2)), ratio=2)
    u, recal = se_recalibrate(x, p)
    np.testing.assert_array_equal(u, [0.5, 0.5, 0.5])
    np.testing.assert_array_equal(recal, 0.5 * x)


def test_zero_input_gives_zero_output():
    rng = np.random.default_rng(9)
    p = SEParams(rng.normal(size=(2, 4)), rng.normal(size=(4, 2)), ratio=2)
    _, recal = se_recalibrate(np.zeros(4), p)
    np.testing.assert_array_equal(recal, np.zeros(4))


def test_sparsemax_recalibration_example():
    p = SEParams(np.array([[1.0, 0.0]]), np.array([[2.0], [0.0]]), ratio=2, activation=Activation.SPARSEMAX)
    x = np.array([1.0, 5.0])
    u, recal = se_recalibrate(x, p)
    np.testing.assert_allclose(u, [1.0, 0.0])
    np.testing.assert_allclose(recal, [1.0, 0.0])


def test_sigmoid_gate_never_amplifies():
    rng = np.random.default_rng(10)
    for _ in range(100):
        p = SEParams(rng.normal(size=(3, 5)), rng.normal(size=(5, 3)), ratio=2)
        x = rng.normal(size=5)
        u, recal = se_recalibrate(x, p)
        assert ((u >= 0) & (u <= 1)).all()
        assert (np.abs(recal) <= np.abs(x)).all()


def test_sparsemax_weights_on_simplex():
    rng = np.random.default_rng(11)
    p = SEParams(rng.normal(size=(2, 4)), rng.normal(size=(4, 2)), ratio=2, activation="sparsemax")
    weights, _, _ = se_forward(rng.normal(size=(6, 4)), p)
    assert (weights >= 0).all()
    np.testing.assert_allclose(weights.sum(axis=1), np.ones(6), atol=1e-12)


def test_se_shape_validation():
    with pytest.raises(ShapeError):
        SEParams(np.zeros((1, 3)), np.zeros((3, 1)), ratio=2)
    p = SEParams(np.zeros((2, 3)), np.zeros((3, 2)), ratio=2)
    with pytest.raises(ShapeError):
        se_recalibrate(np.zeros(4), p)


@pytest.mark.parametrize("activation", ["sigmoid", "sparsemax"])
def test_se_backward_matches_finite_differences(activation):
    rng = np.random.default_rng(12)
    rows = rng.normal(size=(4, 5))
    W = rng.normal(size=(3, 5))
    U = rng.normal(size=(5, 3))
    upstream = rng.normal(size=(4, 5))
    p = SEParams(W, U, ratio=2, activation=activation)
    _, _, cache = se_forward(rows, p)
    grad_W, grad_U, grad_rows = se_backward(p, cache, upstream)

    def loss(W_, U_, rows_):
        _, recal, _ = se_forward(rows_, SEParams(W_, U_, ratio=2, activation=activation))
        return float((recal * upstream).sum())

    numeric_W = finite_diff_grad(lambda v: loss(v.reshape(W.shape), U, rows), W.ravel())
    numeric_U = finite_diff_grad(lambda v: loss(W, v.reshape(U.shape), rows), U.ravel())
    numeric_rows = finite_diff_grad(lambda v: loss(W, U, v.reshape(rows.shape)), rows.ravel())
    np.testing.assert_allclose(grad_W.ravel(), numeric_W, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(grad_U.ravel(), numeric_U, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(grad_rows.ravel(), numeric_rows, rtol=1e-5, atol=1e-7)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

def test_zero_gru_keeps_zero_state():
    zeros = np.zeros((4, 7))
    p = GruParams(zeros, np.zeros(4), zeros, np.zeros(4), zeros, np.zeros(4))
    np.testing.assert_array_equal(gru_step(np.zeros(4), np.ones(3), p), np.zeros(4))


def test_gru_ignores_input_without_input_weights():
    rng = np.random.default_rng(13)
    p = random_gru(rng, 4, 3)
    for name in ("W_z", "W_r", "W_h"):
        getattr(p, name)[:, 4:] = 0.0
    h_prev = rng.normal(size=4)
    a = gru_step(h_prev, rng.normal(size=3), p)
    b = gru_step(h_prev, rng.normal(size=3), p)
    np.testing.assert_array_equal(a, b)


def test_gru_step_matches_scalar_oracle():
    rng = np.random.default_rng(14)
    p = random_gru(rng, 4, 3)
    h_prev = rng.normal(size=4)
    v = rng.normal(size=3)
    np.testing.assert_allclose(gru_step(h_prev, v, p), scalar_gru_step(h_prev, v, p), rtol=1e-12, atol=1e-14)


def test_gru_output_bounded():
    rng = np.random.default_rng(15)
    p = random_gru(rng, 5, 2, scale=3.0)
    for _ in range(100):
        h_prev = rng.normal(scale=2.0, size=5)
        h = gru_step(h_prev, rng.normal(scale=5.0, size=2), p)
        assert np.isfinite(h).all()
        assert (np.abs(h) < 1.0 + np.abs(h_prev)).all()


def test_gru_shape_mismatch():
    p = random_gru(np.random.default_rng(16), 4, 3)
    with pytest.raises(ShapeError):
        gru_step(np.zeros(3), np.zeros(3), p)


def test_gru_sequence_matches_repeated_steps():
    rng = np.random.default_rng(17)
    p = random_gru(rng, 4, 3)
    inputs = rng.normal(size=(6, 3))
    states, _ = gru_sequence(inputs, p)
    h = np.zeros(4)
    for t in range(6):
        h = gru_step(h, inputs[t], p)
        np.testing.assert_allclose(states[t], h, rtol=1e-12, atol=1e-14)


def test_gru_backward_matches_finite_differences():
    rng = np.random.default_rng(18)
    p = random_gru(rng, 3, 2)
    inputs = rng.normal(size=(5, 2))
    upstream = rng.normal(size=(5, 3))
    _, cache = gru_sequence(inputs, p)
    grads, grad_inputs = gru_sequence_backward(p, cache, upstream)
    names = ("W_z", "b_z", "W_r", "b_r", "W_h", "b_h")

    def loss_with(name, value):
        arrays = {n: getattr(p, n) for n in names}
        arrays[name] = value.reshape(arrays[name].shape)
        states, _ = gru_sequence(inputs, GruParams(**arrays))
        return float((states * upstream).sum())

    for name in names:
        numeric = finite_diff_grad(lambda v: loss_with(name, v), getattr(p, name).ravel())
        np.testing.assert_allclose(grads[name].ravel(), numeric, rtol=1e-5, atol=1e-8)

    def loss_of_inputs(v):
        states, _ = gru_sequence(v.reshape(inputs.shape), p)
        return float((states * upstream).sum())

    np.testing.assert_allclose(grad_inputs.ravel(), finite_diff_grad(loss_of_inputs, inputs.ravel()),
                               rtol=1e-5, atol=1e-8)
