# adacare/models/network.py
"""
The full network: multi-scale causal convolution with scale-adaptive
recalibration, recalibrated raw-feature skip connection, GRU, dropout on the
hidden state, and a logistic output per visit.

Parameter names:
    conv.k{rate}.weight / conv.k{rate}.bias   one bank per dilation rate
    se_conv.W / se_conv.U                     recalibration of the conv features
    se_raw.W / se_raw.U                       recalibration of the raw visit
    gru.W_z, gru.b_z, gru.W_r, gru.b_r, gru.W_h, gru.b_h
    out.W_y / out.b
Only the parameters of the paths a ModelConfig switches on are present.
"""
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
import logging
import math
from typing import Optional

import numpy as np

from adacare.errors import ConfigError, DataError, NumericError, ShapeError
from adacare.models.layers import (ConvBank, GruParams, SEParams, compressed_width,
                                   dilated_causal_conv_backward, gru_sequence,
                                   gru_sequence_backward, multi_scale_conv, se_backward,
                                   se_forward)
from adacare.models.params import ParamSet
from adacare.models.reports import RecalibrationTrace
from adacare.utils.numeric import Activation, sigmoid

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
GRU_GATES = ("W_z", "b_z", "W_r", "b_r", "W_h", "b_h")


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


def param_layout(config):
    """
    Names and shapes of every parameter, in canonical order.

    Returns:
        OrderedDict name -> (shape, (fan_in, fan_out)); biases carry None fans
    """
    n_r = config.require_features()
    n_c, n_h, L = config.conv_filters, config.hidden_units, config.kernel_size
    layout = OrderedDict()
    if config.use_conv:
        for rate in config.dilation_rates:
            layout[f"conv.k{rate}.weight"] = ((n_c, L, n_r), (L * n_r, L * n_c))
            layout[f"conv.k{rate}.bias"] = ((n_c,), None)
        width = config.conv_width
        m = compressed_width(width, config.compress_ratio)
        layout["se_conv.W"] = ((m, width), (width, m))
        layout["se_conv.U"] = ((width, m), (m, width))
    if config.use_raw_recal:
        m = compressed_width(n_r, config.compress_ratio)
        layout["se_raw.W"] = ((m, n_r), (n_r, m))
        layout["se_raw.U"] = ((n_r, m), (m, n_r))
    n_in = n_h + config.visit_width
    for gate in ("z", "r", "h"):
        layout[f"gru.W_{gate}"] = ((n_h, n_in), (n_in, n_h))
        layout[f"gru.b_{gate}"] = ((n_h,), None)
    layout["out.W_y"] = ((1, n_h), (n_h, 1))
    layout["out.b"] = ((1,), None)
    return layout


def init_params(config, seed):
    """
    Glorot-uniform weights, zero biases, drawn in canonical name order.

    Args:
        config: ModelConfig with n_features set
        seed: Integer seed; the same (config, seed) gives bit-identical parameters

    Returns:
        ParamSet
    """
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for name, (shape, fans) in param_layout(config).items():
        if fans is None:
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (fans[0] + fans[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    logger.debug(f"Initialized {params.size} parameters for variant {config.variant_name}")
    return params


def check_params(params, config):
    """Raise ShapeError unless ``params`` has exactly the layout ``config`` implies."""
    expected = OrderedDict((name, shape) for name, (shape, _) in param_layout(config).items())
    actual = params.shapes()
    if list(actual.items()) != list(expected.items()):
        missing = [n for n in expected if n not in actual]
        extra = [n for n in actual if n not in expected]
        wrong = [n for n in expected if n in actual and actual[n] != expected[n]]
        raise ShapeError(f"parameters do not match the model configuration "
                         f"(missing {missing}, unexpected {extra}, wrong shape {wrong})")


def conv_banks(params, config):
    return [ConvBank(params[f"conv.k{rate}.weight"], params[f"conv.k{rate}.bias"], rate)
            for rate in config.dilation_rates]


def conv_se(params, config):
    return SEParams(params["se_conv.W"], params["se_conv.U"], config.compress_ratio, Activation.SIGMOID)


def raw_se(params, config):
    return SEParams(params["se_raw.W"], params["se_raw.U"], config.compress_ratio,
                    Activation(config.raw_activation))


def gru_params(params):
    return GruParams(**{gate: params[f"gru.{gate}"] for gate in GRU_GATES})


def dropout_mask(seed, shape, rate):
    """Inverted-dropout multipliers: 0 with probability ``rate``, else 1 / (1 - rate)."""
    rng = np.random.default_rng(seed)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


@dataclass(frozen=True, eq=False)
class ForwardCache:
    """Intermediates kept for the backward pass."""
    raw_cache: object
    conv_cache: object
    gru_cache: object
    banks: list
    hidden_dropped: np.ndarray
    drop_mask: Optional[np.ndarray]


@dataclass(frozen=True, eq=False)
class ForwardOutput:
    predictions: np.ndarray     # (T,)
    hidden: np.ndarray          # (T, N_h), before dropout
    trace: RecalibrationTrace
    cache: ForwardCache


def forward(seq, params, config, mode=Mode.EVAL, seed=None):
    """
    Run the network over one patient.

    Args:
        seq: PatientSequence with imputed, normalized visits
        params: ParamSet matching ``config``
        config: ModelConfig
        mode: Mode.TRAIN applies seeded dropout to the hidden states; Mode.EVAL is deterministic
        seed: Dropout seed, required in train mode when dropout > 0

    Returns:
        ForwardOutput

    Raises:
        ShapeError: On a width mismatch or an overlong sequence
        DataError: If the visits still contain missing values
    """
    mode = Mode(mode)
    n_r = config.require_features()
    visits = seq.visits
    n_visits = visits.shape[0]
    if visits.shape[1] != n_r:
        raise ShapeError(f"patient {seq.patient_id}: {visits.shape[1]} features, model expects {n_r}")
    if n_visits > config.max_seq_len:
        raise ShapeError(f"patient {seq.patient_id}: {n_visits} visits exceeds max_seq_len {config.max_seq_len}")
    if np.isnan(visits).any():
        raise DataError(f"patient {seq.patient_id}: visits contain missing values; impute before the forward pass")

    # Scale-adaptive recalibration of the multi-scale conv features
    banks, conv_cache = [], None
    if config.use_conv:
        banks = conv_banks(params, config)
        conv_features = multi_scale_conv(visits, banks)
        conv_weights, conv_recal, conv_cache = se_forward(conv_features, conv_se(params, config))
    else:
        conv_weights = np.zeros((n_visits, 0))
        conv_recal = np.zeros((n_visits, 0))

    # Recalibrated skip connection of the raw visit
    raw_cache = None
    if config.use_raw_recal:
        raw_weights, raw_recal, raw_cache = se_forward(visits, raw_se(params, config))
    else:
        raw_weights = np.ones_like(visits)
        raw_recal = visits
    if not np.array_equal(raw_weights * visits, raw_recal):
        raise NumericError(f"patient {seq.patient_id}: raw recalibration trace does not reproduce the "
                           f"recalibrated visits")

    embedded = np.concatenate([raw_recal, conv_recal], axis=1)
    hidden, gru_cache = gru_sequence(embedded, gru_params(params))

    drop_mask = None
    hidden_dropped = hidden
    if mode is Mode.TRAIN and config.dropout > 0.0:
        if seed is None:
            raise ConfigError("a dropout seed is required in train mode", key="seed")
        drop_mask = dropout_mask(seed, hidden.shape, config.dropout)
        hidden_dropped = hidden * drop_mask

    predictions = sigmoid(hidden_dropped @ params["out.W_y"][0] + params["out.b"][0])

    trace = RecalibrationTrace(
        raw_weights=raw_weights,
        conv_weights=conv_weights,
        rate_labels=tuple(f"k{rate}" for rate in config.dilation_rates) if config.use_conv else (),
        block_width=config.conv_filters if config.use_conv else 0,
        patient_id=seq.patient_id,
        group=seq.group_tag,
    )
    cache = ForwardCache(raw_cache, conv_cache, gru_cache, banks, hidden_dropped, drop_mask)
    return ForwardOutput(predictions, hidden, trace, cache)


def _check_loss_inputs(preds, labels, mask):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if not (preds.shape == labels.shape == mask.shape) or preds.ndim != 1:
        raise ShapeError(f"bce_loss: preds {preds.shape}, labels {labels.shape} and mask {mask.shape} "
                         f"must be equal-length vectors")
    n_masked = mask.sum()
    if n_masked <= 0:
        raise DataError("bce_loss: mask selects no visits")
    return preds, labels, mask, n_masked


def bce_loss(preds, labels, mask):
    """Masked mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    preds, labels, mask, n_masked = _check_loss_inputs(preds, labels, mask)
    clamped = np.clip(preds, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_visit = -(labels * np.log(clamped) + (1.0 - labels) * np.log(1.0 - clamped))
    return math.fsum(per_visit * mask) / float(n_masked)


def bce_logit_grad(preds, labels, mask):
    """d bce_loss / d logit per visit; zero where the clamp is active."""
    preds, labels, mask, n_masked = _check_loss_inputs(preds, labels, mask)
    inside = (preds > PROB_CLAMP) & (preds < 1.0 - PROB_CLAMP)
    return np.where(inside, preds - labels, 0.0) * mask / n_masked


def backward(seq, labels, mask, params, config, dropout_seed=None):
    """
    Loss and exact gradients for one patient.

    Args:
        seq: PatientSequence
        labels: Per-visit targets (None uses ``seq.labels``)
        mask: Per-visit loss mask (None uses ``seq.mask``)
        params: ParamSet
        config: ModelConfig
        dropout_seed: Seed of the training dropout mask; None disables dropout

    Returns:
        (loss, gradient ParamSet aligned with ``params``)
    """
    labels = seq.labels if labels is None else labels
    mask = seq.mask if mask is None else mask
    mode = Mode.EVAL if dropout_seed is None else Mode.TRAIN
    out = forward(seq, params, config, mode=mode, seed=dropout_seed)
    cache = out.cache
    loss = bce_loss(out.predictions, labels, mask)

    grads = OrderedDict()
    g_logit = bce_logit_grad(out.predictions, labels, mask)
    W_y = params["out.W_y"]
    grad_hidden = np.outer(g_logit, W_y[0])
    if cache.drop_mask is not None:
        grad_hidden = grad_hidden * cache.drop_mask

    gru = gru_params(params)
    gru_grads, grad_embedded = gru_sequence_backward(gru, cache.gru_cache, grad_hidden)

    n_r = config.require_features()
    if config.use_conv:
        grad_W, grad_U, grad_conv = se_backward(conv_se(params, config), cache.conv_cache,
                                                grad_embedded[:, n_r:])
        n_c = config.conv_filters
        for b, bank in enumerate(cache.banks):
            grad_weight, grad_bias = dilated_causal_conv_backward(seq.visits, bank,
                                                                  grad_conv[:, b * n_c:(b + 1) * n_c])
            grads[f"conv.k{bank.rate}.weight"] = grad_weight
            grads[f"conv.k{bank.rate}.bias"] = grad_bias
        grads["se_conv.W"] = grad_W
        grads["se_conv.U"] = grad_U
    if config.use_raw_recal:
        grad_W, grad_U, _ = se_backward(raw_se(params, config), cache.raw_cache, grad_embedded[:, :n_r])
        grads["se_raw.W"] = grad_W
        grads["se_raw.U"] = grad_U
    for gate in GRU_GATES:
        grads[f"gru.{gate}"] = gru_grads[gate]
    grads["out.W_y"] = (g_logit @ cache.hidden_dropped)[None, :]
    grads["out.b"] = np.array([g_logit.sum()])

    grad_set = ParamSet(OrderedDict((name, grads[name]) for name in params.names()))
    return loss, grad_set


def predict(seq, params, config):
    """Eval-mode per-visit risk scores."""
    return forward(seq, params, config, mode=Mode.EVAL).predictions
