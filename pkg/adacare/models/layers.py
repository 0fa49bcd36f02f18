# adacare/models/layers.py
"""
Building blocks of the network: causal dilated convolution, multi-scale
concatenation, squeeze-and-excitation recalibration, and the GRU cell.

Each block has a forward function and, where the network trains through it,
a matching backward function returning parameter gradients. Sequence-level
functions operate on a whole (T x width) matrix at once; visit t of every
output depends only on visits <= t.
"""
from dataclasses import dataclass
import logging

import numpy as np

from adacare.errors import ShapeError
from adacare.utils.numeric import Activation, activate, as_float_array, sigmoid, sparsemax_vjp

logger = logging.getLogger(__name__)


def compressed_width(n, ratio):
    """Bottleneck width ceil(n / ratio)."""
    return -(-n // ratio)


# ---------------------------------------------------------------------------
# Dilated causal convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvBank:
    """N_c filters of shape (L x N_r) sharing one dilation rate."""
    weight: np.ndarray      # (N_c, L, N_r); tap l reads visit t - rate * l
    bias: np.ndarray        # (N_c,)
    rate: int

    def __post_init__(self):
        weight = as_float_array(self.weight, 3, "conv weight")
        bias = as_float_array(self.bias, 1, "conv bias")
        if self.rate < 1:
            raise ShapeError(f"dilation rate must be >= 1, got {self.rate}")
        if min(weight.shape) < 1:
            raise ShapeError(f"conv weight must have N_c, L, N_r >= 1, got shape {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv bias has shape {bias.shape}, expected ({weight.shape[0]},)")
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def n_filters(self):
        return self.weight.shape[0]

    @property
    def kernel_size(self):
        return self.weight.shape[1]

    @property
    def n_inputs(self):
        return self.weight.shape[2]

    @property
    def receptive_field(self):
        return self.rate * (self.kernel_size - 1) + 1


def lagged(series, lag):
    """Rows shifted down by ``lag`` with zero rows filling the top (causal padding)."""
    out = np.zeros_like(series)
    if lag < series.shape[0]:
        out[lag:] = series[:series.shape[0] - lag]
    return out


def _check_series(series, bank):
    series = as_float_array(series, 2, "series")
    if series.shape[0] < 1:
        raise ShapeError("series must contain at least one visit")
    if series.shape[1] != bank.n_inputs:
        raise ShapeError(f"series has shape {series.shape} but the bank expects {bank.n_inputs} "
                         f"features (weight shape {bank.weight.shape})")
    return series


def dilated_causal_conv(series, bank):
    """
    Causal dilated convolution of a (T x N_r) series.

    ``out[t, f] = bias_f + sum_l <weight[f, l], series[t - rate * l]>`` with
    visits before the first treated as zero.

    Returns:
        (T x N_c) feature maps
    """
    series = _check_series(series, bank)
    out = np.tile(bank.bias, (series.shape[0], 1))
    for tap in range(bank.kernel_size):
        out += lagged(series, bank.rate * tap) @ bank.weight[:, tap, :].T
    return out


def dilated_causal_conv_backward(series, bank, grad_out):
    """Gradients of the loss w.r.t. the bank's weight and bias."""
    grad_weight = np.zeros_like(bank.weight)
    for tap in range(bank.kernel_size):
        grad_weight[:, tap, :] = grad_out.T @ lagged(series, bank.rate * tap)
    return grad_weight, grad_out.sum(axis=0)


def multi_scale_conv(series, banks):
    """
    Run every bank over the series and concatenate per visit, bank order preserved.

    Returns:
        (T x K*N_c) matrix
    """
    if not banks:
        raise ShapeError("multi_scale_conv needs at least one bank")
    widths = {bank.n_filters for bank in banks}
    if len(widths) != 1:
        raise ShapeError(f"banks disagree on the number of filters: {sorted(widths)}")
    inputs = {bank.n_inputs for bank in banks}
    if len(inputs) != 1:
        raise ShapeError(f"banks disagree on the input width: {sorted(inputs)}")
    return np.concatenate([dilated_causal_conv(series, bank) for bank in banks], axis=1)


# ---------------------------------------------------------------------------
# Squeeze-and-excitation recalibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SEParams:
    """Compress matrix W (m x n), expand matrix U (n x m), m = ceil(n / ratio)."""
    W: np.ndarray
    U: np.ndarray
    ratio: int
    activation: Activation = Activation.SIGMOID

    def __post_init__(self):
        W = as_float_array(self.W, 2, "SE compress matrix")
        U = as_float_array(self.U, 2, "SE expand matrix")
        if self.ratio < 1:
            raise ShapeError(f"compress ratio must be >= 1, got {self.ratio}")
        n = W.shape[1]
        m = compressed_width(n, self.ratio)
        if W.shape != (m, n) or U.shape != (n, m):
            raise ShapeError(f"SE matrices W {W.shape} and U {U.shape} do not match width {n} "
                             f"at ratio {self.ratio} (expected W ({m}, {n}), U ({n}, {m}))")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def width(self):
        return self.W.shape[1]


@dataclass(frozen=True)
class SECache:
    inputs: np.ndarray       # (T, n)
    pre_relu: np.ndarray     # (T, m)
    hidden: np.ndarray       # (T, m)
    weights: np.ndarray      # (T, n)


def se_forward(rows, p):
    """
    Recalibrate every row of a (T x n) matrix.

    Returns:
        (weights, recalibrated rows, cache for se_backward)
    """
    rows = as_float_array(rows, 2, "SE input")
    if rows.shape[1] != p.width:
        raise ShapeError(f"SE input has shape {rows.shape} but the block expects width {p.width}")
    pre_relu = rows @ p.W.T
    hidden = np.maximum(pre_relu, 0.0)
    weights = activate(p.activation, hidden @ p.U.T)
    return weights, weights * rows, SECache(rows, pre_relu, hidden, weights)


def se_backward(p, cache, grad_recalibrated):
    """
    Backpropagate through ``x_tilde = act(U relu(W x)) * x``.

    Returns:
        (grad_W, grad_U, grad_inputs)
    """
    grad_weights = grad_recalibrated * cache.inputs
    grad_inputs = grad_recalibrated * cache.weights
    if p.activation is Activation.SPARSEMAX:
        grad_logits = sparsemax_vjp(cache.weights, grad_weights)
    else:
        grad_logits = grad_weights * cache.weights * (1.0 - cache.weights)
    grad_U = grad_logits.T @ cache.hidden
    grad_hidden = grad_logits @ p.U
    grad_pre = grad_hidden * (cache.pre_relu > 0.0)
    grad_W = grad_pre.T @ cache.inputs
    grad_inputs = grad_inputs + grad_pre @ p.W
    return grad_W, grad_U, grad_inputs


def se_recalibrate(x, p):
    """
    Recalibrate one vector: ``u = act(U relu(W x))``, ``x_tilde = u * x``.

    Returns:
        (u, x_tilde)
    """
    x = as_float_array(x, 1, "x")
    weights, recalibrated, _ = se_forward(x[None, :], p)
    return weights[0], recalibrated[0]


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GruParams:
    """
    Gate matrices act on [h_{t-1}; v_t]:
    z = sig(W_z [h; v] + b_z), r = sig(W_r [h; v] + b_r),
    n = tanh(W_h [r * h; v] + b_h), h' = (1 - z) * h + z * n.
    """
    W_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    b_r: np.ndarray
    W_h: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        shape = None
        for gate in ("z", "r", "h"):
            W = as_float_array(getattr(self, f"W_{gate}"), 2, f"W_{gate}")
            b = as_float_array(getattr(self, f"b_{gate}"), 1, f"b_{gate}")
            if shape is None:
                shape = W.shape
            if W.shape != shape:
                raise ShapeError(f"GRU gate W_{gate} has shape {W.shape}, expected {shape}")
            if W.shape[1] <= W.shape[0]:
                raise ShapeError(f"GRU gate W_{gate} has shape {W.shape}; expected N_h x (N_h + input width)")
            if b.shape != (W.shape[0],):
                raise ShapeError(f"GRU bias b_{gate} has shape {b.shape}, expected ({W.shape[0]},)")
            object.__setattr__(self, f"W_{gate}", W)
            object.__setattr__(self, f"b_{gate}", b)

    @property
    def hidden_units(self):
        return self.W_z.shape[0]

    @property
    def input_width(self):
        return self.W_z.shape[1] - self.W_z.shape[0]


def gru_step(h_prev, v, p):
    """One GRU recurrence step; returns the new hidden state."""
    h_prev = as_float_array(h_prev, 1, "h_prev")
    v = as_float_array(v, 1, "v")
    if h_prev.shape[0] != p.hidden_units or v.shape[0] != p.input_width:
        raise ShapeError(f"gru_step: h_prev {h_prev.shape} and v {v.shape} do not match "
                         f"gate shape {p.W_z.shape}")
    hv = np.concatenate([h_prev, v])
    z = sigmoid(p.W_z @ hv + p.b_z)
    r = sigmoid(p.W_r @ hv + p.b_r)
    n = np.tanh(p.W_h @ np.concatenate([r * h_prev, v]) + p.b_h)
    return (1.0 - z) * h_prev + z * n


@dataclass(frozen=True)
class GruCache:
    inputs: np.ndarray      # (T, input width)
    states: np.ndarray      # (T + 1, N_h); row 0 is h_0
    update: np.ndarray      # (T, N_h)
    reset: np.ndarray       # (T, N_h)
    candidate: np.ndarray   # (T, N_h)


def gru_sequence(inputs, p, h0=None):
    """
    Unroll the GRU over a (T x input width) matrix.

    Returns:
        (hidden states (T x N_h), cache for gru_sequence_backward)
    """
    inputs = as_float_array(inputs, 2, "GRU inputs")
    n_h = p.hidden_units
    if inputs.shape[1] != p.input_width:
        raise ShapeError(f"GRU inputs have shape {inputs.shape}, gates expect width {p.input_width}")
    n_steps = inputs.shape[0]
    states = np.zeros((n_steps + 1, n_h))
    if h0 is not None:
        states[0] = h0
    # Input contributions do not depend on the recurrence
    x_z = inputs @ p.W_z[:, n_h:].T + p.b_z
    x_r = inputs @ p.W_r[:, n_h:].T + p.b_r
    x_h = inputs @ p.W_h[:, n_h:].T + p.b_h
    U_z, U_r, U_h = p.W_z[:, :n_h], p.W_r[:, :n_h], p.W_h[:, :n_h]
    update = np.empty((n_steps, n_h))
    reset = np.empty((n_steps, n_h))
    candidate = np.empty((n_steps, n_h))
    for t in range(n_steps):
        h_prev = states[t]
        z = sigmoid(x_z[t] + U_z @ h_prev)
        r = sigmoid(x_r[t] + U_r @ h_prev)
        n = np.tanh(x_h[t] + U_h @ (r * h_prev))
        states[t + 1] = (1.0 - z) * h_prev + z * n
        update[t], reset[t], candidate[t] = z, r, n
    return states[1:].copy(), GruCache(inputs, states, update, reset, candidate)


def gru_sequence_backward(p, cache, grad_states):
    """
    Backpropagation through time.

    Args:
        p: GruParams used in the forward pass
        cache: GruCache from gru_sequence
        grad_states: (T x N_h) gradient of the loss w.r.t. every h_t

    Returns:
        (dict of gate gradients keyed W_z, b_z, W_r, b_r, W_h, b_h; gradient w.r.t. inputs)
    """
    n_h = p.hidden_units
    n_steps = cache.inputs.shape[0]
    U_z, U_r, U_h = p.W_z[:, :n_h], p.W_r[:, :n_h], p.W_h[:, :n_h]
    prev_states = cache.states[:-1]
    d_update = np.empty((n_steps, n_h))
    d_reset = np.empty((n_steps, n_h))
    d_cand = np.empty((n_steps, n_h))
    carry = np.zeros(n_h)
    for t in range(n_steps - 1, -1, -1):
        grad_h = grad_states[t] + carry
        h_prev = prev_states[t]
        z, r, n = cache.update[t], cache.reset[t], cache.candidate[t]
        grad_prev = grad_h * (1.0 - z)
        a_h = grad_h * z * (1.0 - n * n)
        grad_reset_h = U_h.T @ a_h
        grad_prev += grad_reset_h * r
        a_r = grad_reset_h * h_prev * r * (1.0 - r)
        a_z = grad_h * (n - h_prev) * z * (1.0 - z)
        grad_prev += U_z.T @ a_z + U_r.T @ a_r
        d_update[t], d_reset[t], d_cand[t] = a_z, a_r, a_h
        carry = grad_prev

    hv = np.concatenate([prev_states, cache.inputs], axis=1)
    rhv = np.concatenate([cache.reset * prev_states, cache.inputs], axis=1)
    grads = {
        "W_z": d_update.T @ hv, "b_z": d_update.sum(axis=0),
        "W_r": d_reset.T @ hv, "b_r": d_reset.sum(axis=0),
        "W_h": d_cand.T @ rhv, "b_h": d_cand.sum(axis=0),
    }
    grad_inputs = d_update @ p.W_z[:, n_h:] + d_reset @ p.W_r[:, n_h:] + d_cand @ p.W_h[:, n_h:]
    return grads, grad_inputs
