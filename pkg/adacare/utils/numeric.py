# adacare/utils/numeric.py
"""Dense float64 primitives shared by the layers, the network and the tests.

Vectors are 1-D ``numpy`` arrays, matrices are 2-D; nothing here broadcasts
implicitly. Every function is pure.
"""
from enum import Enum
import logging

import numpy as np
from scipy.special import expit

from adacare.errors import NumericError, ShapeError

logger = logging.getLogger(__name__)


class Activation(Enum):
    SIGMOID = "sigmoid"
    RELU = "relu"
    TANH = "tanh"
    SPARSEMAX = "sparsemax"


def as_float_array(values, ndim=None, name="array"):
    """Return ``values`` as a float64 array, checking its rank when ``ndim`` is given."""
    arr = np.asarray(values, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    return arr


def affine(W, x, b=None):
    """
    Compute ``W @ x (+ b)``.

    Args:
        W: Matrix of shape (rows, cols)
        x: Vector of length cols
        b: Optional vector of length rows

    Returns:
        Vector of length rows

    Raises:
        ShapeError: If the shapes are inconsistent
    """
    W = as_float_array(W, 2, "W")
    x = as_float_array(x, 1, "x")
    if W.shape[1] != x.shape[0]:
        raise ShapeError(f"affine: W has shape {W.shape} but x has shape {x.shape}")
    out = W @ x
    if b is not None:
        b = as_float_array(b, 1, "b")
        if b.shape[0] != W.shape[0]:
            raise ShapeError(f"affine: W has shape {W.shape} but b has shape {b.shape}")
        out = out + b
    return out


def _reject_nan(x, where):
    if np.isnan(x).any():
        raise NumericError(f"{where}: input contains NaN")


def sigmoid(x):
    """Numerically stable logistic function."""
    return expit(x)


def relu(x):
    return np.maximum(x, 0.0)


def activate(kind, x):
    """
    Apply an element-wise activation.

    Args:
        kind: Activation (or its string value); sparsemax works row-wise
        x: Array of any shape

    Returns:
        Array of the same shape

    Raises:
        NumericError: If ``x`` contains NaN
    """
    kind = Activation(kind)
    x = as_float_array(x)
    _reject_nan(x, f"activate({kind.value})")
    if kind is Activation.SIGMOID:
        return sigmoid(x)
    if kind is Activation.RELU:
        return relu(x)
    if kind is Activation.TANH:
        return np.tanh(x)
    return sparsemax(x)


def sparsemax(z):
    """
    Euclidean projection onto the probability simplex.

    Sort-based: sort descending, keep the largest k with
    ``k * z_(k) > cumsum_k - 1``, threshold at ``tau = (cumsum_k - 1) / k``.
    A 2-D input is projected row by row.

    Raises:
        NumericError: On empty or non-finite input
    """
    z = as_float_array(z)
    if z.ndim not in (1, 2):
        raise ShapeError(f"sparsemax expects a vector or a matrix, got shape {z.shape}")
    if z.shape[-1] == 0:
        raise NumericError("sparsemax of an empty vector")
    if not np.isfinite(z).all():
        raise NumericError("sparsemax input must be finite")

    rows = np.atleast_2d(z)
    z_sorted = -np.sort(-rows, axis=1)
    cumsum = np.cumsum(z_sorted, axis=1)
    k = np.arange(1, rows.shape[1] + 1, dtype=np.float64)
    in_support = k * z_sorted > cumsum - 1.0
    # The support condition holds on a prefix of the sorted order
    k_max = in_support.sum(axis=1)
    tau = (cumsum[np.arange(rows.shape[0]), k_max - 1] - 1.0) / k_max
    out = np.maximum(rows - tau[:, None], 0.0)
    return out[0] if z.ndim == 1 else out


def sparsemax_vjp(output, grad_output):
    """
    Vector-Jacobian product of sparsemax at a point where it returned ``output``.

    The generalized Jacobian is ``diag(s) - s s^T / |S|`` with ``s`` the support
    indicator, so the incoming gradient is centred over the support and zeroed
    elsewhere. Works row-wise on 2-D inputs.
    """
    output = np.atleast_2d(output)
    grad = np.atleast_2d(grad_output)
    support = output > 0.0
    n_support = support.sum(axis=1, keepdims=True)
    mean = (grad * support).sum(axis=1, keepdims=True) / n_support
    out = np.where(support, grad - mean, 0.0)
    return out[0] if np.ndim(grad_output) == 1 else out


def finite_diff_grad(f, x, eps=1e-5):
    """
    Central-difference gradient of a scalar function.

    Args:
        f: Callable mapping a float64 vector to a scalar
        x: Point of evaluation
        eps: Step size, must be positive

    Returns:
        Vector of ``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)``

    Raises:
        NumericError: If ``f`` is non-finite at a sampled point (names the coordinate)
    """
    if not eps > 0:
        raise NumericError(f"finite_diff_grad: eps must be positive, got {eps}")
    x = as_float_array(x, 1, "x").copy()
    grad = np.zeros_like(x)
    for i in range(x.shape[0]):
        original = x[i]
        x[i] = original + eps
        f_plus = float(f(x))
        x[i] = original - eps
        f_minus = float(f(x))
        x[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"finite_diff_grad: non-finite function value at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad
