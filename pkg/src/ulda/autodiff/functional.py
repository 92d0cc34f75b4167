"""Differentiable ops.

Every op takes and returns :class:`Tensor` objects, validates shapes,
rejects non-finite input, and records a backward rule on the active tape
when any input requires a gradient.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import NonFiniteError, ShapeError, Tensor, active_tape


def _check_finite(op, *arrays):
    for a in arrays:
        # one reduction is much cheaper than isfinite(); confirm before raising
        if not np.isfinite(a.sum()) and not np.isfinite(a).all():
            raise NonFiniteError(f"{op}: input contains NaN or Inf")


def _shape_error(op, a, b, what="incompatible shapes"):
    return ShapeError(f"{op}: {what} {tuple(a)} and {tuple(b)}")


def _record(inputs, out, backward):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, out, backward)
    return out


def _wrap(data, like):
    return Tensor(data, dtype=like.dtype)


# --- elementwise ---------------------------------------------------------

def relu(x):
    _check_finite("relu", x.data)
    out = _wrap(np.maximum(x.data, 0), x)
    return _record((x,), out, lambda g: (g * (out.data > 0),))


def add(a, b):
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    _check_finite("add", a.data, b.data)
    out = _wrap(a.data + b.data, a)
    return _record((a, b), out, lambda g: (g, g))


def sub(a, b):
    if a.shape != b.shape:
        raise _shape_error("sub", a.shape, b.shape)
    _check_finite("sub", a.data, b.data)
    out = _wrap(a.data - b.data, a)
    return _record((a, b), out, lambda g: (g, -g))


def mul(a, b):
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    _check_finite("mul", a.data, b.data)
    out = _wrap(a.data * b.data, a)
    return _record((a, b), out, lambda g: (g * b.data, g * a.data))


def scale(x, c):
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError("scale: factor is not finite")
    _check_finite("scale", x.data)
    out = _wrap(x.data * x.dtype.type(c), x)
    return _record((x,), out, lambda g: (g * g.dtype.type(c),))


def sum(x):
    _check_finite("sum", x.data)
    out = _wrap(np.sum(x.data).reshape(1), x)
    return _record((x,), out, lambda g: (np.full_like(x.data, g[0]),))


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    shape = x.shape
    out = _wrap(x.data.reshape(shape[0], -1), x)
    return _record((x,), out, lambda g: (g.reshape(shape),))


def take_rows(x, index):
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError(f"take_rows: index out of range for leading dim {x.shape[0]}")
    out = _wrap(x.data[index], x)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record((x,), out, backward)


# --- layers --------------------------------------------------------------

def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight laid out (out_features, in_features)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise _shape_error("linear", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise _shape_error("linear", bias.shape, weight.shape, "bias does not match weight")
    _check_finite("linear", x.data)
    y = x.data @ weight.data.T
    if bias is not None:
        y += bias.data
    out = _wrap(y, x)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return _record(inputs, out, backward)


def conv2d(x, weight):
    """3x3 convolution, stride 1, zero padding 1, NCHW input, OIHW kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise _shape_error("conv2d", x.shape, weight.shape, "expected NCHW input and OIHW kernel, got")
    o, c, kh, kw = weight.shape
    if (kh, kw) != (3, 3) or x.shape[1] != c:
        raise _shape_error("conv2d", x.shape, weight.shape)
    _check_finite("conv2d", x.data)
    n, _, h, w = x.shape
    cols = kernels.im2col3x3(x.data)  # (n, c*9, h*w)
    wmat = weight.data.reshape(o, c * 9)
    out = _wrap(np.matmul(wmat, cols).reshape(n, o, h, w), x)

    def backward(g):
        g3 = g.reshape(n, o, h * w)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = kernels.col2im3x3(np.matmul(wmat.T, g3), x.shape) if x.requires_grad else None
        return gx, gw

    return _record((x, weight), out, backward)


def maxpool2x2(x):
    """2x2 max pool, stride 2; odd trailing rows/columns are dropped."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2: expected NCHW input, got {x.shape}")
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2x2: spatial size {x.shape[2:]} is smaller than the 2x2 window")
    _check_finite("maxpool2x2", x.data)
    y, arg = kernels.maxpool2x2(x.data)
    out = _wrap(y, x)
    shape = x.shape
    return _record((x,), out, lambda g: (kernels.maxpool2x2_backward(np.ascontiguousarray(g), arg, shape),))


class BatchNormState:
    """Running statistics for one batchnorm layer."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x, gamma, beta, state, training=True):
    """Per-channel normalisation over N*H*W.

    Training mode normalises with batch statistics and updates the running
    averages in ``state`` (unbiased variance, like torch); evaluation mode
    uses the running averages and leaves ``state`` untouched.
    """
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise _shape_error("batchnorm2d", x.shape, gamma.shape)
    _check_finite("batchnorm2d", x.data)
    c = x.shape[1]
    if training:
        count = x.data.size // c
        if count < 2:
            raise ShapeError(f"batchnorm2d: training mode needs more than one value per channel, got {x.shape}")
        mean, var = kernels.channel_stats(x.data)
        m = state.momentum
        state.running_mean[:] = (1 - m) * state.running_mean + m * mean
        state.running_var[:] = (1 - m) * state.running_var + m * var * (count / (count - 1))
    else:
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    out = _wrap(kernels.bn_apply(x.data, mean, inv_std, gamma.data, beta.data), x)

    def backward(g):
        return kernels.bn_backward(np.ascontiguousarray(g), x.data, mean, inv_std, gamma.data, training)

    return _record((x, gamma, beta), out, backward)


# --- losses and metric-space ops ----------------------------------------

def log_softmax_np(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(op, labels, rows, classes):
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (rows,):
        raise ShapeError(f"{op}: labels shape {labels.shape} does not match batch of {rows}")
    if rows and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"{op}: labels must lie in [0, {classes})")
    return labels


def softmax_cross_entropy(logits, labels):
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (batch, classes) logits, got {logits.shape}")
    b, k = logits.shape
    if b == 0:
        raise ShapeError("softmax_cross_entropy: empty batch")
    labels = _check_labels("softmax_cross_entropy", labels, b, k)
    _check_finite("softmax_cross_entropy", logits.data)
    logp = log_softmax_np(logits.data)
    rows = np.arange(b)
    out = _wrap(np.array([-logp[rows, labels].mean()]), logits)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g[0] / b),)

    return _record((logits,), out, backward)


def sq_distances(a, b):
    """Squared Euclidean distances between rows: out[i, j] = |a_i - b_j|^2."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise _shape_error("sq_distances", a.shape, b.shape)
    _check_finite("sq_distances", a.data, b.data)
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = _wrap((diff * diff).sum(axis=2), a)

    def backward(g):
        w = 2 * g[:, :, None] * diff
        return w.sum(axis=1), -w.sum(axis=0)

    return _record((a, b), out, backward)


def class_means(x, labels, n_classes):
    """Row ``i`` of the result is the mean of the rows of ``x`` labelled ``i``."""
    if x.data.ndim != 2:
        raise ShapeError(f"class_means: expected (items, dim) input, got {x.shape}")
    labels = _check_labels("class_means", labels, x.shape[0], n_classes)
    counts = np.bincount(labels, minlength=n_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValueError(f"class_means: class {int(missing[0])} has no members")
    _check_finite("class_means", x.data)
    avg = np.zeros((n_classes, x.shape[0]), dtype=x.dtype)
    avg[labels, np.arange(x.shape[0])] = 1.0
    avg /= counts[:, None].astype(x.dtype)
    out = _wrap(avg @ x.data, x)
    return _record((x,), out, lambda g: (avg.T @ g,))


def distance_ratio_nll(dists, labels):
    """Mean of ``-log(d[y] / sum_j d[j])`` over rows of a distance matrix.

    This is the distance-normalised score taken literally (larger distance
    means larger score); kept for ablation against the softmax rule.
    """
    if dists.data.ndim != 2:
        raise ShapeError(f"distance_ratio_nll: expected (queries, classes), got {dists.shape}")
    b, k = dists.shape
    labels = _check_labels("distance_ratio_nll", labels, b, k)
    _check_finite("distance_ratio_nll", dists.data)
    rows = np.arange(b)
    total = dists.data.sum(axis=1)
    true = dists.data[rows, labels]
    with np.errstate(divide="ignore"):
        value = -(np.log(true) - np.log(total)).mean()
    out = _wrap(np.array([value]), dists)

    def backward(g):
        grad = np.repeat((1.0 / total)[:, None], k, axis=1)
        grad[rows, labels] -= 1.0 / true
        return (grad * (g[0] / b),)

    return _record((dists,), out, backward)
