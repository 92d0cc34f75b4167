"""Pure-numpy versions of the backbone's hot kernels.

The compiled module implements the same contracts. Gather/scatter kernels
match bit for bit; the batchnorm reductions agree to rounding.

Layouts: ``im2col3x3`` produces per-image patch matrices shaped
(N, C*9, H*W) with row index ``c*9 + di*3 + dj`` so that a batched
``weight(O, C*9) @ cols`` lands directly in NCHW order.
"""
import numpy as np


def im2col3x3(x):
    """Unfold an NCHW batch into (N, C*9, H*W) patches, zero padding 1."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, w), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, di * 3 + dj] = xp[:, :, di:di + h, dj:dj + w]
    return cols.reshape(n, c * 9, h * w)


def col2im3x3(cols, shape):
    """Adjoint of :func:`im2col3x3`: scatter-add patches back to NCHW."""
    n, c, h, w = shape
    g = cols.reshape(n, c, 9, h, w)
    out = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for di in range(3):
        for dj in range(3):
            out[:, :, di:di + h, dj:dj + w] += g[:, :, di * 3 + dj]
    return np.ascontiguousarray(out[:, :, 1:h + 1, 1:w + 1])


def maxpool2x2(x):
    """2x2/stride-2 max pool with floor semantics.

    Returns the pooled array and, per output cell, the index 0..3 of the
    winning element inside its window (first maximum wins ties).
    """
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2x2_backward(grad, arg, shape):
    n, c, h, w = shape
    h2, w2 = grad.shape[2], grad.shape[3]
    onehot = (arg[..., None] == np.arange(4, dtype=np.int8)).astype(grad.dtype)
    g = (onehot * grad[..., None]).reshape(n, c, h2, w2, 2, 2)
    g = g.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    out = np.zeros(shape, dtype=grad.dtype)
    out[:, :, :2 * h2, :2 * w2] = g
    return out


def channel_stats(x):
    """Per-channel mean and biased variance over N, H, W (float64)."""
    x64 = x.astype(np.float64, copy=False)
    mean = x64.mean(axis=(0, 2, 3))
    var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def bn_apply(x, mean, inv_std, gamma, beta):
    """``(x - mean) * inv_std * gamma + beta`` per channel."""
    scale = (inv_std * gamma).astype(x.dtype)
    shift = (beta - mean * inv_std * gamma).astype(x.dtype)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def bn_backward(g, x, mean, inv_std, gamma, training):
    """Gradients (dx, dgamma, dbeta) of :func:`bn_apply`.

    With ``training`` the mean and inverse std are treated as functions
    of ``x`` (batch statistics); otherwise as constants.
    """
    c = x.shape[1]
    count = x.size // c
    m = mean[None, :, None, None]
    s = inv_std[None, :, None, None]
    xhat = (x.astype(np.float64) - m) * s
    g64 = g.astype(np.float64)
    sg = g64.sum(axis=(0, 2, 3))
    sgx = (g64 * xhat).sum(axis=(0, 2, 3))
    gam = gamma.astype(np.float64)[None, :, None, None]
    if training:
        gx = gam * s / count * (count * g64 - sg[None, :, None, None] - xhat * sgx[None, :, None, None])
    else:
        gx = g64 * gam * s
    return gx.astype(x.dtype), sgx.astype(x.dtype), sg.astype(x.dtype)
