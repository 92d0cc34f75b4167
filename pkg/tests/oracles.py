"""Independent reference computations used by the tests.

Nothing here imports the engine's backward rules; gradients come from
central finite differences of plain forward evaluations.
"""
import numpy as np


def numeric_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b):
    """Norm-wise relative error, safe when both are zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def conv3x3_direct(x, w):
    """Direct loop convolution, stride 1, zero padding 1."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, o, h, wd))
    for i in range(3):
        for j in range(3):
            out += np.einsum("nchw,oc->nohw", xp[:, :, i:i + h, j:j + wd], w[:, :, i, j])
    return out


def mean_by_class(x, labels, n):
    """Elementwise sum then divide, one class at a time."""
    out = np.zeros((n, x.shape[1]))
    for k in range(n):
        total = np.zeros(x.shape[1])
        count = 0
        for row, lab in zip(x, labels):
            if lab == k:
                total = total + row
                count += 1
        out[k] = total / count
    return out
