"""Compiled kernels against the numpy reference."""
import numpy as np
import pytest

from ulda import kernels
from ulda.kernels import _reference as ref

try:
    from ulda.kernels import _fast
except ImportError:  # extension not built
    _fast = None

needs_fast = pytest.mark.skipif(_fast is None, reason="compiled extension not built")
SHAPES = [(2, 3, 5, 7), (1, 1, 4, 4), (3, 2, 6, 3), (2, 4, 1, 2)]


def _x(shape, dtype, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


@needs_fast
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", SHAPES)
def test_im2col_col2im_bit_identical(shape, dtype):
    x = _x(shape, dtype)
    cols = ref.im2col3x3(x)
    assert np.array_equal(_fast.im2col3x3(x), cols)
    g = _x(cols.shape, dtype, 1)
    assert np.array_equal(_fast.col2im3x3(g, shape), ref.col2im3x3(g, shape))


def test_col2im_is_adjoint_of_im2col():
    x = _x((2, 3, 5, 4), np.float64)
    cols = kernels.im2col3x3(x)
    g = _x(cols.shape, np.float64, 3)
    lhs = (cols * g).sum()
    rhs = (x * kernels.col2im3x3(g, x.shape)).sum()
    assert abs(lhs - rhs) < 1e-10


@needs_fast
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(2, 3, 5, 7), (1, 2, 4, 4), (2, 2, 2, 3)])
def test_maxpool_bit_identical_with_ties(shape, dtype):
    x = np.maximum(_x(shape, dtype), 0)  # plenty of tied zeros
    y_f, a_f = _fast.maxpool2x2(x)
    y_r, a_r = ref.maxpool2x2(x)
    assert np.array_equal(y_f, y_r) and np.array_equal(a_f, a_r)
    g = _x(y_r.shape, dtype, 2)
    assert np.array_equal(_fast.maxpool2x2_backward(g, a_f, shape), ref.maxpool2x2_backward(g, a_r, shape))


@needs_fast
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_kernels_agree(training):
    x = _x((4, 3, 5, 5), np.float64) * 3 + 1
    gamma = np.array([0.5, 1.0, 2.0])
    beta = np.array([0.1, -0.2, 0.0])
    m_f, v_f = _fast.channel_stats(x)
    m_r, v_r = ref.channel_stats(x)
    np.testing.assert_allclose(m_f, m_r, rtol=1e-12)
    np.testing.assert_allclose(v_f, v_r, rtol=1e-12)
    inv = 1 / np.sqrt(v_r + 1e-5)
    np.testing.assert_allclose(_fast.bn_apply(x, m_r, inv, gamma, beta), ref.bn_apply(x, m_r, inv, gamma, beta), rtol=1e-12)
    g = _x(x.shape, np.float64, 5)
    for a, b in zip(_fast.bn_backward(g, x, m_r, inv, gamma, training), ref.bn_backward(g, x, m_r, inv, gamma, training)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_backend_flag():
    assert kernels.BACKEND in ("compiled", "python")
