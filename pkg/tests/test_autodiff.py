import math
import zlib

import numpy as np
import pytest

from ulda.autodiff import (
    NonFiniteError,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    backward,
    forward_op,
)
from ulda.autodiff import functional as F
from ulda.autodiff.functional import BatchNormState

from oracles import conv3x3_direct, numeric_grad, rel_error

TRIALS = 50


def _projected(out, proj):
    return F.sum(F.mul(out, Tensor(proj, dtype=np.float64)))


# Each case builds float64 inputs for one op and returns (arrays, forward),
# where forward(tensors) -> output Tensor.
def _case_relu(rng):
    x = rng.standard_normal((3, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    return [x], lambda t: F.relu(t[0])


def _case_add(rng):
    return [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))], lambda t: F.add(t[0], t[1])


def _case_sub(rng):
    return [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))], lambda t: F.sub(t[0], t[1])


def _case_mul(rng):
    return [rng.standard_normal((4,)), rng.standard_normal((4,))], lambda t: F.mul(t[0], t[1])


def _case_scale(rng):
    c = float(rng.uniform(-3, 3))
    return [rng.standard_normal((2, 2))], lambda t: F.scale(t[0], c)


def _case_sum(rng):
    return [rng.standard_normal((3, 2))], lambda t: F.sum(t[0])


def _case_flatten(rng):
    return [rng.standard_normal((2, 2, 2, 3))], lambda t: F.flatten(t[0])


def _case_take_rows(rng):
    idx = rng.integers(0, 4, size=5)
    return [rng.standard_normal((4, 3))], lambda t: F.take_rows(t[0], idx)


def _case_linear(rng):
    arrays = [rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal(2)]
    return arrays, lambda t: F.linear(t[0], t[1], t[2])


def _case_conv2d(rng):
    return [rng.standard_normal((2, 2, 4, 5)), rng.standard_normal((3, 2, 3, 3))], lambda t: F.conv2d(t[0], t[1])


def _case_maxpool(rng):
    # distinct values so the argmax is stable under the perturbation
    x = rng.permutation(2 * 2 * 5 * 4).reshape(2, 2, 5, 4) * 0.01 + rng.uniform(0, 1e-3)
    return [x], lambda t: F.maxpool2x2(t[0])


def _case_batchnorm_train(rng):
    state = BatchNormState(3, dtype=np.float64)
    arrays = [rng.standard_normal((2, 3, 3, 3)), rng.uniform(0.5, 2, 3), rng.standard_normal(3)]
    return arrays, lambda t: F.batchnorm2d(t[0], t[1], t[2], state, training=True)


def _case_batchnorm_eval(rng):
    state = BatchNormState(3, dtype=np.float64)
    state.running_mean[:] = rng.standard_normal(3)
    state.running_var[:] = rng.uniform(0.5, 2, 3)
    arrays = [rng.standard_normal((2, 3, 2, 2)), rng.uniform(0.5, 2, 3), rng.standard_normal(3)]
    return arrays, lambda t: F.batchnorm2d(t[0], t[1], t[2], state, training=False)


def _case_softmax_ce(rng):
    labels = rng.integers(0, 4, size=3)
    return [rng.standard_normal((3, 4)) * 2], lambda t: F.softmax_cross_entropy(t[0], labels)


def _case_sq_distances(rng):
    return [rng.standard_normal((4, 3)), rng.standard_normal((2, 3))], lambda t: F.sq_distances(t[0], t[1])


def _case_class_means(rng):
    labels = np.concatenate([np.arange(3), rng.integers(0, 3, size=3)])
    return [rng.standard_normal((6, 2))], lambda t: F.class_means(t[0], labels, 3)


def _case_distance_ratio(rng):
    labels = rng.integers(0, 3, size=4)
    return [rng.uniform(0.5, 3.0, (4, 3))], lambda t: F.distance_ratio_nll(t[0], labels)


CASES = {
    name[len("_case_"):]: fn for name, fn in globals().items() if name.startswith("_case_")
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(TRIALS):
        arrays, fwd = CASES[name](rng)
        probe = fwd([Tensor(a, dtype=np.float64) for a in arrays])
        proj = rng.standard_normal(probe.shape)

        leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        with Tape():
            loss = _projected(fwd(leaves), proj)
        backward(loss)

        for leaf, arr in zip(leaves, arrays):
            def f():
                return _projected(fwd([Tensor(a, dtype=np.float64) for a in arrays]), proj).item()
            num = numeric_grad(f, arr, eps=1e-6)
            worst = max(worst, rel_error(leaf.grad, num))
    assert worst <= 1e-6, f"{name}: worst relative error {worst:.2e}"


def test_relu_values():
    out = forward_op("relu", Tensor([-1.0, 0.0, 2.0]))
    assert out.data.tolist() == [0.0, 0.0, 2.0]


def test_uniform_logits_cross_entropy_is_log_n():
    loss = F.softmax_cross_entropy(Tensor(np.zeros((1, 5)), dtype=np.float64), [3])
    assert loss.item() == pytest.approx(math.log(5), abs=1e-12)
    assert loss.item() == pytest.approx(1.60944, abs=1e-5)


def test_conv_all_ones_center_is_nine():
    out = F.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data[0, 0, 2, 2] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0  # corner sees the zero padding


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    got = F.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64)).data
    np.testing.assert_allclose(got, conv3x3_direct(x, w), rtol=1e-12, atol=1e-12)


def test_maxpool_floor_behaviour():
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
    out = F.maxpool2x2(Tensor(x, dtype=np.float64)).data
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0].tolist() == [[6.0, 8.0], [16.0, 18.0]]


def test_backward_square():
    w = Parameter([3.0], dtype=np.float64)
    with Tape():
        loss = F.sum(F.mul(w, w))
    backward(loss)
    assert w.grad.tolist() == [6.0]


def test_backward_inactive_relu():
    w = Parameter([-1.0])
    with Tape():
        loss = F.sum(F.relu(w))
    backward(loss)
    assert w.grad.tolist() == [0.0]


def test_backward_rejects_non_scalar_and_untaped():
    w = Parameter(np.ones(3))
    with Tape():
        y = F.relu(w)
    with pytest.raises(ValueError, match="scalar"):
        backward(y)
    with pytest.raises(ValueError, match="tape"):
        backward(F.sum(Tensor(np.ones(3))))


def test_tape_visits_each_node_once():
    w = Parameter(np.array([1.0, 2.0]), dtype=np.float64)
    with Tape() as tape:
        a = F.scale(w, 2.0)
        b = F.add(a, a)  # a feeds one node twice
        loss = F.sum(b)
    assert len(tape) == 3
    backward(loss)
    assert w.grad.tolist() == [4.0, 4.0]


def test_no_recording_outside_tape():
    w = Parameter(np.ones(2))
    y = F.relu(w)
    assert y._tape is None


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError) as err:
        F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    msg = str(err.value)
    assert "add" in msg and "(2, 3)" in msg and "(3, 2)" in msg
    with pytest.raises(ShapeError, match="conv2d"):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError, match="relu"):
        F.relu(Tensor([1.0, np.nan]))
    with pytest.raises(NonFiniteError):
        F.linear(Tensor([[np.inf, 0.0]]), Tensor(np.ones((1, 2))))


def test_unknown_op_kind():
    with pytest.raises(ValueError, match="unknown op"):
        forward_op("softmax", Tensor([1.0]))


def test_linearity_of_backward():
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((4, 2, 6, 6)), dtype=np.float64)
    w0 = rng.standard_normal((3, 2, 3, 3))
    r1, r2 = rng.standard_normal((4, 3, 6, 6)), rng.standard_normal((4, 3, 6, 6))

    def grads(c1, c2):
        w = Parameter(w0.copy(), dtype=np.float64)
        with Tape():
            y = F.relu(F.conv2d(x, w))
            l1 = F.sum(F.mul(y, Tensor(r1, dtype=np.float64)))
            l2 = F.sum(F.mul(y, Tensor(r2, dtype=np.float64)))
            loss = F.add(F.scale(l1, c1), F.scale(l2, c2))
        backward(loss)
        return w.grad

    combo = grads(0.7, -1.3)
    expected = 0.7 * grads(1.0, 0.0) - 1.3 * grads(0.0, 1.0)
    assert rel_error(combo, expected) <= 1e-6


def test_cross_entropy_is_neg_log_prob():
    rng = np.random.default_rng(5)
    for _ in range(20):
        logits = rng.standard_normal((1, 6)) * 3
        label = int(rng.integers(6))
        p = np.exp(logits - logits.max())
        p /= p.sum()
        assert abs(p.sum() - 1) < 1e-6
        loss = F.softmax_cross_entropy(Tensor(logits, dtype=np.float64), [label]).item()
        assert loss >= 0
        assert loss == pytest.approx(-math.log(p[0, label]), abs=1e-9)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((3, 2, 8, 8)).astype(np.float32))
        w = Parameter(rng.standard_normal((4, 2, 3, 3)).astype(np.float32))
        state = BatchNormState(4)
        g, b = Parameter(np.ones(4)), Parameter(np.zeros(4))
        with Tape():
            y = F.maxpool2x2(F.relu(F.batchnorm2d(F.conv2d(x, w), g, b, state)))
            loss = F.sum(y)
        backward(loss)
        return y.data, w.grad, g.grad

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


# --- Adam -------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    w = Parameter([1.0], dtype=np.float64)
    with Tape():
        loss = F.sum(F.mul(w, w))
    backward(loss)
    adam_step([w], lr=0.1)
    # first step: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert w.data[0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-15)
    assert w.data[0] == pytest.approx(0.9, abs=1e-8)
    assert w.step_count == 1


def test_adam_zero_gradient_leaves_parameters_unchanged():
    w = Parameter(np.array([0.3, -2.0, 5.0]))
    before = w.data.copy()
    w.zero_grad()
    adam_step([w], lr=0.01)
    assert np.array_equal(w.data, before)
    assert w.step_count == 1


def test_adam_reduces_quadratic_monotonically():
    w = Parameter(np.array([2.0, -1.5]), dtype=np.float64)
    losses = []
    for _ in range(3):
        w.zero_grad()
        with Tape():
            loss = F.sum(F.mul(w, w))
        losses.append(loss.item())
        backward(loss)
        adam_step([w], lr=0.1)
    assert losses[0] > losses[1] > losses[2]


def test_adam_missing_grad_names_parameter():
    w = Parameter([1.0], name="head.weight")
    with pytest.raises(ValueError, match="head.weight"):
        adam_step([w], lr=0.1)
