import numpy as np
import pytest

from harenctc import numkernel as nk
from harenctc.gradcheck import check_tensors, max_rel_error, numeric_grad


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_matmul_examples():
    out = nk.matmul(nk.Tensor(np.eye(2)), nk.Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])
    out = nk.matmul(nk.Tensor([[1.0, 0.0]]), nk.Tensor([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(nk.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nk.matmul(nk.Tensor(np.ones((2, 3))), nk.Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum():
    rng = _rng(1)
    a = nk.parameter(rng.normal(size=(3, 4)))
    b = nk.Tensor(rng.normal(size=(4, 2)))
    nk.backward(nk.sum(nk.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
    num = numeric_grad(lambda: float((a.data @ b.data).sum()), a.data)
    assert max_rel_error(a.grad, num) <= 1e-6


def test_row_softmax_examples():
    np.testing.assert_allclose(nk.row_softmax(nk.Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    big = nk.row_softmax(nk.Tensor([[1000.0, 1000.0]])).data
    np.testing.assert_allclose(big, [[0.5, 0.5]])
    out = nk.row_softmax(nk.Tensor([[np.log(19.0), -np.log(19.0)]])).data
    # exact value is 361/362; the rounded figure 0.997241 is within 4e-6
    np.testing.assert_allclose(out, [[361 / 362, 1 / 362]], rtol=1e-12)
    np.testing.assert_allclose(out, [[0.997241, 0.002759]], atol=1e-5)


def test_row_softmax_rows_and_shift_invariance():
    rng = _rng(2)
    x = rng.normal(size=(7, 5)) * 10
    s = nk.row_softmax(nk.Tensor(x)).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    shifted = nk.row_softmax(nk.Tensor(x + rng.normal(size=(7, 1)) * 100)).data
    np.testing.assert_allclose(shifted, s, atol=1e-12)


def test_layer_norm_examples():
    ones, zeros = nk.Tensor(np.ones(4)), nk.Tensor(np.zeros(4))
    out = nk.layer_norm(nk.Tensor(np.full((1, 4), 3.0)), ones, zeros)
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))
    out = nk.layer_norm(nk.Tensor([[1.0, 3.0]]), nk.Tensor(np.ones(2)), nk.Tensor(np.zeros(2)))
    # eps=1e-5 under the square root perturbs the exact [-1, 1]
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_rejects_single_feature():
    with pytest.raises(nk.DimensionError):
        nk.layer_norm(nk.Tensor(np.ones((2, 1))), nk.Tensor([1.0]), nk.Tensor([0.0]))


def test_silu_examples():
    assert nk.silu(nk.Tensor(0.0)).item() == 0.0
    assert nk.silu(nk.Tensor(40.0)).item() == pytest.approx(40.0)
    assert nk.silu(nk.Tensor(1.0)).item() == pytest.approx(0.731059, abs=1e-6)


def test_dropout_semantics():
    x = nk.Tensor(np.arange(1.0, 11.0))
    np.testing.assert_array_equal(nk.dropout(x, 0.0, True, 3).data, x.data)
    np.testing.assert_array_equal(nk.dropout(x, 0.3, False, 3).data, x.data)
    with pytest.raises(ValueError):
        nk.dropout(x, 1.0, True, 3)
    big = nk.dropout(nk.Tensor(np.ones(100_000)), 0.3, True, 11).data
    survivors = big > 0
    assert abs(survivors.mean() - 0.7) <= 0.01
    np.testing.assert_allclose(big[survivors], 1 / 0.7)
    again = nk.dropout(nk.Tensor(np.ones(100_000)), 0.3, True, 11).data
    np.testing.assert_array_equal(big, again)


def test_mean_pool_time():
    const = nk.mean_pool_time(nk.Tensor(np.tile([1.5, -2.0], (5, 1)))).data
    np.testing.assert_allclose(const, [1.5, -2.0])
    np.testing.assert_allclose(nk.mean_pool_time(nk.Tensor([[1.0, 2.0], [3.0, 4.0]])).data, [2, 3])
    x = nk.parameter(_rng(3).normal(size=(4, 3)))
    nk.backward(nk.sum(nk.mean_pool_time(x)))
    np.testing.assert_allclose(x.grad, np.full((4, 3), 0.25))
    with pytest.raises(nk.DimensionError):
        nk.mean_pool_time(nk.Tensor(np.zeros((0, 3))))


def test_backward_basic():
    theta = nk.parameter(np.zeros((2, 3)))
    nk.backward(nk.sum(theta))
    np.testing.assert_array_equal(theta.grad, np.ones((2, 3)))
    theta = nk.parameter([1.0, 2.0])
    nk.backward(nk.sum(nk.mul(theta, theta)))
    np.testing.assert_array_equal(theta.grad, [2.0, 4.0])


def test_backward_untouched_gets_zero_and_nonscalar_rejected():
    used, unused = nk.parameter([1.0, 2.0]), nk.parameter(np.ones(3))
    nk.backward(nk.sum(used), trainables=[used, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros(3))
    with pytest.raises(nk.GradientError):
        nk.backward(nk.mul(used, 2.0))


def test_backward_handles_shared_subgraph():
    x = nk.parameter([0.3, -1.2])
    y = nk.exp(x)
    loss = nk.sum(nk.add(nk.mul(y, y), y))
    nk.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * np.exp(2 * x.data) + np.exp(x.data))


PRIMITIVES = {
    "matmul": lambda a, b, c: nk.matmul(a, nk.transpose(b)),
    "batched_matmul": lambda a, b, c: nk.matmul(nk.reshape(a, (1, 3, 4)), nk.transpose(b)),
    "softmax": lambda a, b, c: nk.mul(nk.row_softmax(a), b),
    "log_softmax": lambda a, b, c: nk.mul(nk.log_softmax(a), b),
    "layer_norm": lambda a, b, c: nk.mul(nk.layer_norm(a, c, nk.take(c, slice(None, None, -1))), b),
    "silu": lambda a, b, c: nk.mul(nk.silu(a), b),
    "sigmoid": lambda a, b, c: nk.mul(nk.sigmoid(a), b),
    "exp_log": lambda a, b, c: nk.log(nk.add(nk.exp(a), nk.power(nk.mul(b, b), 0.75))),
    "dropout": lambda a, b, c: nk.mul(nk.dropout(a, 0.3, True, 5), b),
    "mean_pool": lambda a, b, c: nk.mul(nk.mean_pool_time(a), c),
    "pool_time": lambda a, b, c: nk.pool_time(nk.mul(a, b), 2),
    "transpose_reshape": lambda a, b, c: nk.mul(nk.reshape(nk.transpose(a, (1, 0)), (2, 6)), 1.7),
    "broadcast_add": lambda a, b, c: nk.mul(nk.add(a, c), nk.sub(b, c)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    op = PRIMITIVES[name]
    for trial in range(100 // len(PRIMITIVES) + 1):
        rng = _rng(1000 + trial)
        a = nk.parameter(rng.normal(size=(3, 4)))
        b = nk.parameter(rng.normal(size=(3, 4)))
        c = nk.parameter(rng.uniform(0.5, 1.5, size=4))
        w = rng.normal(size=op(a, b, c).shape)
        rows = check_tensors(lambda: nk.sum(nk.mul(op(a, b, c), w)), [a, b, c], ["a", "b", "c"])
        for row in rows:
            assert row.max_rel_err <= 1e-4, (name, trial, row)


def test_adam_zero_gradient_fixed_point():
    p = nk.parameter([1.0, -2.0])
    p.grad = np.zeros(2)
    state = nk.AdamState(lr=1e-3, weight_decay=0.0)
    nk.adam_step([p], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_magnitude_is_lr():
    p = nk.parameter([1.0, -2.0, 0.5])
    p.grad = np.array([0.3, -4.0, 1e-3])
    state = nk.AdamState(lr=1e-2, weight_decay=0.0)
    nk.adam_step([p], state)
    g = np.array([0.3, -4.0, 1e-3])
    # t=1: m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0, 0.5]) - 1e-2 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)


def test_adam_decoupled_weight_decay():
    p = nk.parameter([2.0])
    p.grad = np.zeros(1)
    nk.adam_step([p], nk.AdamState(lr=1e-4, weight_decay=1e-4))
    assert p.data[0] == pytest.approx(2.0 * (1 - 1e-8), rel=1e-15)


def test_adam_rejects_nonfinite_gradient():
    p = nk.parameter([1.0])
    p.grad = np.array([np.nan])
    with pytest.raises(nk.GradientError):
        nk.adam_step([p], nk.AdamState())


def test_precision_context():
    with nk.precision(32):
        assert nk.Tensor([1.0]).data.dtype == np.float32
    assert nk.Tensor([1.0]).data.dtype == np.float64
