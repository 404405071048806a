import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ffda import tensor as T
from ffda.errors import ContractError, NumericError, ShapeError
from ffda.tensor import Tape, Tensor, backward, precision
from gradcheck import OP_CASES, check_op


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        fn, arrays = OP_CASES[name](rng)
        assert check_op(fn, arrays, rng, "f64") < 1e-5
        assert check_op(fn, arrays, rng, "f32") < 1e-3


def test_half_sum_of_squares_has_identity_gradient(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = T.scale(T.sum(T.mul(x, x)), 0.5)
    backward(loss, tape)
    assert loss.shape == ()
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)


def test_default_precision_is_f32_and_f64_mode_is_scoped():
    assert Tensor([1.0]).dtype == np.float32
    with precision("f64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_no_tape_means_nothing_recorded(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    y = T.relu(x)
    assert not y.requires_grad


def test_leaf_grads_are_overwritten_not_accumulated(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = T.sum(T.scale(x, 3.0))
        backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.full(4, 3.0, dtype=np.float32))


def test_shared_subexpression_gradients_accumulate_within_one_pass():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = T.mul(x, x)
        loss = T.sum(T.add(y, y))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_requires_scalar_loss(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(ContractError):
        backward(y, tape)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


@pytest.mark.filterwarnings("ignore:invalid value")
def test_debug_mode_flags_non_finite_forward():
    T.set_debug(True)
    try:
        with pytest.raises(NumericError):
            T.log(Tensor([-1.0]))
    finally:
        T.set_debug(False)


# ---------------------------------------------------------------- loop oracles (f64, exact)


def _conv_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for a in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[a, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[a, f, i, j] = np.sum(patch * w[f]) + (b[f] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 2), (2, 1)])
def test_conv2d_matches_loop_oracle(rng, stride, pad):
    x = rng.integers(-3, 4, (2, 3, 7, 7)).astype(np.float64)
    w = rng.integers(-2, 3, (4, 3, 3, 3)).astype(np.float64)
    b = rng.integers(-2, 3, 4).astype(np.float64)
    with precision("f64"):
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_array_equal(got, _conv_loops(x, w, b, stride, pad))


def test_conv2d_channels_last_agrees_with_nchw(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((5, 3, 5, 5))
    with precision("f64"):
        a = T.conv2d(Tensor(x), Tensor(w), padding=2).data
        b = T.conv2d(Tensor(x.transpose(0, 2, 3, 1)), Tensor(w), padding=2, channels_last=True).data
    np.testing.assert_allclose(a, b.transpose(0, 3, 1, 2), rtol=1e-12)


def test_matmul_matches_loop_oracle(rng):
    a = rng.integers(-5, 6, (4, 6)).astype(np.float64)
    b = rng.integers(-5, 6, (6, 3)).astype(np.float64)
    ref = np.array([[sum(a[i, k] * b[k, j] for k in range(6)) for j in range(3)] for i in range(4)])
    with precision("f64"):
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, ref)


def test_max_pool_routes_tied_gradient_to_first_maximum():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.max_pool2d(x, 2))
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_cross_entropy_ignores_masked_rows(rng):
    z = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    with Tape() as tape:
        loss = T.cross_entropy(z, [-1, -1, -1, -1])
    backward(loss, tape)
    assert loss.item() == 0.0
    assert not np.any(z.grad)
    full = T.cross_entropy(Tensor(z.data), [0, 2, -1, 1]).item()
    manual = T.cross_entropy(Tensor(z.data[[0, 1, 3]]), [0, 2, 1]).item()
    assert full == pytest.approx(manual, rel=1e-6)


def test_batch_norm_stat_rows_uses_only_leading_rows(rng):
    x = rng.standard_normal((6, 2, 3, 3))
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    with precision("f64"):
        out, mu, var = T.batch_norm(Tensor(x), g, b, 0.0, stat_rows=4)
    np.testing.assert_allclose(mu, x[:4].mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(var, x[:4].var(axis=(0, 2, 3)))
    np.testing.assert_allclose(out.data[:4].mean(axis=(0, 2, 3)), 0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    with precision("f64"):
        p = T.softmax_rows(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=2, max_side=6),
                  elements=st.floats(-10, 10)))
def test_log_softmax_is_shift_invariant(x):
    with precision("f64"):
        a = T.log_softmax_rows(Tensor(x)).data
        b = T.log_softmax_rows(Tensor(x + 3.7)).data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_matmul_and_softmax_examples():
    eye = T.matmul(Tensor([[1.0, 0], [0, 1]]), Tensor([[3.0, 4], [5, 6]])).data
    np.testing.assert_array_equal(eye, [[3, 4], [5, 6]])
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 2]]), Tensor([[3.0], [4]])).data, [[11]])
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, np.log(3)]])).data, [[0.25, 0.75]],
                               rtol=1e-6)
    np.testing.assert_array_equal(T.softmax_rows(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])


def test_sum_has_all_ones_gradient(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_three_layer_mlp_matches_coarse_finite_differences(rng):
    ws = [rng.standard_normal(s) * 0.5 for s in ((4, 6), (6, 5), (5, 3))]
    x, y = rng.standard_normal((7, 4)), rng.integers(0, 3, 7)

    def loss_of(params):
        h = Tensor(x)
        for i, w in enumerate(params):
            h = T.matmul(h, w)
            h = T.relu(h) if i < 2 else h
        return T.cross_entropy(h, y)

    with precision("f64"):
        params = [Tensor(w, requires_grad=True) for w in ws]
        with Tape() as tape:
            loss = loss_of(params)
        backward(loss, tape)
        for p in params:
            num = np.zeros_like(p.data)
            for i in np.ndindex(p.shape):
                keep = p.data[i]
                p.data[i] = keep + 1e-3
                up = loss_of(params).item()
                p.data[i] = keep - 1e-3
                down = loss_of(params).item()
                p.data[i] = keep
                num[i] = (up - down) / 2e-3
            assert np.linalg.norm(num - p.grad) / np.linalg.norm(num) < 1e-4


def test_forward_is_bitwise_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = T.softmax_rows(T.flatten(T.conv2d(Tensor(x), Tensor(w), padding=1))).data
    b = T.softmax_rows(T.flatten(T.conv2d(Tensor(x), Tensor(w), padding=1))).data
    assert a.tobytes() == b.tobytes()
