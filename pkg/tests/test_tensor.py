import numpy as np
import pytest
from hypothesis import given, strategies as st

from horizon_forge import tensor as T
from horizon_forge.tensor import Graph, ShapeError, Tensor, finite_diff_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def input_grad(fn, x, probe):
    """Gradient of sum(fn(x) * probe) with respect to x via the tape."""
    x = leaf(x)
    with Graph() as g:
        loss = T.weighted_sum(fn(x), probe)
    g.backward(loss)
    return x.grad


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 7))
    k = np.zeros((3, 3, 1, 1))
    k[np.arange(3), np.arange(3)] = 1.0
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_box_filter_on_constant():
    x = np.full((1, 1, 6, 6), 3.5)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3)) / 9.0)).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 3.5, rtol=1e-12)
    # zero fill shows up on the border
    assert out[0, 0, 0, 0] == pytest.approx(3.5 * 4 / 9)


def test_conv_same_padding_preserves_extent(rng):
    out = T.conv2d(Tensor(rng.standard_normal((1, 2, 16, 12))), Tensor(rng.standard_normal((4, 2, 3, 3))))
    assert out.shape == (1, 4, 16, 12)


def test_conv_errors(rng):
    x = Tensor(rng.standard_normal((1, 2, 8, 8)))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(rng.standard_normal((4, 3, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(rng.standard_normal((4, 2, 3, 3))), stride=0)


def test_conv_against_direct_loop(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for o in range(4):
            for i in range(6):
                for j in range(5):
                    ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * k[o]).sum() + b[o]
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data, ref, rtol=1e-12, atol=1e-12)


def test_conv_stride2_valid_shape(rng):
    out = T.conv2d(Tensor(rng.standard_normal((1, 2, 8, 8))), Tensor(rng.standard_normal((3, 2, 2, 2))),
                   stride=2, padding="valid")
    assert out.shape == (1, 3, 4, 4)


@pytest.mark.parametrize("shape,kshape", [((2, 3, 7, 6), (4, 3, 3, 3)), ((1, 2, 5, 5), (3, 2, 1, 1))])
def test_conv_gradients_match_finite_differences(rng, shape, kshape):
    x, k, b = leaf(rng.standard_normal(shape)), leaf(rng.standard_normal(kshape)), leaf(rng.standard_normal(kshape[0]))
    probe = rng.standard_normal((shape[0], kshape[0]) + shape[2:])
    err = finite_diff_check(lambda: T.weighted_sum(T.conv2d(x, k, b), probe), [x, k, b])
    assert err < 1e-4


def test_conv_adjointness(rng):
    for _ in range(5):
        x = rng.standard_normal((2, 3, 9, 8))
        k = Tensor(rng.standard_normal((5, 3, 3, 3)))
        y = rng.standard_normal((2, 5, 9, 8))
        lhs = (T.conv2d(Tensor(x), k).data * y).sum()
        rhs = (x * input_grad(lambda t: T.conv2d(t, k), x, y)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-6)


# ---------------------------------------------------------------- conv2d_transpose

def test_transpose_block_replication():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = T.conv2d_transpose(Tensor(x), Tensor(np.ones((1, 1, 2, 2)))).data
    expected = np.kron(x[0, 0], np.ones((2, 2)))
    np.testing.assert_array_equal(out[0, 0], expected)
    assert out.shape == (1, 1, 4, 4)


def test_transpose_is_strided_conv_input_gradient(rng):
    for _ in range(5):
        k = Tensor(rng.standard_normal((4, 3, 2, 2)))  # conv: 3 -> 4 channels
        x = rng.standard_normal((2, 3, 8, 6))
        dy = rng.standard_normal((2, 4, 4, 3))
        via_conv = input_grad(lambda t: T.conv2d(t, k, stride=2, padding="valid"), x, dy)
        via_transpose = T.conv2d_transpose(Tensor(dy), k).data
        np.testing.assert_allclose(via_transpose, via_conv, rtol=1e-6, atol=1e-12)


def test_transpose_gradients(rng):
    x, k, b = leaf(rng.standard_normal((2, 3, 4, 5))), leaf(rng.standard_normal((3, 2, 2, 2))), leaf(rng.standard_normal(2))
    probe = rng.standard_normal((2, 2, 8, 10))
    assert finite_diff_check(lambda: T.weighted_sum(T.conv2d_transpose(x, k, b), probe), [x, k, b]) < 1e-4


def test_transpose_rejects_other_geometries(rng):
    with pytest.raises(ValueError):
        T.conv2d_transpose(Tensor(rng.standard_normal((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d_transpose(Tensor(rng.standard_normal((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=1)


# ---------------------------------------------------------------- maxpool

def test_maxpool_single_window():
    out = T.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    assert out.data.item() == 4.0


def test_maxpool_constant_and_odd():
    out = T.maxpool2d(Tensor(np.full((1, 2, 6, 4), 7.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 2, 3, 2), 7.0))
    with pytest.raises(ValueError):
        T.maxpool2d(Tensor(np.zeros((1, 1, 5, 4))))


def test_maxpool_backward_routes_to_first_argmax():
    x = np.array([[[[5.0, 5.0, 1.0, 0.0],
                    [5.0, 2.0, 0.0, 3.0]]]])
    g = input_grad(T.maxpool2d, x, np.ones((1, 1, 1, 2)))
    expected = np.array([[[[1.0, 0.0, 0.0, 0.0],
                           [0.0, 0.0, 0.0, 1.0]]]])
    np.testing.assert_array_equal(g, expected)


# ---------------------------------------------------------------- batchnorm

def _bn(c, train=True):
    return (leaf(np.ones(c)), leaf(np.zeros(c)), np.zeros(c), np.ones(c))


def test_batchnorm_train_normalizes(rng):
    x = rng.standard_normal((3, 4, 6, 5)) * 3 + 2
    gamma, beta, rm, rv = _bn(4)
    out = T.batchnorm2d(Tensor(x), gamma, beta, rm, rv, train=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batchnorm_identity_on_standard_input(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    gamma, beta, rm, rv = _bn(3)
    out = T.batchnorm2d(Tensor(x), gamma, beta, rm, rv, train=True).data
    assert np.abs(out - x).max() < 1e-4


def test_batchnorm_zero_gamma_gives_beta(rng):
    beta = np.array([0.5, -1.0])
    out = T.batchnorm2d(Tensor(rng.standard_normal((1, 2, 4, 4))), Tensor(np.zeros(2)), Tensor(beta),
                        np.zeros(2), np.ones(2), train=True).data
    np.testing.assert_array_equal(out, np.broadcast_to(beta[None, :, None, None], out.shape))


def test_batchnorm_running_stats_and_eval(rng):
    x = rng.standard_normal((2, 1, 4, 4)) + 3.0
    rm, rv = np.zeros(1), np.ones(1)
    T.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, train=True)
    assert rm[0] == pytest.approx(0.1 * x.mean())
    assert rv[0] == pytest.approx(0.9 + 0.1 * x.var())
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, train=False).data
    np.testing.assert_allclose(out, (x - rm[0]) / np.sqrt(rv[0]))


def test_batchnorm_degenerate_variance_is_finite():
    x = np.full((1, 1, 4, 4), 2.0)
    gamma, beta, rm, rv = _bn(1)
    with Graph() as g:
        out = T.batchnorm2d(leaf(x), gamma, beta, rm, rv, train=True)
        loss = T.sum_all(out)
    g.backward(loss)
    assert np.all(np.isfinite(out.data))
    assert np.all(np.isfinite(gamma.grad))


def test_batchnorm_needs_two_values():
    with pytest.raises(ValueError):
        T.batchnorm2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                      np.zeros(1), np.ones(1), train=True)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(rng, train):
    x = leaf(rng.standard_normal((2, 3, 4, 5)))
    gamma, beta = leaf(rng.uniform(0.5, 1.5, 3)), leaf(rng.standard_normal(3))
    probe = rng.standard_normal((2, 3, 4, 5))
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)

    def f():
        return T.weighted_sum(T.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), train=train), probe)

    assert finite_diff_check(f, [x, gamma, beta]) < 1e-3


# ---------------------------------------------------------------- activations / channels

def test_activations():
    assert T.relu(Tensor(np.array([-3.0]))).data[0] == 0.0
    assert T.relu(Tensor(np.array([3.0]))).data[0] == 3.0
    assert T.sigmoid(Tensor(np.array([0.0]))).data[0] == 0.5
    g = input_grad(lambda t: T.activation(t, "sigmoid"), np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1)))
    assert g.item() == 0.25
    with pytest.raises(ValueError):
        T.activation(Tensor(np.zeros(1)), "tanh")


def test_sigmoid_finite_difference(rng):
    x = leaf(rng.standard_normal((1, 2, 3, 3)))
    assert finite_diff_check(lambda: T.sum_all(T.sigmoid(x)), [x]) < 1e-6


def test_concat_shapes_roundtrip_and_grad(rng):
    a, b = rng.standard_normal((1, 3, 8, 8)), rng.standard_normal((1, 5, 8, 8))
    c = T.concat_channels(Tensor(a), Tensor(b))
    assert c.shape == (1, 8, 8, 8)
    np.testing.assert_array_equal(T.slice_channels(c, 0, 3).data, a)
    np.testing.assert_array_equal(T.slice_channels(c, 3, 8).data, b)
    la, lb = leaf(a), leaf(b)
    with Graph() as g:
        loss = T.sum_all(T.concat_channels(la, lb))
    g.backward(loss)
    np.testing.assert_array_equal(la.grad, np.ones_like(a))
    np.testing.assert_array_equal(lb.grad, np.ones_like(b))
    with pytest.raises(ShapeError):
        T.concat_channels(Tensor(a), Tensor(rng.standard_normal((1, 5, 8, 4))))


def test_upsample_and_mul_broadcast_gradients(rng):
    x = leaf(rng.standard_normal((2, 3, 4, 4)))
    a = leaf(rng.standard_normal((2, 1, 8, 8)))
    probe = rng.standard_normal((2, 3, 8, 8))
    f = lambda: T.weighted_sum(T.mul(T.upsample_nearest2x(x), a), probe)  # noqa: E731
    assert finite_diff_check(f, [x, a]) < 1e-6


# ---------------------------------------------------------------- backward contract

def test_backward_sum_and_square(rng):
    x = leaf(rng.standard_normal((1, 2, 3, 3)))
    with Graph() as g:
        loss = T.sum_all(x)
    g.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))
    x.grad = None
    with Graph() as g:
        loss = T.sum_all(T.mul(x, x))
    g.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_errors_and_untracked_leaves(rng):
    x = leaf(rng.standard_normal((1, 1, 2, 2)))
    frozen = Tensor(rng.standard_normal((1, 1, 2, 2)))
    with Graph() as g:
        out = T.add(x, frozen)
        loss = T.sum_all(out)
    with pytest.raises(ValueError):
        g.backward(out)
    g.backward(loss)
    assert frozen.grad is None and x.grad is not None
    with pytest.raises(RuntimeError):
        g.backward(loss)
    g.reset()
    assert g.nodes == []


def test_no_recording_outside_graph(rng):
    x = leaf(rng.standard_normal((1, 1, 2, 2)))
    y = T.relu(x)
    assert not y.requires_grad and y.is_leaf


def test_backward_is_deterministic(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    k = rng.standard_normal((3, 2, 3, 3))
    grads = []
    for _ in range(2):
        kt = leaf(k)
        with Graph() as g:
            loss = T.sum_all(T.relu(T.conv2d(Tensor(x), kt)))
        g.backward(loss)
        grads.append(kt.grad)
    assert np.array_equal(grads[0], grads[1])


# ---------------------------------------------------------------- sobel / finite diff harness

def test_sobel_constant_and_ramp():
    zero = T.sobel(Tensor(np.full((1, 2, 6, 6), 4.0))).data
    assert zero.shape == (1, 4, 6, 6)
    assert np.all(zero[:, :, 1:-1, 1:-1] == 0.0)
    ramp = np.tile(np.arange(7.0), (7, 1))[None, None]
    out = T.sobel(Tensor(ramp)).data
    assert np.all(out[0, 0, 1:-1, 1:-1] == 8.0)
    assert np.all(out[0, 1, 1:-1, 1:-1] == 0.0)


def test_sobel_adjoint(rng):
    x = leaf(rng.standard_normal((1, 2, 5, 6)))
    probe = rng.standard_normal((1, 4, 5, 6))
    assert finite_diff_check(lambda: T.weighted_sum(T.sobel(x), probe), [x]) < 1e-6


@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_sobel_translation_equivariance(di, dj, seed):
    img = np.random.default_rng(seed).standard_normal((1, 1, 20, 20))
    shifted = np.roll(img, (di, dj), axis=(2, 3))
    a = T.sobel(Tensor(img)).data
    b = T.sobel(Tensor(shifted)).data
    # compare away from the zero-padded border and the wrap seam
    sl_a = a[..., 1:16, 1:16]
    sl_b = b[..., 1 + di:16 + di, 1 + dj:16 + dj]
    np.testing.assert_allclose(sl_b, sl_a, atol=1e-12)


def test_finite_diff_exact_for_linear(rng):
    x = leaf(rng.standard_normal((1, 1, 4, 4)))
    a = rng.standard_normal((1, 1, 4, 4))
    assert finite_diff_check(lambda: T.weighted_sum(x, a), [x], max_coords=None) < 1e-9


@given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_ops_preserve_finiteness(n, c, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal((n, c, 8, 8)) * 50)
    k = Tensor(r.standard_normal((c, c, 3, 3)))
    y = T.conv2d(x, k)
    y = T.batchnorm2d(y, Tensor(np.ones(c)), Tensor(np.zeros(c)), np.zeros(c), np.ones(c), train=True)
    y = T.sigmoid(T.relu(T.maxpool2d(y)))
    y = T.conv2d_transpose(y, Tensor(r.standard_normal((c, 2, 2, 2))))
    assert np.all(np.isfinite(y.data))
