import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rainpp.autodiff import (NonFiniteError, OptimState, Tensor, adamw_step, bilinear_sample,
                             check_gradients, conv2d, cross_entropy, exp, gelu, grad, layer_norm,
                             log, log_softmax, matmul, no_grad, softmax, upsample_bilinear,
                             adaptive_avg_pool, pixel_shuffle, where)


def t64(a, grad=True):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=grad)


# -- matmul ---------------------------------------------------------------
def test_matmul_identity():
    eye = t64(np.eye(2))
    assert np.array_equal(matmul(eye, eye).data, np.eye(2))
    a = t64([[1, 2], [3, 4]])
    assert np.array_equal(matmul(a, eye).data, [[1, 2], [3, 4]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_gradcheck(rng):
    a = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=(4, 2)))
    assert max(check_gradients(lambda: matmul(a, b), [a, b])) < 1e-4


# -- conv2d ---------------------------------------------------------------
def test_conv_unit_kernel_is_identity(rng):
    x = t64(rng.normal(size=(1, 3, 3)))
    out = conv2d(x, t64(np.ones((1, 1, 1, 1))), stride=1, pad=0)
    assert np.array_equal(out.data, x.data)


def test_conv_box_kernel_counts_neighbours():
    out = conv2d(t64(np.ones((1, 4, 4))), t64(np.ones((1, 1, 3, 3))), stride=1, pad=1).data[0]
    direct = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            direct[i, j] = sum(1 for di in (-1, 0, 1) for dj in (-1, 0, 1)
                               if 0 <= i + di < 4 and 0 <= j + dj < 4)
    assert np.array_equal(out, direct)
    assert out[1, 1] == 9 and out[0, 0] == 4


def test_conv_output_geometry(rng):
    x = t64(rng.normal(size=(2, 3, 8, 8)))
    assert conv2d(x, t64(rng.normal(size=(5, 3, 2, 2))), stride=2, pad=0).shape == (2, 5, 4, 4)
    with pytest.raises(ValueError, match="non-divisible"):
        conv2d(t64(np.ones((1, 7, 7))), t64(np.ones((1, 1, 2, 2))), stride=2, pad=0)
    with pytest.raises(ValueError, match="explicit pad"):
        conv2d(x, t64(np.ones((1, 3, 2, 2))))


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (1, 1, 0), (2, 2, 0), (3, 2, 0)])
def test_conv_gradcheck(rng, k, stride, pad):
    size = 7 if (k, stride) == (3, 2) else 6
    x = t64(rng.normal(size=(2, 3, size, size)))
    w = t64(rng.normal(size=(4, 3, k, k)))
    b = t64(rng.normal(size=4))
    assert max(check_gradients(lambda: conv2d(x, w, b, stride, pad) ** 2, [x, w, b])) < 1e-4


# -- softmax ----------------------------------------------------------------
def test_softmax_closed_forms():
    assert np.allclose(softmax(t64([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    assert np.allclose(softmax(t64([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)
    big = softmax(t64([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
def test_softmax_sums_to_one(values):
    out = softmax(t64(values)).data
    assert abs(out.sum() - 1.0) < 1e-6
    assert np.all((out >= 0) & (out <= 1))


def test_softmax_gradcheck(rng):
    x = t64(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))
    assert max(check_gradients(lambda: softmax(x, axis=1) * w, [x])) < 1e-4
    assert max(check_gradients(lambda: log_softmax(x, axis=0) * w, [x])) < 1e-4


# -- layer norm -------------------------------------------------------------
def test_layer_norm_closed_forms():
    ones, zeros = t64(np.ones(2)), t64(np.zeros(2))
    assert np.array_equal(layer_norm(t64([[5.0, 5.0]]), ones, zeros).data, [[0.0, 0.0]])
    assert np.allclose(layer_norm(t64([1.0, 3.0]), ones, zeros, eps=1e-12).data, [-1, 1], atol=1e-9)


def test_layer_norm_moments(rng):
    x = t64(rng.normal(3.0, 4.0, size=(6, 10)))
    out = layer_norm(x, t64(np.ones(10)), t64(np.zeros(10)), eps=1e-12).data
    assert np.allclose(out.mean(axis=1), 0, atol=1e-5)
    assert np.allclose(out.var(axis=1), 1, atol=1e-5)


@pytest.mark.parametrize("axis", [-1, 1])
def test_layer_norm_gradcheck(rng, axis):
    x = t64(rng.normal(size=(2, 4, 3, 3)))
    n = x.shape[axis]
    g, b = t64(rng.normal(size=n)), t64(rng.normal(size=n))
    w = rng.normal(size=x.shape)
    assert max(check_gradients(lambda: layer_norm(x, g, b, axis=axis) * w, [x, g, b])) < 1e-4


# -- bilinear sampling ------------------------------------------------------
def test_bilinear_integer_coords_are_exact(rng):
    fmap = t64(rng.normal(size=(2, 4, 5)))
    coords = t64([[0, 0], [3, 4], [2, 1]])
    out = bilinear_sample(fmap, coords).data
    assert np.array_equal(out, fmap.data[:, [0, 3, 2], [0, 4, 1]])


def test_bilinear_midpoint_and_clamp():
    fmap = t64([[[0.0, 0.0], [2.0, 2.0]]])
    assert bilinear_sample(fmap, t64([[0.5, 0.5]])).data[0, 0] == pytest.approx(1.0)
    grid = t64(np.arange(9.0).reshape(1, 3, 3))
    assert bilinear_sample(grid, t64([[-5.0, -5.0]])).data[0, 0] == grid.data[0, 0, 0]
    assert bilinear_sample(grid, t64([[7.0, 9.0]])).data[0, 0] == grid.data[0, 2, 2]


def test_bilinear_gradcheck(rng):
    fmap = t64(rng.normal(size=(2, 3, 5, 6)))
    # keep coordinates off the integer lattice where the interpolant has kinks
    coords = t64(rng.uniform(0.05, 0.95, size=(2, 12, 2)) + rng.integers(0, 4, size=(2, 12, 2)))
    w = rng.normal(size=(2, 3, 12))
    assert max(check_gradients(lambda: bilinear_sample(fmap, coords) * w, [fmap, coords])) < 1e-4


def test_bilinear_clamped_coords_get_zero_grad():
    fmap = t64(np.arange(9.0).reshape(1, 3, 3))
    coords = t64([[-2.0, 1.5], [1.5, 9.0]])
    bilinear_sample(fmap, coords).sum().backward()
    assert coords.grad[0, 0] == 0 and coords.grad[1, 1] == 0
    assert coords.grad[0, 1] != 0 and coords.grad[1, 0] != 0


# -- resampling helpers -----------------------------------------------------
def test_resample_gradcheck(rng):
    x = t64(rng.normal(size=(2, 3, 4, 4)))
    w = rng.normal(size=(2, 3, 8, 8))
    assert max(check_gradients(lambda: upsample_bilinear(x, (8, 8)) * w, [x])) < 1e-4
    w6 = rng.normal(size=(2, 3, 6, 6))
    assert max(check_gradients(lambda: adaptive_avg_pool(x, 6) * w6, [x])) < 1e-4
    x4 = t64(rng.normal(size=(1, 8, 3, 3)))
    w4 = rng.normal(size=(1, 2, 6, 6))
    assert max(check_gradients(lambda: pixel_shuffle(x4, 2) * w4, [x4])) < 1e-4


def test_adaptive_pool_global_mean(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    assert np.allclose(adaptive_avg_pool(Tensor(x), 1).data[..., 0, 0], x.mean(axis=(2, 3)))


def test_elementwise_gradcheck(rng):
    x = t64(rng.uniform(0.5, 2.0, size=(3, 4)))
    y = t64(rng.normal(size=(4,)))
    cond = rng.random((3, 4)) > 0.5
    fn = lambda: (exp(x) * y - log(x) / (y * y + 1) + gelu(x - 1.0)) ** 2 + where(cond, x, y)
    assert max(check_gradients(fn, [x, y])) < 1e-4


# -- backward --------------------------------------------------------------
def test_backward_sum_and_square():
    x = t64([1.0, 2.0, 3.0])
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones(3))
    x = t64([1.0, 2.0, 3.0])
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    with pytest.raises(ValueError, match="scalar"):
        t64([1.0, 2.0]).backward()


def test_shared_subexpression_accumulates():
    x = t64([2.0])
    y = x * x
    (y + y * x).sum().backward()
    assert x.grad[0] == pytest.approx(2 * 2 + 3 * 4)


def test_composite_graph_gradcheck(rng):
    x = t64(rng.normal(size=(1, 2, 5, 5)))
    w = t64(rng.normal(size=(3, 2, 3, 3)))
    g, b = t64(rng.normal(size=3)), t64(rng.normal(size=3))
    target = rng.dirichlet(np.ones(3), size=(1, 5, 5)).transpose(0, 3, 1, 2)

    def fn():
        h = layer_norm(conv2d(x, w, None, 1, 1), g, b, axis=1)
        return cross_entropy(softmax(h, axis=1) * 4.0, target, axis=1)

    assert max(check_gradients(fn, [x, w, g, b])) < 1e-4


def test_backward_is_deterministic(rng):
    data = rng.normal(size=(2, 3, 6, 6))
    kern = rng.normal(size=(4, 3, 3, 3))

    def run():
        x, w = t64(data), t64(kern)
        loss = (softmax(conv2d(x, w), axis=1) ** 2).sum()
        return grad(loss, [x, w])

    a, b = run(), run()
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        log(t64([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        exp(t64([1e4]))


def test_no_grad_records_nothing():
    x = t64([1.0, 2.0])
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


# -- optimizer ---------------------------------------------------------------
def test_adamw_zero_grad_no_decay_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    state = OptimState(lr=0.1, weight_decay=0.0)
    adamw_step(params, {"w": np.zeros(2)}, state)
    assert np.array_equal(params["w"], [1.0, -2.0])
    assert state.step == 1


def test_adamw_descends_quadratic():
    params = {"w": np.array([1.0])}
    state = OptimState(lr=0.1, weight_decay=0.0)
    adamw_step(params, {"w": 2 * params["w"]}, state)
    assert abs(params["w"][0]) < 1.0


def test_adamw_converges_on_2d_quadratic():
    scale = np.array([1.0, 10.0])
    params = {"w": np.array([1.5, -2.0])}
    state = OptimState(lr=0.05, weight_decay=0.0)
    for _ in range(200):
        w = Tensor(params["w"], requires_grad=True)
        loss = (Tensor(scale) * w * w).sum()
        adamw_step(params, {"w": grad(loss, [w])[0]}, state)
    assert float((scale * params["w"] ** 2).sum()) < 1e-3


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimState())


def test_cosine_schedule_with_warmup():
    s = OptimState(lr=1.0, total_steps=10, warmup_steps=2)
    lrs = []
    for step in range(10):
        s.step = step
        lrs.append(s.current_lr())
    assert lrs[0] == 0.5 and lrs[1] == 1.0
    assert all(a >= b for a, b in zip(lrs[1:], lrs[2:]))


def test_relative_error_floor_ignores_rounding_noise_on_zero_gradients():
    from rainpp.autodiff import relative_error
    zero = np.zeros(4)
    assert relative_error(zero, np.full(4, 1e-12)) < 1e-5
    assert relative_error(np.ones(4), np.ones(4) * 1.001) == pytest.approx(1e-3, rel=1e-2)
    assert relative_error(zero, np.full(4, 1e-12), floor=1e-12) > 0.5
