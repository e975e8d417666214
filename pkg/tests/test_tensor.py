import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import RTOL, away_from_zero, check
from hallucinet.losses import cross_entropy, one_hot
from hallucinet.tensor import (
    Adam,
    BackwardError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    conv2d,
    flatten,
    log,
    make_optimizer,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    relu_mask,
    reshape,
    square,
    sub,
    tempered_softmax,
    transpose,
    tsum,
    update_step,
)

N_INSTANCES = 20


# --- forward examples ------------------------------------------------------------

def test_matmul_identity():
    b = [[3.0, 4.0], [5.0, 6.0]]
    np.testing.assert_array_equal(matmul(np.eye(2), b).data, b)


def test_matmul_hand_product():
    out = matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 5, 6)).astype(np.float32)
    out = conv2d(x, np.ones((1, 1, 1, 1), np.float32), stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_sums_to_nine():
    out = conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), stride=1, padding=0)
    assert out.shape == (1, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 9.0))


def test_conv_output_shape_stride_padding():
    out = conv2d(np.ones((1, 5, 5)), np.ones((1, 1, 3, 3)), stride=2, padding=1)
    assert out.shape == (1, 3, 3)


def test_conv_kernel_larger_than_padded_input():
    with pytest.raises(ShapeError, match="larger than padded input"):
        conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 5, 5)), padding=1)


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    k = rng.standard_normal((4, 3, 3, 2))
    stride, pad = 2, 1
    out = conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), stride, pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (7 + 2 * pad - 3) // stride + 1
    wo = (6 + 2 * pad - 2) // stride + 1
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 2]
                    ref[n, o, i, j] = (patch * k[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_relu_examples():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = Tensor([0.5, 3.0, 1.0])
    np.testing.assert_array_equal(relu(x).data, x.data)
    np.testing.assert_array_equal(relu_mask([-1.0, 0.0, 2.0]), [0, 0, 1])


def test_relu_gradient_zero_at_kink():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    backward(tsum(relu(x)))
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_softmax_examples():
    np.testing.assert_allclose(tempered_softmax([0.0, 0.0], 5).data, [0.5, 0.5])
    np.testing.assert_allclose(tempered_softmax([1.0, 0.0], 1).data, [0.73106, 0.26894], atol=1e-4)
    np.testing.assert_allclose(tempered_softmax([2.0, 0.0], 2).data, tempered_softmax([1.0, 0.0], 1).data,
                               rtol=0, atol=1e-7)


@pytest.mark.parametrize("T", [0.0, -1.0])
def test_softmax_rejects_non_positive_temperature(T):
    with pytest.raises(ValueError):
        tempered_softmax([1.0, 2.0], T)


def test_softmax_overflow_safe():
    s = tempered_softmax([1000.0, 0.0, -1000.0], 1.0).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s, [1, 0, 0], atol=1e-7)


# --- properties --------------------------------------------------------------------

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@settings(max_examples=200, deadline=None)
@given(z=arrays(np.float32, st.integers(1, 12), elements=finite), T=st.floats(0.1, 1000))
def test_softmax_is_probability_vector(z, T):
    s = tempered_softmax(z, T).data
    assert np.all(s >= 0)
    assert abs(float(s.astype(np.float64).sum()) - 1.0) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(z=arrays(np.float64, st.integers(2, 8), elements=st.floats(-20, 20)))
def test_softmax_max_non_increasing_in_temperature(z):
    if np.ptp(z) < 1e-6:
        return
    grid = [1, 2, 5, 10, 15, 50, 100]
    peaks = [tempered_softmax(Tensor(z, dtype=np.float64), T).data.max() for T in grid]
    assert all(b <= a + 1e-12 for a, b in zip(peaks, peaks[1:]))


@settings(max_examples=50, deadline=None)
@given(a=arrays(np.float32, (3, 4), elements=finite), b=arrays(np.float32, (4,), elements=finite))
def test_tensor_shape_and_finiteness(a, b):
    out = relu(add(matmul(a, np.ones((4, 4), np.float32)), b))
    assert out.data.size == int(np.prod(out.shape))
    assert np.all(np.isfinite(out.data))


# --- gradient oracle ----------------------------------------------------------------

def _instances(rng, n=N_INSTANCES):
    return [np.random.default_rng(rng.integers(2 ** 32)) for _ in range(n)]


def _assert_grad(fn, arrays_, r, **kw):
    err = check(fn, arrays_, r, **kw)
    assert err <= RTOL, f"relative gradient error {err:.3g}"


@pytest.mark.parametrize("name,fn,make", [
    ("add", lambda a, b: add(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)]),
    ("sub", lambda a, b: sub(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    ("mul", lambda a, b: mul(a, b), lambda r: [r.standard_normal((2, 5)), r.standard_normal((2, 5))]),
    ("scale", lambda a: mul(a, 2.5), lambda r: [r.standard_normal((3, 3))]),
    ("div", lambda a: a / 3.0, lambda r: [r.standard_normal((3, 3))]),
    ("neg", lambda a: -a, lambda r: [r.standard_normal(4)]),
    ("square", square, lambda r: [r.standard_normal((3, 2))]),
    ("relu", relu, lambda r: [away_from_zero(r, (4, 5))]),
    ("log", log, lambda r: [r.uniform(0.2, 3.0, (3, 4))]),
    ("sum_all", lambda a: tsum(a), lambda r: [r.standard_normal((3, 4))]),
    ("sum_axis", lambda a: tsum(a, axis=1), lambda r: [r.standard_normal((3, 4))]),
    ("mean", lambda a: mean(a, axis=0), lambda r: [r.standard_normal((3, 4))]),
    ("reshape", lambda a: reshape(a, (6, 2)), lambda r: [r.standard_normal((3, 4))]),
    ("flatten", flatten, lambda r: [r.standard_normal((2, 3, 2, 2))]),
    ("transpose", transpose, lambda r: [r.standard_normal((3, 5))]),
    ("concat", lambda a, b: concat([a, b], axis=1), lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
    ("matmul", matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    ("conv2d", lambda x, k: conv2d(x, k, stride=2, padding=1),
     lambda r: [r.standard_normal((2, 2, 5, 5)), r.standard_normal((3, 2, 3, 3))]),
    ("conv2d_unbatched", lambda x, k: conv2d(x, k, stride=1, padding=0),
     lambda r: [r.standard_normal((2, 4, 4)), r.standard_normal((2, 2, 2, 2))]),
    ("softmax_T1", lambda z: tempered_softmax(z, 1.0), lambda r: [r.standard_normal((3, 4))]),
    ("softmax_T7", lambda z: tempered_softmax(z, 7.0), lambda r: [3 * r.standard_normal((3, 4))]),
])
def test_gradient_matches_finite_differences(name, fn, make, rng):
    for r in _instances(rng):
        _assert_grad(fn, make(r), r)


def test_dense_softmax_cross_entropy_gradients(rng):
    # a random 3-class dense net: logits = x W + b, loss = CE(softmax(logits))
    for r in _instances(rng):
        x = r.standard_normal((5, 4))
        y = one_hot(r.integers(0, 3, 5), 3, dtype=np.float64)
        fn = lambda W, b: cross_entropy(y, tempered_softmax(add(matmul(Tensor(x, dtype=np.float64), W), b), 1.0))
        _assert_grad(fn, [r.standard_normal((4, 3)), r.standard_normal(3)], r)


# --- backward contract ---------------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_accumulates_shared_use():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(tsum(add(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(BackwardError, match="scalar"):
        backward(mul(x, 2.0))


def test_backward_without_forward():
    with pytest.raises(BackwardError, match="trace"):
        backward(Tensor(1.0, requires_grad=True))


def test_backward_twice_raises():
    x = Tensor([1.0], requires_grad=True)
    loss = tsum(square(x))
    backward(loss)
    with pytest.raises(BackwardError):
        backward(loss)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = tsum(square(x))
    assert y._backward is None
    with pytest.raises(BackwardError):
        backward(y)


def test_frozen_parameter_gets_no_grad_and_does_not_move():
    w = Parameter(np.array([1.0, 2.0], np.float32))
    f = Parameter(np.array([3.0, 4.0], np.float32), frozen=True)
    backward(tsum(mul(w, f)))
    assert f.grad is None
    before = f.data.tobytes()
    f.grad = np.ones(2, np.float32)  # even a stray gradient must be ignored
    update_step([w, f], 0.1, Adam())
    assert f.data.tobytes() == before
    assert not np.array_equal(w.data, [1.0, 2.0])


# --- optimizer ------------------------------------------------------------------

def test_adam_first_step_hand_value():
    p = Parameter(np.array([1.0], np.float32))
    p.grad = np.array([1.0], np.float32)
    update_step([p], 0.1, Adam())
    # m_hat = 1, v_hat = 1 at t=1, so the step is lr / (1 + eps)
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-6)
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)


def test_zero_grad_leaves_values_unchanged():
    p = Parameter(np.array([1.0, -2.0], np.float32))
    for opt in (make_optimizer("adam"), make_optimizer("sgd")):
        p.grad = np.zeros(2, np.float32)
        update_step([p], 0.5, opt)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_update_step_zeroes_grads():
    p = Parameter(np.array([1.0], np.float32))
    p.grad = np.array([0.3], np.float32)
    update_step([p], 0.1, make_optimizer("sgd"))
    assert p.grad is None
    assert p.data[0] == pytest.approx(1.0 - 0.03)


def test_unfreeze_restores_trainability():
    p = Parameter(np.array([1.0], np.float32), frozen=True)
    p.frozen = False
    backward(tsum(square(p)))
    update_step([p], 0.1, Adam())
    assert p.data[0] < 1.0


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        make_optimizer("rmsprop")


def test_seeded_parameter_trajectory_is_bit_identical():
    def trajectory(seed):
        r = np.random.default_rng(seed)
        w = Parameter(r.standard_normal((4, 3)).astype(np.float32))
        x = r.standard_normal((8, 4)).astype(np.float32)
        y = one_hot(r.integers(0, 3, 8), 3)
        opt = Adam()
        for _ in range(5):
            backward(cross_entropy(y, tempered_softmax(matmul(x, w), 1.0)))
            update_step([w], 0.01, opt)
        return w.data.tobytes()

    assert trajectory(7) == trajectory(7)
    assert trajectory(7) != trajectory(8)


def test_oracle_flags_a_wrong_gradient(rng):
    from hallucinet.tensor import _make

    def bad_square(x):
        return _make(x.data * x.data, (x,), lambda g: (1.9 * x.data * g,), "bad")

    assert check(bad_square, [rng.standard_normal((3, 3))], rng) > 1e-2
