import numpy as np
import pytest
from scipy import ndimage

from soe import autodiff as ad
from soe.autodiff import (
    SGD, BatchNormState, NonFiniteError, Parameter, ShapeError, Tape, Tensor, grad_check, lr_schedule,
    precision,
)

rng = np.random.default_rng(0)


def p64(shape, name="p", scale=1.0, seed=0):
    return Parameter(np.random.default_rng(seed).standard_normal(shape) * scale, name)


def conv_oracle(x, w, b):
    """Zero-padded 3x3x3 cross-correlation via scipy, one channel pair at a time."""
    B, C = x.shape[:2]
    O = w.shape[0]
    out = np.zeros((B, O) + x.shape[2:])
    for i in range(B):
        for o in range(O):
            for c in range(C):
                out[i, o] += ndimage.correlate(x[i, c], w[o, c], mode="constant", cval=0.0)
            out[i, o] += b[o]
    return out


# -- forward values -------------------------------------------------------------

def test_leaky_relu_values():
    out = ad.leaky_relu(Tensor([-1.0, 0.0, 2.0]), 0.2).numpy()
    np.testing.assert_allclose(out, [-0.2, 0.0, 2.0])


def test_frobenius_of_small_matrix():
    assert ad.frobenius_sq(Tensor([[1.0, 2.0], [0.0, 1.0]])).item() == 6.0


def test_conv_ones_kernel_center_is_27():
    x = Tensor(np.ones((1, 1, 3, 3, 3)))
    out = ad.conv3d(x, Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1))).numpy()
    assert out[0, 0, 1, 1, 1] == 27.0
    assert out[0, 0, 0, 0, 0] == 8.0


def test_conv_matches_scipy():
    x = rng.standard_normal((2, 3, 5, 4, 6))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    b = rng.standard_normal(4)
    with precision(np.float64):
        out = ad.conv3d(Tensor(x), Tensor(w), Tensor(b)).numpy()
    np.testing.assert_allclose(out, conv_oracle(x, w, b), atol=1e-10)


def test_conv_chunked_path_matches(monkeypatch):
    x = rng.standard_normal((5, 2, 4, 4, 4))
    w = Parameter(rng.standard_normal((3, 2, 3, 3, 3)), "w")
    b = Parameter(rng.standard_normal(3), "b")
    xt = Parameter(x, "x")

    def run():
        for t in (w, b, xt):
            t.grad = np.zeros_like(t.data)
        with Tape() as tape:
            out = ad.conv3d(xt, w, b)
            tape.backward(ad.sum(ad.mul(out, out)))
        return out.numpy(), w.grad.copy(), xt.grad.copy()

    whole = run()
    monkeypatch.setattr(ad, "_CONV_CHUNK_BYTES", 1)
    chunked = run()
    for a, c in zip(whole, chunked):
        np.testing.assert_allclose(a, c, rtol=1e-12)


def test_maxpool_values_and_tie_routing():
    x = np.zeros((1, 1, 2, 2, 2))
    x[0, 0, 1, 0, 1] = 3.0
    t = Parameter(x, "x")
    with Tape() as tape:
        out = ad.maxpool3d(t)
        tape.backward(ad.sum(out))
    assert out.numpy().item() == 3.0
    assert t.grad[0, 0, 1, 0, 1] == 1.0 and t.grad.sum() == 1.0
    tie = Parameter(np.ones((1, 1, 2, 2, 2)), "tie")
    with Tape() as tape:
        tape.backward(ad.sum(ad.maxpool3d(tie)))
    assert tie.grad[0, 0, 0, 0, 0] == 1.0 and tie.grad.sum() == 1.0


def test_maxpool_ceil_mode_on_odd_sizes():
    x = np.arange(3 * 2 * 1, dtype=float).reshape(1, 1, 3, 2, 1)
    out = ad.maxpool3d(Tensor(x)).numpy()
    assert out.shape == (1, 1, 2, 1, 1)
    np.testing.assert_array_equal(out.ravel(), [3.0, 5.0])
    with pytest.raises(ShapeError):
        ad.maxpool3d(Tensor(np.zeros((2, 2, 2))))


def test_grad_maxpool_odd():
    x = p64((1, 1, 3, 3, 1), "x", seed=3)
    _check(lambda: ad.frobenius_sq(ad.maxpool3d(x)), [x])


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_nonfinite_is_reported():
    with pytest.raises(NonFiniteError):
        ad.reciprocal(Tensor([0.0, 1.0]))


# -- tape semantics ---------------------------------------------------------------

def test_tape_records_in_order_and_replays_once():
    a = Parameter(np.array([2.0]), "a")
    with Tape() as tape:
        b = ad.mul(a, a)
        c = ad.add(b, a)
        loss = ad.sum(c)
        assert [n.op for n in tape.nodes] == ["mul", "add", "sum"]
        tape.backward(loss)
    assert a.grad.item() == 5.0  # d(a^2 + a) = 2a + 1
    assert len(tape) == 0


def test_no_tape_means_no_recording():
    a = Parameter(np.array([1.0]), "a")
    assert ad.mul(a, a).is_leaf


def test_gradients_accumulate():
    a = Parameter(np.array([1.0, 2.0]), "a")
    for _ in range(2):
        with Tape() as tape:
            tape.backward(ad.sum(ad.mul(a, 3.0)))
    np.testing.assert_array_equal(a.grad, [6.0, 6.0])


def test_backward_requires_scalar():
    a = Parameter(np.ones(2), "a")
    with Tape() as tape:
        with pytest.raises(ShapeError):
            tape.backward(ad.mul(a, a))


# -- gradient checks (float64 shadow mode) ----------------------------------------

def _check(f, params, tol=1e-6):
    with precision(np.float64):
        assert grad_check(f, params, eps=1e-5) < tol


def test_grad_elementwise():
    a, b = p64((3, 4), "a", seed=1), p64((4,), "b", seed=2)
    _check(lambda: ad.sum(ad.mul(ad.sub(a, b), ad.add(a, b))), [a, b])
    c = Parameter(np.random.default_rng(3).uniform(0.5, 2.0, (3,)), "c")
    _check(lambda: ad.sum(ad.reciprocal(c)), [c])
    _check(lambda: ad.sum(ad.mul(ad.leaky_relu(a, 0.2), a)), [a])
    _check(lambda: ad.mean(ad.neg(ad.mul(a, a)), axis=1).sum(), [a])


def test_grad_matmul_linear_reshape_transpose():
    a, b = p64((2, 3, 4), "a", seed=1), p64((4, 5), "b", seed=2)
    w, bias = p64((6, 8), "w", seed=3), p64((6,), "bias", seed=4)
    _check(lambda: ad.frobenius_sq(ad.matmul(a, b)), [a, b])
    x = p64((3, 8), "x", seed=5)
    _check(lambda: ad.frobenius_sq(ad.linear(x, w, bias)), [x, w, bias])
    _check(lambda: ad.frobenius_sq(ad.matmul(ad.transpose(a), ad.reshape(a, (2, 3, 4)))), [a])


def test_grad_conv3d():
    x = p64((2, 2, 4, 4, 4), "x", seed=1)
    w = p64((3, 2, 3, 3, 3), "w", scale=0.3, seed=2)
    b = p64((3,), "b", seed=3)
    _check(lambda: ad.frobenius_sq(ad.conv3d(x, w, b)), [x, w, b])


def test_grad_maxpool():
    x = p64((1, 2, 4, 4, 2), "x", seed=4)
    _check(lambda: ad.frobenius_sq(ad.maxpool3d(x)), [x])


@pytest.mark.parametrize("training", [True, False])
def test_grad_batchnorm(training):
    x = p64((3, 2, 2, 2, 2), "x", seed=5)
    g, b = p64((2,), "g", seed=6), p64((2,), "b", seed=7)
    proj = np.random.default_rng(8).standard_normal(x.shape)

    def f():
        state = BatchNormState(2)
        state.running_mean, state.running_var = np.array([0.1, -0.2]), np.array([1.5, 0.7])
        return ad.sum(ad.mul(ad.batchnorm3d(x, g, b, state, training), proj))

    _check(f, [x, g, b])


def test_grad_dropout_with_fixed_key():
    x = p64((4, 5), "x", seed=9)
    _check(lambda: ad.frobenius_sq(ad.dropout(x, 0.3, (1, 2, 3))), [x])


def test_grad_losses():
    z = p64((5, 2), "z", seed=10)
    _check(lambda: ad.softmax_cross_entropy(z, [0, 1, 1, 0, 1]), [z])
    y = p64((5,), "y", seed=11)
    _check(lambda: ad.mse(y, np.arange(5.0)), [y])


def test_grad_vn_relu():
    q, k = p64((4, 6, 3), "q", seed=12), p64((4, 6, 3), "k", seed=13)
    _check(lambda: ad.sum(ad.mul(ad.vn_relu(q, k), np.random.default_rng(0).standard_normal((4, 6, 3)))),
           [q, k])


def test_grad_check_catches_wrong_gradient(monkeypatch):
    a = p64((3,), "a")
    monkeypatch.setattr(ad, "_unbroadcast", lambda g, shape: 2 * g)
    with precision(np.float64):
        assert grad_check(lambda: ad.sum(ad.mul(a, a)), [a], eps=1e-5) > 0.1


# -- dropout and batchnorm state ----------------------------------------------------

def test_dropout_is_keyed():
    x = Tensor(np.ones((1000,)))
    a = ad.dropout(x, 0.5, (0, 1, 2)).numpy()
    assert np.array_equal(a, ad.dropout(x, 0.5, (0, 1, 2)).numpy())
    assert not np.array_equal(a, ad.dropout(x, 0.5, (0, 1, 3)).numpy())
    assert set(np.unique(a)) == {0.0, 2.0}
    assert abs(a.mean() - 1.0) < 0.1
    assert ad.dropout(x, 0.5, (0, 1, 2), training=False) is x


def test_batchnorm_running_stats():
    x = np.random.default_rng(1).standard_normal((4, 2, 2, 2, 2)) * 3 + 1
    st = BatchNormState(2)
    with precision(np.float64):
        out = ad.batchnorm3d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st, True).numpy()
    flat = x.transpose(1, 0, 2, 3, 4).reshape(2, -1)
    np.testing.assert_allclose(st.running_mean, 0.1 * flat.mean(1))
    np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * flat.var(1, ddof=1))
    np.testing.assert_allclose(out.transpose(1, 0, 2, 3, 4).reshape(2, -1).mean(1), 0, atol=1e-12)


# -- optimizer -------------------------------------------------------------------------

def test_sgd_momentum_two_steps():
    p = Parameter(np.array([0.0]), "p")
    opt = SGD([p], lr=1.0, momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    np.testing.assert_allclose(p.data, [-(1 + 1.9)])


def test_sgd_clipping():
    p = Parameter(np.array([0.0, 0.0]), "p")
    opt = SGD([p], lr=1.0, momentum=0.0, clip_norm=1.0)
    p.grad = np.array([3.0, 4.0])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.6, -0.8])
    assert opt.last_grad_norm == 5.0


def test_lr_schedule():
    assert lr_schedule(0, 1e-2, 10) == 1e-2
    assert lr_schedule(10, 1e-2, 10) == pytest.approx(1e-3)
    assert lr_schedule(5, 1e-2, 10, step=5) == pytest.approx(1e-2 * 10 ** -0.5)
    assert lr_schedule(7, 1e-2, 0) == 1e-2


def test_parameter_astype_and_precision_context():
    p = Parameter(np.zeros(3, dtype=np.float32), "p")
    assert p.astype(np.float64).data.dtype == np.float64
    with precision(np.float64):
        assert Tensor([1, 2]).data.dtype == np.float64
    assert Tensor([1, 2]).data.dtype == np.float32
