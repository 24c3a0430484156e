import numpy as np
import pytest

from soe import autodiff as ad
from soe.autodiff import Tensor
from soe.encoder import Encoder, EncoderConfig, EncoderError, build, conv_param_count, forward
from soe.so3 import sample_uniform
from soe.vn import VNConfig, VNModule, lift, vn_forward, vn_linear, vn_nonlinearity


def enumerate_count(enc):
    return sum(p.data.size for p in enc.parameters())


def test_default_parameter_count():
    enc = build(EncoderConfig())
    assert enumerate_count(enc) == 97_584
    assert conv_param_count([16, 32, 64, 16]) == 97_584
    assert enc.num_parameters() == 97_584


def test_per_block_counts():
    enc = build(EncoderConfig())
    per_block = [sum(p.data.size for p in blk.parameters()) for blk in enc.blocks]
    assert per_block == [480, 13_920, 55_488, 27_696]


def test_unit_channels_count():
    enc = build(EncoderConfig(channels=[1, 1, 1, 1], input_dim=16))
    assert enumerate_count(enc) == 120 == conv_param_count([1, 1, 1, 1])


@pytest.mark.parametrize("n,d", [(64, 1024), (32, 128), (16, 16), (8, 16)])
def test_feature_dims(n, d):
    enc = build(EncoderConfig(input_dim=n))
    assert enc.cfg.feature_dim == d
    if n <= 32:
        assert forward(enc, np.zeros((2, n, n, n), np.float32), "eval").shape == (2, d)


def test_parameter_names_unique_and_stable():
    names = list(build(EncoderConfig(input_dim=16)).named_parameters())
    assert len(names) == len(set(names)) == 16
    assert names[0] == "encoder.block1.conv.weight"
    assert "encoder.block4.bn.bias" in names


def test_init_properties():
    enc = build(EncoderConfig(input_dim=16), seed=3)
    blk = enc.blocks[1]
    bound = np.sqrt(2 / (1 + 0.2 ** 2)) * np.sqrt(3 / (16 * 27))
    assert np.abs(blk.conv_w.data).max() <= bound
    assert np.abs(blk.conv_w.data).max() > 0.9 * bound
    np.testing.assert_array_equal(blk.bn_w.data, 1)
    np.testing.assert_array_equal(blk.bn_b.data, 0)


def test_zero_input_eval_is_input_independent_and_deterministic():
    enc = build(EncoderConfig(input_dim=16))
    a = forward(enc, np.zeros((1, 16, 16, 16)), "eval").numpy()
    b = forward(enc, np.zeros((3, 16, 16, 16)), "eval").numpy()
    np.testing.assert_array_equal(b, np.repeat(a, 3, axis=0))
    x = np.random.default_rng(0).random((2, 16, 16, 16))
    np.testing.assert_array_equal(forward(enc, x, "eval").numpy(), forward(enc, x, "eval").numpy())


def test_train_mode_dropout_changes_with_step():
    enc = build(EncoderConfig(input_dim=16))
    enc.eval()
    x = np.random.default_rng(0).random((4, 16, 16, 16))
    a = forward(enc, x, "train").numpy()
    b = forward(enc, x, "train").numpy()
    assert not np.array_equal(a, b)
    assert not enc.training  # mode override is per call


def test_bad_configs():
    with pytest.raises(EncoderError):
        build(EncoderConfig(channels=[16, 32, 64]))
    with pytest.raises(EncoderError):
        build(EncoderConfig(dropout_p=1.0))
    enc = build(EncoderConfig(input_dim=16))
    with pytest.raises(EncoderError):
        forward(enc, np.zeros((1, 8, 8, 8)))


def test_same_seed_same_weights():
    a, b = build(EncoderConfig(input_dim=16), 5), build(EncoderConfig(input_dim=16), 5)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.data.tobytes() == q.data.tobytes()


# -- vector neurons -----------------------------------------------------------------

def test_lift_identity_and_zero():
    s = Tensor(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(lift(s, Tensor(np.eye(3)), None).numpy(), [[[1, 2, 3]]])
    assert not lift(Tensor(np.zeros((2, 3))), Tensor(np.ones((6, 3))), Tensor(np.zeros(6))).numpy().any()


def test_lift_matches_matrix_product():
    rng = np.random.default_rng(0)
    s, w, b = rng.standard_normal((2, 5)), rng.standard_normal((12, 5)), rng.standard_normal(12)
    with ad.precision(np.float64):
        out = lift(Tensor(s), Tensor(w), Tensor(b)).numpy()
    for i in range(2):
        for r in range(4):
            for k in range(3):
                assert out[i, r, k] == pytest.approx(w[3 * r + k] @ s[i] + b[3 * r + k], abs=1e-12)


def test_vn_linear_examples():
    V = Tensor(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    np.testing.assert_array_equal(vn_linear(V, Tensor(np.eye(2))).numpy(), V.numpy())
    np.testing.assert_array_equal(vn_linear(V, Tensor([[1.0, 1.0]])).numpy(), [[5, 7, 9]])


def test_vn_relu_examples():
    q = Tensor(np.array([[1.0, 0, 0]]))
    np.testing.assert_array_equal(ad.vn_relu(q, Tensor([[0.0, 1, 0]])).numpy(), [[1, 0, 0]])
    np.testing.assert_array_equal(ad.vn_relu(q, Tensor([[-1.0, 0, 0]])).numpy(), [[0, 0, 0]])
    # vanishing direction passes q through
    np.testing.assert_array_equal(ad.vn_relu(q, Tensor([[0.0, 0, 0]])).numpy(), [[1, 0, 0]])


def vn_oracle(vn: VNModule, s: np.ndarray) -> np.ndarray:
    """Explicit float64 re-implementation of lift -> layers -> output map."""
    V = (s @ vn.lift_w.data.T.astype(float) + vn.lift_b.data).reshape(len(s), -1, 3)
    for layer in vn.layers:
        V = layer.W.data.astype(float) @ V
        q, k = layer.U.data.astype(float) @ V, layer.K.data.astype(float) @ V
        dot = (q * k).sum(-1, keepdims=True)
        kk = (k * k).sum(-1, keepdims=True)
        V = np.where((dot < 0) & (kk >= 1e-12), q - dot / np.where(kk > 0, kk, 1) * k, q)
    return vn.out_w.data.astype(float) @ V


def test_vn_forward_matches_oracle():
    vn = VNModule(VNConfig(d_in=10, d_lift=6, n_vn_layers=2, d_out=4), seed=1)
    s = np.random.default_rng(2).standard_normal((3, 10))
    out = vn_forward(vn, Tensor(s)).numpy()
    assert out.shape == (3, 4, 3)
    np.testing.assert_allclose(out, vn_oracle(vn, s), rtol=1e-4, atol=1e-5)


def test_vn_zero_input_gives_zero():
    vn = VNModule(VNConfig(d_in=5, d_lift=4, n_vn_layers=2, d_out=3))
    assert not vn_forward(vn, Tensor(np.zeros((2, 5)))).numpy().any()


def test_vn_passthrough_without_layers():
    vn = VNModule(VNConfig(d_in=6, d_lift=2, n_vn_layers=0, d_out=2))
    vn.lift_w.data[:] = np.eye(6)
    vn.out_w.data[:] = np.eye(2)
    s = np.arange(12.0).reshape(2, 6)
    np.testing.assert_array_equal(vn_forward(vn, Tensor(s)).numpy(), s.reshape(2, 2, 3))


def test_vn_stack_equivariance_f32():
    rng = np.random.default_rng(0)
    vn = VNModule(VNConfig(d_in=8, d_lift=16, n_vn_layers=2, d_out=8), seed=0)
    worst = 0.0
    for _ in range(100):
        V = rng.standard_normal((2, 16, 3)).astype(np.float32)
        R = sample_uniform(rng)[0].m.astype(np.float32)
        a = vn.stack(Tensor(V @ R)).numpy()
        b = vn.stack(Tensor(V)).numpy() @ R
        worst = max(worst, np.abs(a - b).max())
    assert worst < 1e-5


@pytest.mark.parametrize("op", ["linear", "nonlinearity"])
def test_vn_layers_commute_with_rotation(op):
    rng = np.random.default_rng(1)
    V = rng.standard_normal((5, 3))
    R = sample_uniform(rng)[0].m
    with ad.precision(np.float64):
        if op == "linear":
            W = Tensor(rng.standard_normal((4, 5)))
            f = lambda X: vn_linear(Tensor(X), W).numpy()
        else:
            U, K = Tensor(rng.standard_normal((5, 5))), Tensor(rng.standard_normal((5, 5)))
            f = lambda X: vn_nonlinearity(Tensor(X), U, K).numpy()
        np.testing.assert_allclose(f(V @ R), f(V) @ R, atol=1e-12)


def test_vn_parameter_names():
    names = list(VNModule(VNConfig(d_in=4, d_lift=2, n_vn_layers=2, d_out=2)).named_parameters())
    assert names == ["vn.lift.weight", "vn.lift.bias", "vn.out.W",
                     "vn.layer1.W", "vn.layer1.U", "vn.layer1.K",
                     "vn.layer2.W", "vn.layer2.U", "vn.layer2.K"]
