"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

The lines are collected in ``conftest.ACCEPTANCE_LINES`` and printed in the
terminal summary, so ``pytest tests/test_acceptance.py`` ends with a
one-line verdict per criterion. Criteria 7-10 share session fixtures: three
seeded desk-scale pretraining runs, their fine-tuning arms, and a repeat of
seed 0 for the determinism check.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from soe import autodiff as ad
from soe import experiments as X
from soe import losses
from soe import train as T
from soe.autodiff import BatchNormState, Parameter, grad_check, precision
from soe.encoder import Encoder, EncoderConfig
from soe.so3 import IDENTITY, AxisAngle, from_axis_angle, right_angle_rotations, sample_uniform
from soe.vn import VNConfig, VNModule
from soe.volume import Volume, centered_coords, rotate

SEEDS = (0, 1, 2)


def record(num, name, ok, detail):
    line = f"[criterion {num:2d}] {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# -- 1 -------------------------------------------------------------------------

def test_c01_parameter_count():
    t = time.perf_counter()
    enc = Encoder(EncoderConfig())
    enumerated = sum(p.data.size for p in enc.parameters())
    chans = [1, 16, 32, 64, 16]
    closed = sum(ci * co * 27 + co + 2 * co for ci, co in zip(chans, chans[1:]))
    dt = time.perf_counter() - t
    ok = enumerated == closed == 97_584 and dt < 1.0
    assert record(1, "parameter count", ok, f"enumerated {enumerated}, closed form {closed}, {dt:.2f}s")


# -- 2 -------------------------------------------------------------------------

def index_oracle(data, R):
    """out[c] = in[R^T c] on centered integer coordinates, by fancy indexing."""
    n = data.shape[0]
    half = (n - 1) / 2
    idx = np.indices(data.shape).reshape(3, -1).T - half
    src = np.rint(idx @ R + half).astype(int)  # rows of (R^T c)^T = c^T R
    return data[src[:, 0], src[:, 1], src[:, 2]].reshape(data.shape)


def test_c02_right_angle_rotations_bitwise():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    rots = right_angle_rotations()
    bad = 0
    for n in (8, 9):
        v = Volume(rng.standard_normal((n, n, n)).astype(np.float32))
        for r in rots:
            out = rotate(v, r).data
            bad += out.tobytes() != index_oracle(v.data, r.m.astype(int)).tobytes()
        bad += rotate(v, IDENTITY).data.tobytes() != v.data.tobytes()
    dt = time.perf_counter() - t
    ok = len(rots) == 24 and bad == 0 and dt < 10
    assert record(2, "right-angle rotation oracle", ok,
                  f"{len(rots)} orientations x 2 sizes + identity, {bad} mismatches, {dt:.2f}s")


# -- 3 -------------------------------------------------------------------------

def blob_volume(n, rng):
    c = centered_coords(n)
    out = np.zeros((n, n, n))
    for _ in range(3):
        mu = rng.uniform(-n / 6, n / 6, 3)
        out += rng.uniform(0.5, 1.0) * np.exp(-np.sum((c - mu) ** 2, axis=-1) / (2 * (n / 7) ** 2))
    return Volume(out)


def test_c03_round_trip_rotation():
    t = time.perf_counter()
    rng = np.random.default_rng(3)
    n = 32
    c = centered_coords(n)
    # the inscribed ball maps into itself under any rotation, so it never samples the zero fill
    interior = np.linalg.norm(c, axis=-1) <= (n - 1) / 2 - 1
    worst = 0.0
    for _ in range(20):
        v = blob_volume(n, rng)
        R, _ = sample_uniform(rng)
        back = rotate(rotate(v, R), R.T).data
        mae = np.abs(back[interior] - v.data[interior]).mean() / np.abs(v.data).max()
        worst = max(worst, mae)
    dt = time.perf_counter() - t
    ok = worst < 0.02 and dt < 30
    assert record(3, "round-trip rotation", ok, f"worst interior MAE {100 * worst:.3f}% of max, {dt:.1f}s")


# -- 4 -------------------------------------------------------------------------

def test_c04_vn_stack_equivariance():
    t = time.perf_counter()
    rng = np.random.default_rng(4)
    vn = VNModule(VNConfig(d_in=16, d_lift=128, n_vn_layers=2, d_out=128), seed=0)
    worst = 0.0
    for _ in range(100):
        V = rng.standard_normal((1, 128, 3)).astype(np.float32)
        R = sample_uniform(rng)[0].m.astype(np.float32)
        a = vn.stack(ad.Tensor(V @ R)).numpy()
        b = vn.stack(ad.Tensor(V)).numpy() @ R
        worst = max(worst, float(np.abs(a - b).max()))
    dt = time.perf_counter() - t
    ok = worst < 1e-5 and dt < 5
    assert record(4, "VN stack equivariance", ok, f"max entry error {worst:.2e} (f32), {dt:.2f}s")


# -- 5 -------------------------------------------------------------------------

def test_c05_loss_golden_values():
    t = time.perf_counter()
    rz = from_axis_angle(AxisAngle((0, 0, 1), np.pi / 2))
    with precision(np.float64):
        Z = ad.Tensor(np.random.default_rng(5).standard_normal((4, 3)))
        a = losses.so3_loss(Z, Z, IDENTITY).item()
        b = losses.so3_loss(ad.Tensor([[1.0, 0, 0]]), ad.Tensor([[0, 1.0, 0]]), rz).item()
        c = losses.so3_loss(Z, ad.Tensor(Z.numpy() @ rz.m), rz).item()
        f = ad.Tensor(np.ones((1, 5)))
        lam = 0.01
        comb = losses.combined_loss(Z, Z, IDENTITY, f, f, lam=lam, eps=1e-6)
    dt = time.perf_counter() - t
    ok = (a, b, c) == (0.0, 8.0, 0.0) and comb.l_inv == 1e6 and comb.l_comb == lam * 1e6 and dt < 1
    assert record(5, "loss golden values", ok,
                  f"so3 examples ({a}, {b}, {c}); l_inv at f1=f2 {comb.l_inv}, l_comb {comb.l_comb}, {dt:.2f}s")


# -- 6 -------------------------------------------------------------------------

def _f32(shape, seed, scale=1.0, low=None):
    rng = np.random.default_rng(seed)
    a = rng.uniform(low, 2.0, shape) if low is not None else rng.standard_normal(shape) * scale
    return Parameter(a.astype(np.float32), f"p{seed}")


def primitive_cases():
    a, b = _f32((3, 4), 1), _f32((4,), 2)
    c = _f32((3,), 3, low=0.5)
    m1, m2 = _f32((2, 3, 4), 4), _f32((4, 5), 5)
    x, w, bias = _f32((3, 8), 6), _f32((6, 8), 7), _f32((6,), 8)
    vol = _f32((2, 2, 4, 4, 4), 9)
    k, kb = _f32((3, 2, 3, 3, 3), 10, 0.3), _f32((3,), 11)
    bx, bg, bb = _f32((3, 2, 2, 2, 2), 12), _f32((2,), 13), _f32((2,), 14)
    proj = np.random.default_rng(15).standard_normal(bx.shape).astype(np.float32)
    logits, y = _f32((5, 2), 16), _f32((5,), 17)
    q, kk = _f32((4, 6, 3), 18), _f32((4, 6, 3), 19)
    vproj = np.random.default_rng(20).standard_normal((4, 6, 3)).astype(np.float32)

    def bn(training):
        def f():
            st = BatchNormState(2)
            st.running_mean, st.running_var = np.array([0.1, -0.2]), np.array([1.5, 0.7])
            return ad.sum(ad.mul(ad.batchnorm3d(bx, bg, bb, st, training), proj))
        return f

    return {
        "add/sub/mul": (lambda: ad.sum(ad.mul(ad.sub(a, b), ad.add(a, b))), [a, b]),
        "neg/mean": (lambda: ad.sum(ad.mean(ad.neg(ad.mul(a, a)), axis=1)), [a]),
        "reciprocal": (lambda: ad.sum(ad.reciprocal(c)), [c]),
        "leaky_relu": (lambda: ad.sum(ad.mul(ad.leaky_relu(a, 0.2), a)), [a]),
        "matmul/frobenius": (lambda: ad.frobenius_sq(ad.matmul(m1, m2)), [m1, m2]),
        "transpose/reshape": (lambda: ad.frobenius_sq(ad.matmul(ad.transpose(m1), ad.reshape(m1, (2, 3, 4)))),
                              [m1]),
        "linear": (lambda: ad.frobenius_sq(ad.linear(x, w, bias)), [x, w, bias]),
        "conv3d": (lambda: ad.frobenius_sq(ad.conv3d(vol, k, kb)), [vol, k, kb]),
        "maxpool3d": (lambda: ad.frobenius_sq(ad.maxpool3d(vol)), [vol]),
        "batchnorm3d (train)": (bn(True), [bx, bg, bb]),
        "batchnorm3d (eval)": (bn(False), [bx, bg, bb]),
        "dropout": (lambda: ad.frobenius_sq(ad.dropout(x, 0.3, (1, 2, 3))), [x]),
        "softmax_cross_entropy": (lambda: ad.softmax_cross_entropy(logits, [0, 1, 1, 0, 1]), [logits]),
        "mse": (lambda: ad.mse(y, np.arange(5.0, dtype=np.float32)), [y]),
        "vn_relu": (lambda: ad.sum(ad.mul(ad.vn_relu(q, kk), vproj)), [q, kk]),
    }


def test_c06_gradient_checks():
    t = time.perf_counter()
    prim = {name: grad_check(f, ps, eps=1e-5, fd_dtype=np.float64) for name, (f, ps) in primitive_cases().items()}
    worst_name = max(prim, key=prim.get)
    full = T.full_gradcheck(dim=8, seed=0, n_samples=50, dtype=np.float32)
    dt = time.perf_counter() - t
    ok = prim[worst_name] < 1e-3 and full < 1e-2 and dt < 300
    assert record(6, "gradient checks", ok,
                  f"{len(prim)} primitives, worst {worst_name} {prim[worst_name]:.1e} (< 1e-3); "
                  f"full loss through encoder(8^3)+VN {full:.1e} (< 1e-2, f32, 50 coords), {dt:.0f}s")


# -- 7-10: desk-scale experiments --------------------------------------------------

@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t = time.perf_counter()
    runs = [X.pretrain_seed(s, out_dir=root / f"seed{s}") for s in SEEDS]
    return root, runs, time.perf_counter() - t


@pytest.fixture(scope="session")
def desk_arms(desk_runs):
    root, runs, _ = desk_runs
    t = time.perf_counter()
    arms = [X.compare_arms(r, out_root=root / f"seed{r.seed}") for r in runs]
    return arms, time.perf_counter() - t


def test_c07_equivariance_learning(desk_runs):
    _, runs, dt = desk_runs
    parts = [f"seed {r.seed}: E {r.e_init:.3f} -> {r.e_final:.3f} ({100 * r.reduction:+.0f}% reduction)"
             for r in runs]
    ok = all(r.reduction >= 0.5 for r in runs) and dt <= 30 * 60
    assert record(7, "equivariance learning", ok, "; ".join(parts) + f"; {dt / 60:.1f} min")


def test_c08_pretraining_helps_classification(desk_arms):
    arms, dt = desk_arms
    wins = sum(a["soe"] >= a["scratch"] for a in arms)
    parts = [f"seed {s}: SOE {a['soe']:.3f} vs scratch {a['scratch']:.3f}" for s, a in zip(SEEDS, arms)]
    ok = wins >= 2 and dt <= 60 * 60
    assert record(8, "SOE >= scratch BACC", ok, "; ".join(parts) + f"; {wins}/3 wins, {dt / 60:.1f} min")


def test_c09_robustness_grid(desk_runs):
    _, runs, _ = desk_runs
    t = time.perf_counter()
    grids = [X.grid_seed(r) for r in runs]
    avg = T.RobustnessGrid.average(grids)
    dt = time.perf_counter() - t
    cells = [c for c in avg.cells if c.metric == "bacc"]
    positive = sum(c.pct_increase > 0 for c in cells)
    detail = ", ".join(f"{c.train_condition}/{c.eval_condition} {c.pct_increase:+.1f}%" for c in cells)
    ok = avg.complete() and len(cells) == 6 and positive * 2 > len(cells) and dt <= 2 * 3600
    assert record(9, "robustness grid", ok, f"{positive}/{len(cells)} BACC cells positive ({detail}); "
                                             f"{dt / 60:.1f} min")


def test_c10_determinism(desk_runs, desk_arms, tmp_path):
    root, runs, _ = desk_runs
    first = runs[0]
    again = X.pretrain_seed(first.seed, out_dir=tmp_path / f"seed{first.seed}")
    X.compare_arms(again, out_root=tmp_path / f"seed{first.seed}")
    names = ["pretrain_metrics.csv", "soe/finetune_metrics.csv", "scratch/finetune_metrics.csv"]
    same = [(root / f"seed{first.seed}" / n).read_bytes() == (tmp_path / f"seed{first.seed}" / n).read_bytes()
            for n in names]
    same.append(again.e_final == first.e_final and again.pretrained == first.pretrained)
    ok = all(same)
    assert record(10, "determinism", ok, f"seed {first.seed} rerun: {sum(same)}/{len(same)} artifacts "
                                         "bitwise identical (3 metric CSVs + checkpoint/E)")
