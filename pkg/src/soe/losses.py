"""Pretext and downstream objectives, plus evaluation metrics.

Vector features are row vectors: the equivariance target for features ``Z1``
under rotation ``R`` is ``Z1 @ R``. All losses are means over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .so3 import RotationMatrix

DEFAULT_LAMBDA = 0.01
DEFAULT_MU = 0.1
INV_EPS = 1e-6


class UndefinedMetricError(ValueError):
    pass


def _rotation_stack(R, batch: int | None) -> np.ndarray:
    if isinstance(R, RotationMatrix):
        m = R.m
    elif isinstance(R, (list, tuple)) and R and isinstance(R[0], RotationMatrix):
        m = np.stack([r.m for r in R])
    else:
        m = np.asarray(R, dtype=np.float64)
    if m.ndim == 3 and batch is not None and m.shape[0] != batch:
        raise ad.ShapeError(f"{m.shape[0]} rotations for a batch of {batch}")
    return m


def feature_rotation(volume_rotation: RotationMatrix) -> RotationMatrix:
    """Right-multiplier for row features matching ``volume.rotate(x, R)``.

    Rotating a volume by ``R`` moves content at ``c`` to ``R c``; a row vector
    ``z`` describing that content must become ``(R z^T)^T = z R^T``. Pairing
    the volume rotation with ``Z @ R`` instead is not a group action (it
    reverses the order of composition), so no non-zero map can satisfy it.
    """
    return volume_rotation.T


def so3_loss(Z1: Tensor, Z2: Tensor, R) -> Tensor:
    """||Z1 R - Z2||^2 + ||Z1 - Z2 R^T||^2, averaged over the batch.

    ``Z1``/``Z2`` are (d', 3) or (B, d', 3); ``R`` is one rotation or one per item.
    """
    if Z1.shape != Z2.shape or Z1.shape[-1] != 3:
        raise ad.ShapeError(f"so3_loss: Z1 {Z1.shape} vs Z2 {Z2.shape}")
    batch = Z1.shape[0] if Z1.ndim == 3 else 1
    m = _rotation_stack(R, batch if Z1.ndim == 3 else None)
    if m.ndim == 3 and Z1.ndim == 2:
        raise ad.ShapeError("a stack of rotations needs batched features")
    dt = np.result_type(Z1.data.dtype, Z2.data.dtype)
    Rt = Tensor(m, dtype=dt)
    RtT = Tensor(np.swapaxes(m, -1, -2), dtype=dt)
    term1 = ad.frobenius_sq(ad.sub(ad.matmul(Z1, Rt), Z2))
    term2 = ad.frobenius_sq(ad.sub(Z1, ad.matmul(Z2, RtT)))
    total = ad.add(term1, term2)
    return total if batch == 1 else ad.mul(total, 1.0 / batch)


def inverse_distance(f1: Tensor, f2: Tensor, eps: float = INV_EPS) -> Tensor:
    """Batch mean of 1 / (||f1 - f2||^2 + eps) over encoder feature vectors."""
    if f1.shape != f2.shape:
        raise ad.ShapeError(f"inverse_distance: f1 {f1.shape} vs f2 {f2.shape}")
    if f1.ndim == 1:
        f1, f2 = ad.reshape(f1, (1, -1)), ad.reshape(f2, (1, -1))
    d = ad.sub(f1, f2)
    sq = ad.sum(ad.mul(d, d), axis=1)
    return ad.mean(ad.reciprocal(ad.add(sq, eps)))


@dataclass
class PretextBatchLoss:
    l_so3: float
    l_inv: float
    l_comb: float
    lam: float
    tensor: Tensor | None = None

    def row(self) -> dict:
        return {"l_so3": self.l_so3, "l_inv": self.l_inv, "l_comb": self.l_comb}


def combined_loss(Z1: Tensor, Z2: Tensor, R, f1: Tensor, f2: Tensor,
                  lam: float = DEFAULT_LAMBDA, eps: float = INV_EPS) -> PretextBatchLoss:
    """Equivariance loss plus ``lam`` times the inverse squared encoder-feature distance."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    l_so3 = so3_loss(Z1, Z2, R)
    l_inv = inverse_distance(f1, f2, eps)
    total = ad.add(l_so3, ad.mul(l_inv, float(lam)))
    return PretextBatchLoss(float(l_so3.data), float(l_inv.data), float(total.data), float(lam), total)


@dataclass
class DownstreamLoss:
    task_loss: float
    rob_reg: float
    mu: float
    total: float
    tensor: Tensor | None = None


def task_loss(output: Tensor, target, task: str) -> Tensor:
    target = np.asarray(target)
    if task == "classify":
        if output.ndim != 2 or target.ndim != 1 or target.dtype.kind not in "iub":
            raise ValueError("classification needs (B, classes) logits and integer labels")
        return ad.softmax_cross_entropy(output, target)
    if task == "regress":
        if output.data.size != target.size:
            raise ValueError(f"regression output {output.shape} does not match {target.shape} targets")
        return ad.mse(output, target)
    raise ValueError(f"unknown task {task!r}")


def downstream_loss(output: Tensor, target, Z1: Tensor, Z2: Tensor, R, mu: float = DEFAULT_MU,
                    task: str = "classify") -> DownstreamLoss:
    """Task loss (cross-entropy or MSE) plus ``mu`` times the equivariance loss of the two views."""
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    tl = task_loss(output, target, task)
    rr = so3_loss(Z1, Z2, R)
    total = ad.add(tl, ad.mul(rr, float(mu)))
    return DownstreamLoss(float(tl.data), float(rr.data), float(mu), float(total.data), total)


# -- metrics -------------------------------------------------------------------

def _check_pair(preds, targets):
    preds, targets = np.asarray(preds), np.asarray(targets)
    if preds.shape != targets.shape:
        raise ValueError(f"predictions {preds.shape} and targets {targets.shape} differ in shape")
    if preds.size == 0:
        raise UndefinedMetricError("metrics of an empty set are undefined")
    return preds.ravel(), targets.ravel()


def balanced_accuracy(preds, targets) -> float:
    """Mean recall over the classes present in ``targets``."""
    p, t = _check_pair(preds, targets)
    return float(np.mean([np.mean(p[t == c] == c) for c in np.unique(t)]))


def f1_score(preds, targets, positive: int = 1) -> float:
    p, t = _check_pair(preds, targets)
    tp = np.sum((p == positive) & (t == positive))
    fp = np.sum((p == positive) & (t != positive))
    fn = np.sum((p != positive) & (t == positive))
    if tp == 0:
        return 0.0
    return float(2 * tp / (2 * tp + fp + fn))


def r2_score(preds, targets) -> float:
    p, t = _check_pair(preds, targets)
    p, t = p.astype(np.float64), t.astype(np.float64)
    ss_tot = np.sum((t - t.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedMetricError("R2 is undefined when all targets are equal")
    return float(1.0 - np.sum((t - p) ** 2) / ss_tot)


def mean_absolute_error(preds, targets) -> float:
    p, t = _check_pair(preds, targets)
    return float(np.mean(np.abs(p.astype(np.float64) - t.astype(np.float64))))


def metrics(preds, targets, task: str) -> dict[str, float]:
    if task == "classify":
        _, t = _check_pair(preds, targets)
        if not set(np.unique(t)) <= {0, 1}:
            raise ValueError("balanced accuracy and F1 here expect binary 0/1 labels")
        return {"bacc": balanced_accuracy(preds, targets), "f1": f1_score(preds, targets)}
    if task == "regress":
        return {"r2": r2_score(preds, targets), "mae": mean_absolute_error(preds, targets)}
    raise ValueError(f"unknown task {task!r}")
