"""Pretext pretraining, downstream fine-tuning, evaluation and the rotation-robustness grid."""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Parameter, Tape, Tensor
from .checkpoint import Checkpoint
from .config import Config
from .encoder import Encoder, EncoderConfig, Module
from .fileio import atomic_write
from .so3 import IDENTITY, RotationMatrix, sample_right_angle, sample_uniform
from .synth import Phantom
from .vn import VNConfig, VNModule
from .volume import rotate_array

log = logging.getLogger(__name__)

CONDITIONS = ("none", "mild", "right-angle")
MILD_RANGE = (np.deg2rad(15.0), np.deg2rad(45.0))
LOG_COLUMNS = ("phase", "epoch", "lr", "l_so3", "l_inv", "l_comb", "task_loss", "rob_reg",
               "bacc", "f1", "r2", "mae", "val_score")


class TrainingError(RuntimeError):
    pass


class DegenerateConfigWarning(UserWarning):
    pass


# -- model ---------------------------------------------------------------------

def encoder_config(cfg: Config) -> EncoderConfig:
    return EncoderConfig(list(cfg["encoder.channels"]), cfg["encoder.input_dim"],
                         cfg["encoder.dropout_p"], cfg["encoder.slope"])


def vn_config(cfg: Config) -> VNConfig:
    return VNConfig(encoder_config(cfg).feature_dim, cfg["vn.d_lift"], cfg["vn.n_vn_layers"],
                    cfg["vn.d_out"])


class SOEModel(Module):
    """Encoder f, vector-neuron module VN, and an optional linear prediction head on f."""

    def __init__(self, cfg: Config, seed: int = 0, head_outputs: int | None = None):
        self.encoder = Encoder(encoder_config(cfg), seed)
        self.vn = VNModule(vn_config(cfg), seed + 1)
        self.head_w = self.head_b = None
        self.target_mean, self.target_std = 0.0, 1.0
        if head_outputs is not None:
            self.attach_head(head_outputs, seed + 2)

    def attach_head(self, outputs: int, seed: int):
        d = self.encoder.cfg.feature_dim
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(d)
        self.head_w = Parameter(rng.uniform(-bound, bound, (outputs, d)).astype(np.float32), "head.weight")
        self.head_b = Parameter(np.zeros(outputs, np.float32), "head.bias")

    def children(self):
        return iter((("encoder", self.encoder), ("vn", self.vn)))

    def own_parameters(self):
        return [p for p in (self.head_w, self.head_b) if p is not None]

    def features(self, x) -> tuple[Tensor, Tensor]:
        f = self.encoder(x)
        return f, self.vn(f)

    def head(self, f: Tensor) -> Tensor:
        return ad.linear(f, self.head_w, self.head_b)

    # checkpoint conversion
    def to_checkpoint(self) -> Checkpoint:
        params = {p.name: p.data.astype(np.float32).copy() for p in self.parameters()}
        stats = {}
        for name, st in self.batchnorm_states().items():
            stats[f"{name}.running_mean"] = st.running_mean.astype(np.float32)
            stats[f"{name}.running_var"] = st.running_var.astype(np.float32)
        if self.head_w is not None:
            stats["head.target_mean"] = np.array([self.target_mean], np.float32)
            stats["head.target_std"] = np.array([self.target_std], np.float32)
        return Checkpoint(params, stats)

    def load_checkpoint(self, ckpt: Checkpoint, strict: bool = True):
        if "head.weight" in ckpt.params and self.head_w is None:
            self.attach_head(ckpt.params["head.weight"].shape[0], 0)
        named = self.named_parameters()
        for name, p in named.items():
            if name not in ckpt.params:
                if strict:
                    raise KeyError(f"checkpoint lacks parameter {name!r}")
                continue
            if ckpt.params[name].shape != p.data.shape:
                raise ValueError(f"{name}: checkpoint shape {ckpt.params[name].shape} != model {p.data.shape}")
            p.data = ckpt.params[name].astype(p.data.dtype).copy()
        for name, st in self.batchnorm_states().items():
            if f"{name}.running_mean" in ckpt.stats:
                st.running_mean = ckpt.stats[f"{name}.running_mean"].astype(np.float64)
                st.running_var = ckpt.stats[f"{name}.running_var"].astype(np.float64)
        if "head.target_mean" in ckpt.stats:
            self.target_mean = float(ckpt.stats["head.target_mean"][0])
            self.target_std = float(ckpt.stats["head.target_std"][0])
        return self


def model_from_checkpoint(cfg: Config, ckpt: Checkpoint) -> SOEModel:
    return SOEModel(cfg).load_checkpoint(ckpt, strict=False)


# -- rotations -----------------------------------------------------------------

def sample_condition(rng: np.random.Generator, condition: str) -> RotationMatrix:
    """Rotation for one item under an augmentation/evaluation condition."""
    if condition == "none":
        return IDENTITY
    if condition == "mild":
        return sample_uniform(rng, MILD_RANGE)[0]
    if condition == "right-angle":
        return sample_right_angle(rng)
    raise ValueError(f"unknown rotation condition {condition!r}")


def _rotate_stack(x: np.ndarray, rots: Sequence[RotationMatrix]) -> np.ndarray:
    return np.stack([rotate_array(v, r) for v, r in zip(x, rots)])


def _stack(items: Sequence[Phantom]) -> np.ndarray:
    return np.stack([p.volume.data for p in items])


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# -- logging -------------------------------------------------------------------

@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row):
        self.rows.append({k: float(v) if isinstance(v, (float, np.floating)) else v for k, v in row.items()})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow(["" if r.get(c) is None else (repr(float(r[c])) if isinstance(r[c], float) else r[c])
                        for c in LOG_COLUMNS])
        return buf.getvalue()

    def write(self, path):
        atomic_write(path, self.to_csv())


def _abort(phase: str, epoch: int, batch: int, what) -> TrainingError:
    return TrainingError(f"{phase}: non-finite loss ({what}) at epoch {epoch}, batch {batch}; "
                         "try a smaller learning rate or a larger loss.eps")


def _check_loss(value: float, phase: str, epoch: int, batch: int):
    if not np.isfinite(value):
        raise _abort(phase, epoch, batch, value)


def _clip(cfg: Config) -> float | None:
    return cfg["train.grad_clip"] or None


# -- pretext -------------------------------------------------------------------

def _pretext_batch(model: SOEModel, x1, rng, angle_range, lam, eps):
    rots = [sample_uniform(rng, angle_range)[0] for _ in range(len(x1))]
    x2 = _rotate_stack(x1, rots)
    f1, Z1 = model.features(x1)
    f2, Z2 = model.features(x2)
    feat_rots = [losses.feature_rotation(r) for r in rots]
    return losses.combined_loss(Z1, Z2, feat_rots, f1, f2, lam, eps)


def pretrain(cfg: Config, train: Sequence[Phantom], val: Sequence[Phantom] = (),
             batch_size: int | None = None, epochs: int | None = None,
             out_dir=None, on_epoch=None) -> tuple[Checkpoint, MetricsLog]:
    """Self-supervised pretraining of encoder + VN on the combined equivariance objective.

    Each item gets its own random rotation per step; the best checkpoint by
    validation ``l_comb`` (or the last one, without validation data) is returned.
    ``on_epoch(epoch, model)`` is called after every epoch.
    """
    seed = cfg["train.seed"]
    epochs = cfg["train.pretrain_epochs"] if epochs is None else epochs
    batch_size = batch_size or cfg["train.batch_size"]
    lam, eps = cfg["loss.lambda"], cfg["loss.eps"]
    angle_range = (np.deg2rad(cfg["train.angle_min_deg"]), np.deg2rad(cfg["train.angle_max_deg"]))
    if angle_range[1] == 0.0:
        warnings.warn("rotation range is [0, 0]: the equivariance loss is identically zero and "
                      "training only pushes features apart up to the eps ceiling",
                      DegenerateConfigWarning, stacklevel=2)

    model = SOEModel(cfg, seed)
    best = model.to_checkpoint()
    history = MetricsLog()
    if epochs == 0 or not train:
        return best, history

    params = model.parameters()
    opt = ad.SGD(params, cfg["train.pretrain_lr"], cfg["train.momentum"], _clip(cfg))
    per_decade = cfg["train.lr_epochs_per_decade"] or epochs
    x_train = _stack(train)
    x_val = _stack(val) if val else None
    best_score = np.inf

    for epoch in range(epochs):
        opt.lr = ad.lr_schedule(epoch, cfg["train.pretrain_lr"], per_decade)
        rng = np.random.default_rng([seed, 1, epoch])
        model.train()
        sums = np.zeros(3)
        for b, idx in enumerate(_batches(len(x_train), batch_size, rng)):
            opt.zero_grad()
            with Tape() as tape:
                try:
                    loss = _pretext_batch(model, x_train[idx], rng, angle_range, lam, eps)
                except ad.NonFiniteError as exc:
                    raise _abort("pretrain", epoch, b, exc) from exc
                _check_loss(loss.l_comb, "pretrain", epoch, b)
                tape.backward(loss.tensor)
            opt.step()
            sums += np.array([loss.l_so3, loss.l_inv, loss.l_comb]) * len(idx)
        sums /= len(x_train)
        val_score = None
        if x_val is not None:
            val_score = pretext_loss(model, x_val, cfg, seed=cfg["train.eval_seed"])["l_comb"]
        row = dict(phase="pretrain", epoch=epoch, lr=opt.lr, l_so3=sums[0], l_inv=sums[1],
                   l_comb=sums[2], val_score=val_score)
        history.add(**row)
        log.info("pretrain epoch %d: l_so3=%.4g l_inv=%.4g l_comb=%.4g val=%s",
                 epoch, sums[0], sums[1], sums[2], val_score)
        score = val_score if val_score is not None else sums[2]
        if x_val is None or score < best_score:
            best_score = score
            best = model.to_checkpoint()
        if on_epoch is not None:
            on_epoch(epoch, model)

    if out_dir is not None:
        _save_run(out_dir, cfg, best, history, "pretrain")
    return best, history


def pretext_loss(model: SOEModel, x: np.ndarray, cfg: Config, seed: int,
                 batch_size: int = 64) -> dict[str, float]:
    """Eval-mode mean pretext losses with rotations drawn from ``seed``."""
    angle_range = (np.deg2rad(cfg["train.angle_min_deg"]), np.deg2rad(cfg["train.angle_max_deg"]))
    rng = np.random.default_rng([seed, 2])
    model.eval()
    tot = np.zeros(3)
    for idx in _batches(len(x), batch_size, None):
        l = _pretext_batch(model, x[idx], rng, angle_range, cfg["loss.lambda"], cfg["loss.eps"])
        tot += np.array([l.l_so3, l.l_inv, l.l_comb]) * len(idx)
    tot /= len(x)
    return {"l_so3": tot[0], "l_inv": tot[1], "l_comb": tot[2]}


def equivariance_error(model: SOEModel, x: np.ndarray, rotations: Sequence[RotationMatrix],
                       batch_size: int = 64) -> float:
    """Relative equivariance error of VN(f(.)) in eval mode.

    sum ||Z(rotate(x, R)) - Z(x) R_f||^2 / sum ||Z(x) R_f||^2 with R_f the
    matching feature rotation.
    """
    model.eval()
    num = den = 0.0
    for idx in _batches(len(x), batch_size, None):
        rots = [rotations[i] for i in idx]
        _, Z1 = model.features(x[idx])
        _, Z2 = model.features(_rotate_stack(x[idx], rots))
        Rf = np.stack([losses.feature_rotation(r).m for r in rots])
        target = np.matmul(Z1.data.astype(np.float64), Rf)
        num += float(np.sum((Z2.data.astype(np.float64) - target) ** 2))
        den += float(np.sum(target ** 2))
    return num / den


# -- downstream ----------------------------------------------------------------

def _targets(items: Sequence[Phantom], task: str) -> np.ndarray:
    if task == "classify":
        return np.array([p.class_label for p in items], dtype=np.int64)
    return np.array([p.age_value for p in items], dtype=np.float64)


def predict(model: SOEModel, x: np.ndarray, task: str, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for idx in _batches(len(x), batch_size, None):
        f = model.encoder(x[idx])
        y = model.head(f).data.astype(np.float64)
        out.append(y.argmax(axis=1) if task == "classify" else y[:, 0] * model.target_std + model.target_mean)
    return np.concatenate(out)


def finetune(cfg: Config, ckpt: Checkpoint | None, train: Sequence[Phantom],
             val: Sequence[Phantom] = (), task: str | None = None, mu: float | None = None,
             augment: str | None = None, batch_size: int | None = None, epochs: int | None = None,
             out_dir=None) -> tuple[Checkpoint, MetricsLog]:
    """Supervised training of a linear head on f(x) plus the equivariance regularizer.

    ``ckpt=None`` starts from a fresh initialization (the no-pretraining arm).
    Every step forms a rotated view under ``augment``; the task loss is the mean
    over both views and ``mu`` weighs the equivariance loss between them.
    """
    task = task or cfg["train.task"]
    mu = cfg["loss.mu"] if mu is None else mu
    augment = augment or cfg["train.augment"]
    epochs = cfg["train.finetune_epochs"] if epochs is None else epochs
    batch_size = batch_size or cfg["train.batch_size"]
    seed = cfg["train.seed"]
    if augment not in CONDITIONS:
        raise ValueError(f"unknown augmentation {augment!r}")
    if not train:
        raise TrainingError("finetune needs training data")

    model = SOEModel(cfg, seed)
    if ckpt is not None:
        model.load_checkpoint(ckpt, strict=False)
    y_train = _targets(train, task)
    if task == "classify":
        if set(np.unique(y_train)) - {0, 1}:
            raise ValueError("classification labels must be 0/1")
        model.attach_head(2, seed + 2)
    else:
        model.attach_head(1, seed + 2)
        model.target_mean = float(y_train.mean())
        model.target_std = float(y_train.std()) or 1.0
    params = model.parameters()
    if cfg["train.freeze_encoder"]:
        frozen = {id(p) for p in model.encoder.parameters()}
        params = [p for p in params if id(p) not in frozen]
    opt = ad.SGD(params, cfg["train.finetune_lr"], cfg["train.momentum"], _clip(cfg))
    per_decade = cfg["train.lr_epochs_per_decade"] or max(epochs, 1)
    x_train = _stack(train)
    fit_y = y_train if task == "classify" else (y_train - model.target_mean) / model.target_std

    best = model.to_checkpoint()
    best_score = -np.inf
    history = MetricsLog()
    for epoch in range(epochs):
        opt.lr = ad.lr_schedule(epoch, cfg["train.finetune_lr"], per_decade)
        rng = np.random.default_rng([seed, 3, epoch])
        model.train()
        sums = np.zeros(3)
        for b, idx in enumerate(_batches(len(x_train), batch_size, rng)):
            opt.zero_grad()
            with Tape() as tape:
                try:
                    dl = _downstream_batch(model, x_train[idx], fit_y[idx], rng, augment, mu, task)
                except ad.NonFiniteError as exc:
                    raise _abort("finetune", epoch, b, exc) from exc
                _check_loss(dl.total, "finetune", epoch, b)
                tape.backward(dl.tensor)
            opt.step()
            sums += np.array([dl.task_loss, dl.rob_reg, dl.total]) * len(idx)
        sums /= len(x_train)
        row = dict(phase="finetune", epoch=epoch, lr=opt.lr, task_loss=sums[0], rob_reg=sums[1])
        score = None
        if val:
            m = evaluate(model, val, "none", task=task, seed=cfg["train.eval_seed"])
            row.update(m)
            score = m["bacc"] if task == "classify" else -m["mae"]
            row["val_score"] = score
        history.add(**row)
        log.info("finetune epoch %d: task=%.4g rob=%.4g val=%s", epoch, sums[0], sums[1], score)
        if not val or score > best_score:
            best_score = score if score is not None else best_score
            best = model.to_checkpoint()

    if out_dir is not None:
        _save_run(out_dir, cfg, best, history, "finetune")
    return best, history


def _downstream_batch(model, x1, y, rng, augment, mu, task):
    rots = [sample_condition(rng, augment) for _ in range(len(x1))]
    f1, Z1 = model.features(x1)
    out1 = model.head(f1)
    if augment == "none":
        f2, Z2, out2 = f1, Z1, None
    else:
        f2, Z2 = model.features(_rotate_stack(x1, rots))
        out2 = model.head(f2)
    tl = losses.task_loss(out1, y, task)
    if out2 is not None:
        tl = ad.mul(ad.add(tl, losses.task_loss(out2, y, task)), 0.5)
    rr = losses.so3_loss(Z1, Z2, [losses.feature_rotation(r) for r in rots])
    total = ad.add(tl, ad.mul(rr, float(mu)))
    return losses.DownstreamLoss(float(tl.data), float(rr.data), float(mu), float(total.data), total)


def evaluate(model_or_ckpt, data: Sequence[Phantom], eval_condition: str = "none",
             task: str = "classify", seed: int = 1234, cfg: Config | None = None) -> dict[str, float]:
    """Task metrics in eval mode on ``data`` rotated per ``eval_condition`` (rotations from ``seed``)."""
    if not data:
        raise ValueError("cannot evaluate on an empty split")
    model = model_or_ckpt
    if isinstance(model_or_ckpt, Checkpoint):
        if cfg is None:
            raise ValueError("evaluating a checkpoint needs its config")
        model = model_from_checkpoint(cfg, model_or_ckpt)
    rng = np.random.default_rng([seed, 4])
    x = _stack(data)
    if eval_condition != "none":
        x = _rotate_stack(x, [sample_condition(rng, eval_condition) for _ in range(len(x))])
    preds = predict(model, x, task)
    return losses.metrics(preds, _targets(data, task), task)


# -- robustness grid -------------------------------------------------------------

@dataclass
class GridCell:
    train_condition: str
    eval_condition: str
    metric: str
    scratch: float
    soe: float

    @property
    def pct_increase(self) -> float:
        if self.scratch == 0:
            return 0.0 if self.soe == 0 else float(np.sign(self.soe) * np.inf)
        return 100.0 * (self.soe - self.scratch) / self.scratch


@dataclass
class RobustnessGrid:
    train_conditions: tuple
    eval_conditions: tuple
    cells: list[GridCell] = field(default_factory=list)

    def cell(self, train_condition, eval_condition, metric) -> GridCell:
        for c in self.cells:
            if (c.train_condition, c.eval_condition, c.metric) == (train_condition, eval_condition, metric):
                return c
        raise KeyError((train_condition, eval_condition, metric))

    def complete(self, metrics=("bacc", "f1")) -> bool:
        have = {(c.train_condition, c.eval_condition, c.metric) for c in self.cells}
        return all((t, e, m) in have for t in self.train_conditions
                   for e in self.eval_conditions for m in metrics)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("train_condition", "eval_condition", "metric", "scratch", "soe", "pct_increase"))
        for c in self.cells:
            w.writerow((c.train_condition, c.eval_condition, c.metric, repr(float(c.scratch)),
                        repr(float(c.soe)), repr(float(c.pct_increase))))
        return buf.getvalue()

    @classmethod
    def average(cls, grids: Sequence["RobustnessGrid"]) -> "RobustnessGrid":
        """Cell-wise mean of the scratch and SOE metrics across grids (e.g. seeds)."""
        first = grids[0]
        out = cls(first.train_conditions, first.eval_conditions)
        for c in first.cells:
            cells = [g.cell(c.train_condition, c.eval_condition, c.metric) for g in grids]
            out.cells.append(GridCell(c.train_condition, c.eval_condition, c.metric,
                                      float(np.mean([x.scratch for x in cells])),
                                      float(np.mean([x.soe for x in cells]))))
        return out


def robustness_grid(cfg: Config, soe_ckpt: Checkpoint, train: Sequence[Phantom],
                    val: Sequence[Phantom], test: Sequence[Phantom],
                    train_conditions=("mild", "right-angle"), eval_conditions=CONDITIONS,
                    scratch_ckpt: Checkpoint | None = None, out_dir=None, **finetune_kw) -> RobustnessGrid:
    """Fine-tune SOE-pretrained and scratch arms per training condition; evaluate every pair.

    Both arms use the robustness regularizer and identical data order and
    augmentation seeds. Each cell stores BACC/F1 of both arms; the reported
    value is 100 * (soe - scratch) / scratch. With ``out_dir``, each arm's run
    directory is written to ``out_dir/<train_condition>_<arm>``.
    """
    grid = RobustnessGrid(tuple(train_conditions), tuple(eval_conditions))
    for tc in train_conditions:
        arms = {}
        for arm, start in (("soe", soe_ckpt), ("scratch", scratch_ckpt)):
            arm_dir = None if out_dir is None else Path(out_dir) / f"{tc}_{arm}"
            ck, _ = finetune(cfg, start, train, val, task="classify", augment=tc, out_dir=arm_dir,
                             **finetune_kw)
            arms[arm] = model_from_checkpoint(cfg, ck)
        for ec in eval_conditions:
            res = {arm: evaluate(m, test, ec, "classify", cfg["train.eval_seed"]) for arm, m in arms.items()}
            for metric in ("bacc", "f1"):
                grid.cells.append(GridCell(tc, ec, metric, res["scratch"][metric], res["soe"][metric]))
    return grid


# -- run directories -------------------------------------------------------------

def _save_run(out_dir, cfg: Config, ckpt: Checkpoint, history: MetricsLog, phase: str):
    from . import __version__
    from .checkpoint import save
    from .config import write_resolved

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "config.txt")
    atomic_write(out / "seed.txt", f"{cfg['train.seed']}\n")
    atomic_write(out / "version.txt", f"soe {__version__}\n")
    history.write(out / f"{phase}_metrics.csv")
    save(out / f"{phase}.ckpt", ckpt)


# -- verification --------------------------------------------------------------

def full_gradcheck(dim: int = 8, seed: int = 0, n_samples: int = 50, eps: float = 1e-3,
                   dtype=np.float32, batch: int = 2, fd_dtype=np.float64) -> float:
    """Finite-difference check of the combined pretext loss through encoder and VN.

    Runs in eval mode (batchnorm running statistics, no dropout) so the loss is
    a deterministic function of the parameters. Analytic gradients are taken
    at ``dtype``; the difference quotients use a ``fd_dtype`` shadow copy
    (pass None to difference at ``dtype`` itself). Returns the max relative
    error over ``n_samples`` sampled parameter coordinates.
    """
    rng = np.random.default_rng(seed)
    cfg = Config({"encoder.input_dim": dim})
    with ad.precision(dtype):
        model = SOEModel(cfg, seed).astype(dtype)
        model.eval()
        x1 = rng.random((batch, dim, dim, dim)).astype(np.float32)
        rots = [sample_uniform(rng)[0] for _ in range(batch)]
        x2 = _rotate_stack(x1, rots)
        fr = [losses.feature_rotation(r) for r in rots]

        def f():
            f1, Z1 = model.features(x1)
            f2, Z2 = model.features(x2)
            return losses.combined_loss(Z1, Z2, fr, f1, f2, cfg["loss.lambda"], cfg["loss.eps"]).tensor

        return ad.grad_check(f, model.parameters(), eps=eps, n_samples=n_samples, rng=rng,
                             fd_dtype=fd_dtype)
