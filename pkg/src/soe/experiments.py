"""Desk-scale experiment drivers shared by the acceptance suite and the demos.

Each seed gets its own phantom set (500 volumes at 16^3, split 70/10/20) and
its own training seed, so seeds differ in both data and initialization.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import synth
from . import train as T
from .checkpoint import Checkpoint
from .config import Config
from .so3 import sample_uniform

DESK_DIM = 16
DESK_SAMPLES = 500
E_SEED = 7


def desk_config(seed: int, **overrides) -> Config:
    base = {"encoder.input_dim": DESK_DIM, "data.dim": DESK_DIM, "data.n_samples": DESK_SAMPLES,
            "data.seed": seed, "data.split_seed": seed, "train.seed": seed}
    base.update({k.replace("__", "."): v for k, v in overrides.items()})
    return Config(base)


def desk_data(cfg: Config):
    items = synth.generate(cfg["data.n_samples"], cfg["data.dim"], cfg["data.seed"], cfg["data.v_threshold"])
    return synth.split(items, synth.SplitSpec(seed=cfg["data.split_seed"]))


def held_out_equivariance(model_or_ckpt, cfg: Config, test, seed: int = E_SEED) -> float:
    """Relative equivariance error on ``test`` under Haar-uniform rotations from ``seed``."""
    model = model_or_ckpt
    if isinstance(model, Checkpoint):
        model = T.model_from_checkpoint(cfg, model)
    rng = np.random.default_rng(seed)
    rots = [sample_uniform(rng)[0] for _ in test]
    return T.equivariance_error(model, synth.stack(test), rots)


@dataclass
class SeedRun:
    seed: int
    cfg: Config
    splits: tuple
    pretrained: Checkpoint
    e_init: float
    e_final: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.e_final / self.e_init


def pretrain_seed(seed: int, out_dir=None, **overrides) -> SeedRun:
    cfg = desk_config(seed, **overrides)
    tr, va, te = desk_data(cfg)
    e0 = held_out_equivariance(T.SOEModel(cfg, cfg["train.seed"]), cfg, te)
    ck, _ = T.pretrain(cfg, tr, va, out_dir=out_dir)
    return SeedRun(seed, cfg, (tr, va, te), ck, e0, held_out_equivariance(ck, cfg, te))


def compare_arms(run: SeedRun, out_root=None) -> dict[str, float]:
    """Test BACC of SOE-initialized vs scratch fine-tuning (same data order and seeds)."""
    tr, va, te = run.splits
    out = {}
    for arm, start in (("soe", run.pretrained), ("scratch", None)):
        out_dir = None if out_root is None else Path(out_root) / arm
        ck, _ = T.finetune(run.cfg, start, tr, va, out_dir=out_dir)
        out[arm] = T.evaluate(ck, te, "none", "classify", run.cfg["train.eval_seed"], run.cfg)["bacc"]
    return out


def grid_seed(run: SeedRun) -> T.RobustnessGrid:
    tr, va, te = run.splits
    return T.robustness_grid(run.cfg, run.pretrained, tr, va, te)
