"""
Rotation-robustness grid
========================

Fine-tune one SOE-pretrained and one scratch classifier per training
rotation condition (mild 15-45 deg, or right-angle), then evaluate both on
unrotated, mildly rotated and right-angle-rotated test volumes. A cell is
100 * (BACC_soe - BACC_scratch) / BACC_scratch.
"""

import argparse

from soe import experiments as X
from soe import train as T

ap = argparse.ArgumentParser()
ap.add_argument("--full", action="store_true", help="desk scale: 500 phantoms, 50 epochs")
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

small = {} if args.full else {"data.n_samples": 160, "train.pretrain_epochs": 3, "train.finetune_epochs": 8}
cfg = X.desk_config(args.seed, **small)
train, val, test = X.desk_data(cfg)

soe, _ = T.pretrain(cfg, train, val)
grid = T.robustness_grid(cfg, soe, train, val, test)

print(f"{'train':12s} {'eval':12s} {'scratch':>8s} {'SOE':>8s} {'change':>8s}")
for c in grid.cells:
    if c.metric == "bacc":
        print(f"{c.train_condition:12s} {c.eval_condition:12s} {c.scratch:8.3f} {c.soe:8.3f} {c.pct_increase:+7.1f}%")
