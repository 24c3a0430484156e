"""Command-line entry point: ``soe <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Angles are in degrees.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, synth
from . import train as T
from .config import Config, ConfigError, read_config, write_resolved
from .fileio import FormatError, atomic_write
from .so3 import AxisAngle, from_axis_angle, snap
from .volume import read_volume, rotate, write_volume

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _base_config(args, **fixed) -> Config:
    cfg = read_config(args.config) if getattr(args, "config", None) else Config()
    overrides = dict(fixed)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        overrides[k] = v
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    return cfg.update(overrides)


def _load_data(args, cfg: Config):
    """Read the manifest and match ``encoder.input_dim`` to the volume size."""
    splits = synth.read_dataset(args.data)
    first = next((p for s in splits.values() for p in s), None)
    if first is None:
        raise ValueError(f"{args.data}: manifest lists no volumes")
    return splits, cfg.update({"encoder.input_dim": first.volume.n, "data.dim": first.volume.n})


def _write_run_files(out: Path, cfg: Config):
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "config.txt")
    atomic_write(out / "seed.txt", f"{cfg['train.seed']}\n")
    atomic_write(out / "version.txt", f"soe {__version__}\n")


def _metrics_csv(rows: list[dict]) -> str:
    cols = list(rows[0])
    return ",".join(cols) + "\n" + "".join(",".join(repr(float(r[c])) if isinstance(r[c], float) else str(r[c])
                                                      for c in cols) + "\n" for r in rows)


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args):
    fixed = {"data.seed": args.seed} if args.seed is not None else {}
    if args.n is not None:
        fixed["data.n_samples"] = args.n
    if args.dim is not None:
        fixed["data.dim"] = args.dim
    cfg = _base_config(args, **fixed)
    items = synth.generate(cfg["data.n_samples"], cfg["data.dim"], cfg["data.seed"], cfg["data.v_threshold"])
    tr, va, te = synth.split(items, synth.SplitSpec(seed=cfg["data.split_seed"]))
    manifest = synth.write_dataset(args.out, {"train": tr, "val": va, "test": te})
    _write_run_files(Path(args.out), cfg)
    print(f"wrote {len(items)} volumes ({len(tr)}/{len(va)}/{len(te)}) to {manifest}")


def cmd_pretrain(args):
    splits, cfg = _load_data(args, _base_config(args))
    if args.epochs is not None:
        cfg = cfg.update({"train.pretrain_epochs": args.epochs})
    _, hist = T.pretrain(cfg, splits["train"], splits["val"], out_dir=args.out)
    last = hist.rows[-1] if hist.rows else {}
    print(f"pretrained {cfg['train.pretrain_epochs']} epochs; final l_comb={last.get('l_comb')}; "
          f"checkpoint {Path(args.out) / 'pretrain.ckpt'}")


def cmd_finetune(args):
    fixed = {k: v for k, v in (("train.task", args.task), ("train.augment", args.augment),
                               ("loss.mu", args.mu), ("train.finetune_epochs", args.epochs)) if v is not None}
    splits, cfg = _load_data(args, _base_config(args, **fixed))
    start = checkpoint.load(args.ckpt) if args.ckpt else None
    _, hist = T.finetune(cfg, start, splits["train"], splits["val"], out_dir=args.out)
    print(f"fine-tuned {cfg['train.finetune_epochs']} epochs ({'SOE' if start else 'scratch'} start); "
          f"checkpoint {Path(args.out) / 'finetune.ckpt'}")


def cmd_evaluate(args):
    run_cfg = Path(args.ckpt).parent / "config.txt"
    if not args.config and run_cfg.exists():
        args.config = str(run_cfg)
    splits, cfg = _load_data(args, _base_config(args))
    data = splits.get(args.split) or []
    seed = args.seed if args.seed is not None else cfg["train.eval_seed"]
    ck = checkpoint.load(args.ckpt)
    if "head.weight" not in ck.params:
        raise ValueError("checkpoint has no prediction head; evaluate a fine-tuned checkpoint")
    task = "classify" if ck.params["head.weight"].shape[0] == 2 else "regress"
    m = T.evaluate(ck, data, args.condition, task, seed, cfg)
    row = {"split": args.split, "eval_condition": args.condition, "eval_seed": seed, **m}
    text = _metrics_csv([row])
    if args.out:
        atomic_write(args.out, text)
    sys.stdout.write(text)


def cmd_robustness_grid(args):
    splits, cfg = _load_data(args, _base_config(args))
    if args.epochs is not None:
        cfg = cfg.update({"train.finetune_epochs": args.epochs})
    soe = checkpoint.load(args.ckpt)
    out = Path(args.out)
    grid = T.robustness_grid(cfg, soe, splits["train"], splits["val"], splits["test"], out_dir=out)
    _write_run_files(out, cfg)
    atomic_write(out / "grid.csv", grid.to_csv())
    sys.stdout.write(grid.to_csv())


def cmd_rotate(args):
    try:
        axis = tuple(float(a) for a in args.axis.split(","))
    except ValueError:
        raise UsageError(f"--axis must be three comma-separated numbers, got {args.axis!r}") from None
    norm = float(np.linalg.norm(axis)) if len(axis) == 3 else 0.0
    if not norm > 0:
        raise UsageError(f"--axis must be a nonzero 3-vector, got {args.axis!r}")
    r = snap(from_axis_angle(AxisAngle(np.array(axis) / norm, np.deg2rad(args.degrees))))
    write_volume(args.out, rotate(read_volume(args.input), r))
    print(f"rotated {args.input} by {args.degrees} deg about {axis} -> {args.out}")


def cmd_gradcheck(args):
    err = T.full_gradcheck(dim=args.dim, seed=args.seed or 0, n_samples=args.samples)
    ok = err < 1e-2
    print(f"max relative error {err:.3e} over {args.samples} coordinates ({'ok' if ok else 'FAIL'} at 1e-2)")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_inspect_ckpt(args):
    ck = checkpoint.load(args.path)
    print(f"{args.path}: {len(ck.params)} parameter tensors, {ck.num_parameters()} values")
    for prefix in ("encoder.", "vn.", "head."):
        n = ck.num_parameters(prefix)
        if n:
            print(f"  {prefix[:-1]:8s} {n}")
    if args.verbose:
        for name, a in ck.params.items():
            print(f"  {name:40s} {tuple(a.shape)}")
        for name, a in ck.stats.items():
            print(f"  [stat] {name:33s} {tuple(a.shape)}")


# -- parser ----------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="soe", description="Rotation-equivariant pretraining for 3D volumes.")
    p.add_argument("--version", action="version", version=f"soe {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, help="training seed (train.seed)")
        if data:
            sp.add_argument("--data", required=True, help="dataset manifest.csv")

    sp = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    common(sp, data=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--dim", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="self-supervised equivariance pretraining")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="supervised fine-tuning from a checkpoint or scratch")
    common(sp)
    sp.add_argument("--ckpt", help="pretrained checkpoint (omit to train from scratch)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--task", choices=("classify", "regress"))
    sp.add_argument("--augment", choices=T.CONDITIONS)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("evaluate", help="task metrics of a fine-tuned checkpoint")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--condition", default="none", choices=T.CONDITIONS)
    sp.add_argument("--out", help="write the metrics CSV here")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("robustness-grid", help="SOE vs scratch over rotation conditions")
    common(sp)
    sp.add_argument("--ckpt", required=True, help="SOE-pretrained checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_robustness_grid)

    sp = sub.add_parser("rotate", help="rotate one SOEV volume")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--axis", required=True, help="x,y,z")
    sp.add_argument("--degrees", type=float, required=True)
    sp.set_defaults(func=cmd_rotate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full pretext loss")
    sp.add_argument("--dim", type=int, default=8)
    sp.add_argument("--samples", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("inspect-ckpt", help="summarize an SOEC checkpoint")
    sp.add_argument("path")
    sp.add_argument("--verbose", action="store_true", help="list every tensor")
    sp.set_defaults(func=cmd_inspect_ckpt)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            return args.func(args) or EXIT_OK
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"soe: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError, ValueError, KeyError, T.TrainingError) as exc:
        print(f"soe: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
