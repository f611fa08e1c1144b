"""Command-line entry point: data generation, training, evaluation, benchmarks.

Exit codes: 0 success, 1 usage error, 2 runtime failure. All randomness is
controlled by --seed (default 42).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import losses
from .data import generate_dataset, load_dataset, save_dataset
from .errors import (EmptyDensityError, InvalidParameterError, ParseError)
from .model import load_checkpoint
from .sampling import STRATEGIES, fnr_benchmark, op_count
from .trainer import ablate, evaluate_miou, load_config, run_training

_CONFIG_FLAGS = {
    # flag name -> (config key, type, help)
    "--labeled-fraction": ("labeled_fraction", float, "labeled data fraction (default: 0.125)"),
    "--lambda1": ("lambda1", float, "contrastive loss coefficient (default: 0.3)"),
    "--lambda2": ("lambda2", float, "consistency loss coefficient (default: 1.0)"),
    "--tau": ("tau", float, "contrastive temperature (default: 0.07)"),
    "--num-negatives": ("num_negatives", int, "negatives per anchor (default: 200)"),
    "--delay-steps": ("delayed_start", int, "steps before the unlabeled loss starts (default: 0)"),
    "--total-steps": ("total_steps", int, "training steps (default: 2000)"),
    "--feature-stage": ("feature_stage", int, "encoder stage for contrastive features (default: 3)"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _add_train_flags(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", help="output directory for metrics and checkpoints")
    for flag, (key, kind, text) in _CONFIG_FLAGS.items():
        p.add_argument(flag, dest=key, type=kind, help=text)
    p.add_argument("--strategy", choices=STRATEGIES, dest="strategy",
                   help="negative sampling strategy (default: diff+pseudo)")
    p.add_argument("--shared-projection", action="store_const", const=True,
                   dest="shared_projection", default=None,
                   help="share one projection head between branches (default: off)")


def build_parser():
    parser = _Parser(prog="pixseg",
                     description="toy pixel contrastive-consistent "
                                 "semi-supervised segmentation")
    parser.add_argument("--seed", type=int, default=42,
                        help="base random seed (default: 42)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[], help="write a synthetic dataset file")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--count", type=int, default=1024, help="number of samples (default: 1024)")
    p.add_argument("--height", type=int, default=32, help="image height (default: 32)")
    p.add_argument("--width", type=int, default=32, help="image width (default: 32)")
    p.add_argument("--classes", type=int, default=5, help="class count incl. background (default: 5)")
    p.add_argument("--shapes", type=int, default=3, help="max shapes per image (default: 3)")

    p = sub.add_parser("train", help="run semi-supervised training")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--eval-data", required=True, help="evaluation dataset file")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="evaluation dataset file")

    p = sub.add_parser("fnr-bench", help="false-negative-rate benchmark")
    p.add_argument("--strategy", default="all",
                   choices=STRATEGIES + ("all",),
                   help="strategy to benchmark (default: all)")
    p.add_argument("--trials", type=int, default=20, help="pools per strategy (default: 20)")
    p.add_argument("--num-negatives", type=int, default=20,
                   help="negatives per anchor (default: 20)")
    p.add_argument("--out", help="CSV output path (default: stdout)")

    p = sub.add_parser("grad-check", help="finite-difference check of loss gradients")
    p.add_argument("--seeds", type=int, default=100, help="random instances (default: 100)")

    p = sub.add_parser("ablate", help="run one ablation grid axis")
    p.add_argument("--axis", required=True,
                   choices=("strategy", "negatives", "coeffs", "feature-stage",
                            "loss-variant", "delay"))
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", required=True)
    _add_train_flags(p)

    p = sub.add_parser("opcount", help="contrastive multiply-add arithmetic")
    p.add_argument("--m", type=int, default=4356, help="candidate pixels (default: 4356)")
    p.add_argument("--n", type=int, default=200, help="sampled negatives (default: 200)")
    p.add_argument("--d", type=int, default=128, help="feature dimension (default: 128)")
    p.add_argument("--c", type=int, default=20, help="classes (default: 20)")
    return parser


def _config_from_args(args):
    overrides = {key: getattr(args, key, None) for _, (key, _, _) in _CONFIG_FLAGS.items()}
    overrides["strategy"] = getattr(args, "strategy", None)
    overrides["shared_projection"] = getattr(args, "shared_projection", None)
    overrides["seed"] = args.seed
    return load_config(getattr(args, "config", None), overrides)


def emit_plot_data(metrics_csv, out_dir):
    """Split a metrics CSV into per-metric (step, value) TSV series files."""
    with open(metrics_csv, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"empty metrics file {metrics_csv}", line=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                int(row[0])
            except ValueError:
                raise ParseError(f"bad step value {row[0]!r}", line=lineno)
            rows.append(row)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for col, name in enumerate(header[1:], start=1):
        path = os.path.join(out_dir, f"{name}.tsv")
        with open(path, "w") as f:
            f.write(f"step\t{name}\n")
            for row in rows:
                if row[col] != "":
                    f.write(f"{row[0]}\t{row[col]}\n")
        paths.append(path)
    return paths


def _cmd_generate_data(args):
    samples = generate_dataset(args.count, args.seed, height=args.height,
                               width=args.width, classes=args.classes,
                               shapes_per_image=args.shapes)
    save_dataset(args.out, samples, args.classes)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args):
    cfg = _config_from_args(args)
    train_samples, classes = load_dataset(args.data)
    eval_samples, _ = load_dataset(args.eval_data)
    cfg.classes = classes
    out_dir = args.out or "run"
    _, rows, miou = run_training(cfg, train_samples, eval_samples, out_dir)
    emit_plot_data(os.path.join(out_dir, "metrics.csv"),
                   os.path.join(out_dir, "series"))
    print(f"final mIoU {miou:.4f} over {len(rows)} steps; outputs in {out_dir}")
    return 0


def _cmd_eval(args):
    net, step = load_checkpoint(args.checkpoint)
    samples, _ = load_dataset(args.data)
    iou, miou = evaluate_miou(net, samples)
    for cls, value in enumerate(iou):
        if not np.isnan(value):
            print(f"class {cls}: IoU {value:.4f}")
    print(f"mIoU {miou:.4f} (checkpoint step {step})")
    return 0


def _cmd_fnr_bench(args):
    names = STRATEGIES if args.strategy == "all" else (args.strategy,)
    rng = np.random.default_rng(args.seed)
    rows = fnr_benchmark(names, args.num_negatives, args.trials, rng)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["strategy", "M", "N", "trials", "fnr_mean", "fnr_std"])
    for row in rows:
        writer.writerow([row["strategy"], row["M"], row["N"], row["trials"],
                         f"{row['fnr_mean']:.6f}", f"{row['fnr_std']:.6f}"])
    if args.out:
        out.close()
        print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _numeric_gradient(fn, x, step=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        g.flat[i] = (fn(xp) - fn(xm)) / (2 * step)
    return g


def _cmd_grad_check(args):
    worst = 0.0
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        d = 8
        anchor = rng.normal(size=d)
        positive = rng.normal(size=d)
        negatives = rng.normal(size=(5, d))
        da, dp, dn = losses.pixel_contrastive_grad(anchor, positive, negatives)
        for vec, grad, rebuild in (
                (anchor, da, lambda v: losses.pixel_contrastive_loss(v, positive, negatives)),
                (positive, dp, lambda v: losses.pixel_contrastive_loss(anchor, v, negatives))):
            num = _numeric_gradient(rebuild, vec)
            worst = max(worst, np.abs(num - grad).max() / max(np.abs(num).max(), 1e-12))
        num = np.stack([_numeric_gradient(
            lambda v, j=j: losses.pixel_contrastive_loss(
                anchor, positive, np.vstack([negatives[:j], v[None], negatives[j + 1:]])),
            negatives[j]) for j in range(5)])
        worst = max(worst, np.abs(num - dn).max() / max(np.abs(num).max(), 1e-12))
        weak = rng.dirichlet(np.ones(6))
        strong = rng.dirichlet(np.ones(6))
        g = losses.consistency_grad(weak, strong)
        num = _numeric_gradient(lambda v: losses.consistency_loss(weak, v), strong)
        worst = max(worst, np.abs(num - g).max() / max(np.abs(num).max(), 1e-12))
    print(f"max relative error over {args.seeds} seeds: {worst:.3e}")
    return 0 if worst < 1e-4 else 2


def _cmd_ablate(args):
    cfg = _config_from_args(args)
    train_samples, classes = load_dataset(args.data)
    eval_samples, _ = load_dataset(args.eval_data)
    cfg.classes = classes
    rows = ablate(cfg, args.axis, train_samples, eval_samples)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        out = open(os.path.join(args.out, "ablation.csv"), "w", newline="")
    else:
        out = sys.stdout
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["axis", "setting", "final_miou", "mean_fnr", "error"])
    for row in rows:
        writer.writerow([row["axis"], row["setting"],
                         "" if row["final_miou"] is None else f"{row['final_miou']:.6f}",
                         "" if row["mean_fnr"] is None else f"{row['mean_fnr']:.6f}",
                         row["error"]])
    if args.out:
        out.close()
    return 0


def _cmd_opcount(args):
    dense = op_count(args.m, args.n, args.d, args.c, "all_pairs")
    sims = op_count(args.m, args.n, args.d, args.c, "sampled_sim")
    sparse = op_count(args.m, args.n, args.d, args.c, "sampled")
    print(f"all-pairs MulAdds:   {dense}")
    print(f"sampled similarity:  {sims}")
    print(f"sampled total:       {sparse}")
    print(f"reduction factor:    {dense / sparse:.2f}")
    return 0


_COMMANDS = {
    "generate-data": _cmd_generate_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "fnr-bench": _cmd_fnr_bench,
    "grad-check": _cmd_grad_check,
    "ablate": _cmd_ablate,
    "opcount": _cmd_opcount,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (InvalidParameterError, ParseError, EmptyDensityError, OSError) as exc:
        sys.stderr.write(f"pixseg {args.command}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
