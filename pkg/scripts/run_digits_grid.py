#!/usr/bin/env python3
"""Train and evaluate the flow imputer across a grid of missing rates.

Runs the full protocol per rate — mask, train with alternating rounds,
impute the held-out split, score against the nearest-neighbor fill — and
renders the combined report grid. Defaults reproduce the digits headline
table; pass ``--lam 0`` for the unregularized ablation column, or point
``--mnist-dir`` at the four IDX files (see scripts/fetch_mnist.py) for the
native-resolution variant.

Example:
    python3 scripts/run_digits_grid.py --rates 0.6 0.9 --out runs/digits
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from prflow.cli import main as cli_main
from prflow.data import (
    MaskSpec,
    TEST_STREAM,
    TRAIN_STREAM,
    load_digits_dataset,
    load_idx,
    sample_mask,
    save_checkpoint,
)
from prflow.imputer import impute_dataset, shallow_init_batch
from prflow.metrics import (
    frechet_distance,
    gaussian_stats,
    rmse_missing,
    scc,
    train_benchmark_classifier,
)
from prflow.training import TrainConfig, Trainer


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", type=float, nargs="+", default=[0.5, 0.6, 0.7, 0.8, 0.9])
    ap.add_argument("--out", default="runs/digits_grid")
    ap.add_argument("--lam", default="auto",
                    help="regularization weight: 'auto' or a number (0 disables the prior)")
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--coupling-hidden", type=int, default=128)
    ap.add_argument("--imputer-hidden", type=int, default=256)
    ap.add_argument("--passes", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--classifier-epochs", type=int, default=40)
    ap.add_argument("--mnist-dir", default=None,
                    help="directory with the four MNIST IDX files; omit for sklearn digits")
    ap.add_argument("--train-size", type=int, default=2000, help="MNIST only")
    ap.add_argument("--test-size", type=int, default=500, help="MNIST only")
    ap.add_argument("--threads", type=int, default=1)
    return ap.parse_args()


def load_corpus(args):
    if args.mnist_dir:
        d = Path(args.mnist_dir)
        train = load_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
        test = load_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte")
        return "mnist", train.subset(slice(0, args.train_size)), test.subset(slice(0, args.test_size))
    train, test = load_digits_dataset()
    return "digits", train, test


def drop_fully_missing(images, labels, masks, split):
    """8x8 images at high missing rates occasionally lose every pixel."""
    keep = masks.any(axis=(1, 2))
    dropped = int((~keep).sum())
    if dropped:
        print(f"  note: dropped {dropped} fully-missing {split} sample(s)")
    return images[keep], labels[keep], masks[keep]


def run_rate(args, name, train, test, clf, stats_clean, p, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    masks = sample_mask(train.images.shape, MaskSpec(p, seed=args.seed, stream=TRAIN_STREAM))
    imgs, _, masks = drop_fully_missing(train.images, train.labels, masks, "train")
    lam = None if args.lam == "auto" else float(args.lam)
    cfg = TrainConfig(
        lam=lam, learning_rate=args.lr, batch_size=args.batch_size,
        max_rounds=args.rounds, coupling_hidden=args.coupling_hidden,
        imputer_hidden=args.imputer_hidden, seed=args.seed,
    )
    t0 = time.perf_counter()
    trainer = Trainer(np.where(masks, imgs, 0.0), masks, cfg,
                      mask_seed=args.seed, metrics_path=out_dir / "metrics.jsonl")
    trainer.train()
    save_checkpoint(trainer.to_state(), out_dir / "checkpoint.prflow")
    print(f"  trained {args.rounds} rounds in {time.perf_counter() - t0:.1f}s "
          f"(lambda={trainer.lam:.4g})")

    tmasks = sample_mask(test.images.shape, MaskSpec(p, seed=args.seed, stream=TEST_STREAM))
    timgs, tlabs, tmasks = drop_fully_missing(test.images, test.labels, tmasks, "test")
    obs = np.where(tmasks, timgs, 0.0)
    rows = []
    for method, stack, row_name in (
        ("prflow", impute_dataset(obs, tmasks, trainer.flow, trainer.imputer,
                                  passes=args.passes), "evaluate.json"),
        ("nearest-neighbor", shallow_init_batch(obs, tmasks), "baseline.json"),
    ):
        acc_imp = clf.accuracy(stack, tlabs)
        row = {
            "dataset": name,
            "method": method,
            "missing_rate": p,
            "rmse": rmse_missing(stack, timgs, tmasks),
            "fd": frechet_distance(gaussian_stats(clf.feature_array(stack)), stats_clean),
            "scc": scc(acc_imp, clf.acc_0),
            "acc_imputed": acc_imp,
            "acc_reference": clf.acc_0,
        }
        path = out_dir / row_name
        path.write_text(json.dumps(row, indent=2, sort_keys=True) + "\n")
        rows.append(path)
        print(f"  {method:<18} rmse={row['rmse']:.4f} fd={row['fd']:.4f} scc={row['scc']:.4f}")
    return rows


def main() -> int:
    args = parse_args()
    torch.set_num_threads(args.threads)
    out = Path(args.out)
    name, train, test = load_corpus(args)
    print(f"corpus: {name}, {len(train.images)} train / {len(test.images)} test")

    clf = train_benchmark_classifier(
        train.images, train.labels, test.images, test.labels,
        seed=args.seed, epochs=args.classifier_epochs,
    )
    print(f"reference classifier accuracy on clean test images: {clf.acc_0:.4f}")
    stats_clean = gaussian_stats(clf.feature_array(test.images))

    row_paths = []
    for p in args.rates:
        print(f"missing rate {p:g}:")
        row_paths += run_rate(args, name, train, test, clf, stats_clean, p,
                              out / f"p{p:g}")
    return cli_main(["report", "--out", str(out)] + [str(r) for r in row_paths])


if __name__ == "__main__":
    raise SystemExit(main())
