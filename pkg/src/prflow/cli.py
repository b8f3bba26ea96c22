"""Command-line entry point: ``prflow train|impute|evaluate|baseline|report``.

Configuration is resolved as defaults < config file < flags; the fully
resolved config is echoed into the run directory so every artifact under
it is reproducible from disk alone. Exit codes: 0 success, 1 usage error
(bad flags, bad config, missing required paths), 2 runtime or numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np
import torch

from .data import (
    ImageDataset,
    MaskSpec,
    TEST_STREAM,
    TRAIN_STREAM,
    generate_synthetic,
    load_checkpoint,
    load_digits_dataset,
    load_idx,
    sample_mask,
    save_checkpoint,
    save_idx,
)
from .errors import ConfigError, PrflowError
from .imputer import impute_dataset, shallow_init_batch
from .metrics import frechet_distance, gaussian_stats, rmse_missing, scc, train_benchmark_classifier
from .training import TrainConfig, Trainer, networks_from_state


class UsageError(Exception):
    """Bad invocation: wrong flags, malformed config, missing required paths."""


@dataclass
class RunConfig:
    """Everything a command needs, after merging defaults, file, and flags."""

    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str | None = None
    dataset_labels: str | None = None
    test_dataset: str | None = None
    test_dataset_labels: str | None = None
    train_size: int | None = None
    test_size: int | None = None
    image_size: tuple = (8, 8)
    missing_rate: float = 0.6
    mask_seed: int | None = None
    out: str = "runs/run"
    checkpoint: str | None = None
    passes: int = 2
    classifier_seed: int = 0
    classifier_epochs: int = 40

    def resolved_mask_seed(self) -> int:
        return self.train.seed if self.mask_seed is None else self.mask_seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"train"}


def parse_config(config_path, overrides: dict) -> RunConfig:
    """Merge defaults < config file < flag overrides into a RunConfig.

    The file is one flat JSON object; keys belong either to the training
    config or to the run-level settings. Unknown keys are rejected.
    """
    merged: dict = {}
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise UsageError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {config_path} must hold a JSON object")
        merged.update(loaded)
    merged.update({k: v for k, v in overrides.items() if v is not None})

    unknown = set(merged) - _TRAIN_KEYS - _RUN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")

    train_kwargs = {k: merged[k] for k in merged if k in _TRAIN_KEYS}
    run_kwargs = {k: merged[k] for k in merged if k in _RUN_KEYS}
    if "image_size" in run_kwargs:
        size = run_kwargs["image_size"]
        if not (isinstance(size, (list, tuple)) and len(size) == 2):
            raise UsageError("image_size must be a [height, width] pair")
        run_kwargs["image_size"] = (int(size[0]), int(size[1]))
    try:
        cfg = RunConfig(train=TrainConfig(**train_kwargs), **run_kwargs)
        cfg.train.validate()
        if not 0.0 <= cfg.missing_rate <= 1.0:
            raise ConfigError(f"missing_rate must lie in [0, 1], got {cfg.missing_rate}")
        if cfg.passes < 1:
            raise ConfigError("passes must be >= 1")
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def resolve_dataset(cfg: RunConfig, need_test: bool) -> tuple[ImageDataset, ImageDataset | None]:
    """Materialize the train and (optionally) test splits named by the config.

    ``dataset`` may be ``digits``, ``synthetic:<kind>``, a directory holding
    the four standard MNIST IDX files, or an images IDX path (with labels
    and test-split paths given as config keys).
    """
    name = cfg.dataset
    if name is None:
        raise UsageError("no dataset given (use --dataset or the config file)")
    if name == "digits":
        train, test = load_digits_dataset()
        return _truncate(train, cfg.train_size), _truncate(test, cfg.test_size) if need_test else None
    if name.startswith("synthetic:"):
        kind = name.split(":", 1)[1]
        n_train = cfg.train_size or 256
        n_test = cfg.test_size or 64
        train = generate_synthetic(kind, n_train, cfg.image_size, seed=cfg.train.seed)
        test = generate_synthetic(kind, n_test, cfg.image_size, seed=cfg.train.seed + 1) if need_test else None
        return train, test
    path = Path(name)
    if path.is_dir():
        train = load_idx(path / "train-images-idx3-ubyte", path / "train-labels-idx1-ubyte")
        test = load_idx(path / "t10k-images-idx3-ubyte", path / "t10k-labels-idx1-ubyte") if need_test else None
        return (
            _truncate(train, cfg.train_size if cfg.train_size is not None else 2000),
            _truncate(test, cfg.test_size if cfg.test_size is not None else 500) if need_test else None,
        )
    if not path.exists():
        raise UsageError(f"dataset path does not exist: {name}")
    train = load_idx(path, cfg.dataset_labels)
    test = None
    if need_test:
        if cfg.test_dataset is None:
            raise UsageError("this command needs a test split: set test_dataset in the config")
        test = load_idx(cfg.test_dataset, cfg.test_dataset_labels)
    return _truncate(train, cfg.train_size), _truncate(test, cfg.test_size) if need_test else None


def _truncate(ds: ImageDataset | None, size: int | None) -> ImageDataset | None:
    if ds is None or size is None or size >= len(ds):
        return ds
    return ds.subset(slice(0, size))


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _masked(images: np.ndarray, masks: np.ndarray) -> np.ndarray:
    if images.ndim == 4:
        masks = np.repeat(masks[..., None], images.shape[3], axis=3)
    return np.where(masks, images, 0.0)


def _require_checkpoint(cfg: RunConfig) -> Path:
    if cfg.checkpoint is None:
        raise UsageError("this command needs --checkpoint")
    return Path(cfg.checkpoint)


def cmd_train(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    train_ds, _ = resolve_dataset(cfg, need_test=False)
    mask_seed = cfg.resolved_mask_seed()
    spec = MaskSpec(cfg.missing_rate, seed=mask_seed, stream=TRAIN_STREAM)
    masks = sample_mask(train_ds.images.shape, spec)
    observed = _masked(train_ds.images, masks)
    with open(out / "mask_spec.json", "w", encoding="utf-8") as fh:
        json.dump({"missing_rate": spec.missing_rate, "seed": spec.seed, "stream": spec.stream},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    metrics_path = out / "metrics.jsonl"
    metrics_path.unlink(missing_ok=True)
    trainer = Trainer(observed, masks, cfg.train, mask_seed=mask_seed, metrics_path=metrics_path)
    records = trainer.train()
    ckpt_path = Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint.prflow"
    save_checkpoint(trainer.to_state(), ckpt_path)
    last = records[-1] if records else {}
    print(f"trained {trainer.round_index} rounds; "
          f"final J2 {last.get('j2', float('nan')):.6f}; checkpoint {ckpt_path}")
    return 0


def _recover_test_set(cfg: RunConfig, test_ds: ImageDataset, method: str):
    spec = MaskSpec(cfg.missing_rate, seed=cfg.resolved_mask_seed(), stream=TEST_STREAM)
    masks = sample_mask(test_ds.images.shape, spec)
    observed = _masked(test_ds.images, masks)
    if method == "prflow":
        state = load_checkpoint(_require_checkpoint(cfg))
        flow, imputer = networks_from_state(state)
        recovered = impute_dataset(observed, masks, flow, imputer, passes=cfg.passes)
    else:
        recovered = shallow_init_batch(observed, masks)
    return recovered, masks


def cmd_impute(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    _, test_ds = resolve_dataset(cfg, need_test=True)
    recovered, _ = _recover_test_set(cfg, test_ds, "prflow")
    save_idx(out / "recovered.idx", recovered.astype(np.float64))
    print(f"recovered {recovered.shape[0]} samples -> {out / 'recovered.idx'}")
    return 0


def _evaluate(cfg: RunConfig, method: str, row_name: str) -> int:
    out = _prepare_out(cfg)
    train_ds, test_ds = resolve_dataset(cfg, need_test=True)
    if test_ds.labels is None or train_ds.labels is None:
        raise UsageError("evaluation needs labeled train and test splits")
    recovered, masks = _recover_test_set(cfg, test_ds, method)
    rmse = rmse_missing(recovered, test_ds.images, masks)
    clf = train_benchmark_classifier(
        train_ds.images, train_ds.labels, test_ds.images, test_ds.labels,
        seed=cfg.classifier_seed, epochs=cfg.classifier_epochs,
    )
    fd = frechet_distance(
        gaussian_stats(clf.feature_array(recovered)),
        gaussian_stats(clf.feature_array(test_ds.images)),
    )
    acc_imp = clf.accuracy(recovered, test_ds.labels)
    row = {
        "dataset": cfg.dataset,
        "method": method,
        "missing_rate": cfg.missing_rate,
        "rmse": rmse,
        "fd": fd,
        "scc": scc(acc_imp, clf.acc_0),
        "acc_imputed": acc_imp,
        "acc_reference": clf.acc_0,
    }
    with open(out / row_name, "w", encoding="utf-8") as fh:
        json.dump(row, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{row['dataset']:<12} {method:<18} p={cfg.missing_rate:<5g} "
          f"rmse={rmse:.6f} fd={fd:.6f} scc={row['scc']:.6f}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    return _evaluate(cfg, "prflow", "evaluate.json")


def cmd_baseline(cfg: RunConfig) -> int:
    return _evaluate(cfg, "nearest-neighbor", "baseline.json")


def cmd_report(cfg: RunConfig, inputs: list[str]) -> int:
    if not inputs:
        raise UsageError("report needs at least one evaluate/baseline JSON file")
    out = _prepare_out(cfg)
    cells: dict = {}
    rates: set = set()
    for path in inputs:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                row = json.load(fh)
        except FileNotFoundError as exc:
            raise UsageError(f"report input not found: {path}") from exc
        rate = float(row["missing_rate"])
        rates.add(rate)
        for metric in ("rmse", "fd", "scc"):
            cells[(str(row["dataset"]), str(row["method"]), metric, rate)] = float(row[metric])
    rates_sorted = sorted(rates)
    w_d = max(12, *(len(d) for (d, _, _, _) in cells))
    w_m = max(18, *(len(m) for (_, m, _, _) in cells))
    header = f"{'dataset':<{w_d}} {'method':<{w_m}} {'metric':<6} |" + "".join(
        f" {r:>10g}" for r in rates_sorted
    )
    lines = [header, "-" * len(header)]
    keys = sorted({(d, m, met) for (d, m, met, _) in cells},
                  key=lambda k: (k[0], k[1], ("rmse", "fd", "scc").index(k[2])))
    for d, m, met in keys:
        cells_str = "".join(
            f" {cells[(d, m, met, r)]:>10.6f}" if (d, m, met, r) in cells else f" {'-':>10}"
            for r in rates_sorted
        )
        lines.append(f"{d:<{w_d}} {m:<{w_m}} {met:<6} |" + cells_str)
    text = "\n".join(lines) + "\n"
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage failures must exit 1
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="prflow",
        description="Prior-regularized normalizing-flow imputation for partially observed images.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, extra in (
        ("train", "fit a model on a masked training split"),
        ("impute", "recover a masked test split with a trained model"),
        ("evaluate", "RMSE / Fréchet distance / SCC of a trained model"),
        ("baseline", "the same metrics for the nearest-neighbor fill"),
        ("report", "aggregate evaluate outputs into a rate-sorted grid"),
    ):
        p = sub.add_parser(name, help=extra)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--dataset", default=None,
                       help="digits | synthetic:<kind> | MNIST directory | images IDX path")
        p.add_argument("--missing-rate", type=float, default=None, dest="missing_rate")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--lambda", type=float, default=None, dest="lam",
                       help="prior weight; omit for auto-equalization")
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--out", default=None, help="run directory for all artifacts")
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--max-rounds", type=int, default=None, dest="max_rounds")
        p.add_argument("--filters", choices=("derivative", "literal"), default=None)
        if name == "report":
            p.add_argument("inputs", nargs="*", help="evaluate/baseline JSON rows to aggregate")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        threads = os.environ.get("PRFLOW_THREADS", "1")
        try:
            threads = int(threads)
            if threads < 1:
                raise ValueError
        except ValueError:
            raise UsageError(f"PRFLOW_THREADS must be a positive integer, got {threads!r}")
        torch.set_num_threads(threads)
        overrides = {
            k: getattr(args, k, None)
            for k in ("dataset", "missing_rate", "seed", "lam", "alpha", "out",
                      "checkpoint", "max_rounds", "filters")
        }
        cfg = parse_config(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "impute":
            return cmd_impute(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "baseline":
            return cmd_baseline(cfg)
        return cmd_report(cfg, args.inputs)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (PrflowError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
