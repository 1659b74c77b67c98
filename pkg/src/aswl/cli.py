"""Command-line driver: train, eval, export, report.

Exit codes: 0 success, 2 input/flag error, 3 numeric divergence. Every
number the CLI prints can be recomputed from the checkpoint through
library calls.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass
from pathlib import Path

from .data import DATA_DIR_ENV, load_dataset, split_dataset
from .errors import DescriptorError, DivergenceError, DomainError, FormatError
from .layers import build_model, resolve_architecture
from .pruning import global_pruned_ratio, layer_ratios
from .store import (SPARSE_MAGIC, export_sparse, import_sparse, load_checkpoint,
                    report_compression, save_checkpoint, write_sparse)
from .training import TrainConfig, evaluate, make_optimizer, train


@dataclass
class RunConfig:
    command: str
    arch: str
    dataset: str
    data_dir: str | None
    out_dir: Path
    train: TrainConfig
    per_iteration: bool = False
    val_holdout: int = 5000


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, have {text}")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, have {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, have {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aswl",
                                     description="Attention-driven sparse training")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write checkpoint + reports")
    p_train.add_argument("--arch", default="mnist-cnn",
                         help="preset name or path to a descriptor file")
    p_train.add_argument("--dataset", default="mnist", choices=["mnist", "cifar10"])
    p_train.add_argument("--data-dir", default=None,
                         help=f"dataset root (default ${DATA_DIR_ENV} or ./data)")
    p_train.add_argument("--out", default="runs/latest", help="output directory")
    p_train.add_argument("--alpha", type=_positive_float, default=1.0)
    p_train.add_argument("--gamma", type=_nonneg_float, default=0.5)
    p_train.add_argument("--lambda", dest="l2", type=_nonneg_float, default=5e-4)
    p_train.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
    p_train.add_argument("--momentum", type=_nonneg_float, default=0.9)
    p_train.add_argument("--lr", type=_positive_float, default=0.001)
    p_train.add_argument("--lr-decay", type=_positive_float, default=0.98)
    p_train.add_argument("--epochs", type=_positive_int, default=5)
    p_train.add_argument("--batch-size", type=_positive_int, default=128)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--eval-every", type=int, default=0)
    p_train.add_argument("--val-holdout", type=_positive_int, default=5000)
    p_train.add_argument("--per-iteration", action="store_true",
                         help="also write one metrics row per iteration")
    p_train.add_argument("--dense-baseline", action="store_true",
                         help="disable pruning: gamma=0, attentions pinned to 1")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint or sparse export")
    p_eval.add_argument("--model", required=True, help="checkpoint or sparse file")
    p_eval.add_argument("--dataset", default="mnist", choices=["mnist", "cifar10"])
    p_eval.add_argument("--data-dir", default=None)
    p_eval.add_argument("--split", default="test", choices=["train", "test"])

    p_export = sub.add_parser("export", help="write the sparse inference artifact")
    p_export.add_argument("--checkpoint", required=True)
    p_export.add_argument("--out", required=True)

    p_report = sub.add_parser("report", help="layer table and compression summary")
    p_report.add_argument("--checkpoint", required=True)
    p_report.add_argument("--out", default=None, help="directory for layers.csv")
    return parser


def _resolve_arch_flag(arch: str) -> str:
    path = Path(arch)
    if path.suffix or path.exists():
        if not path.exists():
            raise FileNotFoundError(f"architecture file {arch} not found")
        return path.read_text()
    return resolve_architecture(arch)


def _write_metrics_csv(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "iteration", "train_acc", "val_acc", "ce_loss",
                         "sparsity_reg", "l2_term", "global_pruned_ratio"])
        for row in history.epochs:
            writer.writerow([row.epoch, row.iteration, repr(row.train_acc),
                             repr(row.val_acc), repr(row.ce_loss), repr(row.sparsity_reg),
                             repr(row.l2_term), repr(row.global_pruned_ratio)])


def _write_iterations_csv(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "total_loss", "ce_loss", "sparsity_reg",
                         "l2_term", "global_pruned_ratio"])
        for m in history.iterations:
            writer.writerow([m.iteration, repr(m.total_loss), repr(m.ce_loss),
                             repr(m.sparsity_term), repr(m.l2_term),
                             repr(m.global_pruned_ratio)])


def _write_layers_csv(path: Path, model, alpha: float) -> None:
    ratios = layer_ratios([l.attention_value for l in model.layers], alpha)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer_index", "layer_kind", "n_w", "attention",
                         "pruning_ratio", "mask_zeros"])
        for i, (layer, p) in enumerate(zip(model.layers, ratios)):
            writer.writerow([i, layer.kind, layer.n_w, repr(layer.attention_value),
                             repr(p), layer.mask_zeros()])


def cmd_train(args) -> int:
    cfg = TrainConfig(
        alpha=args.alpha,
        gamma=0.0 if args.dense_baseline else args.gamma,
        l2=args.l2,
        optimizer=args.optimizer,
        momentum=args.momentum,
        lr=args.lr,
        lr_decay=args.lr_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        eval_every=args.eval_every,
        freeze_attentions_at=1.0 if args.dense_baseline else None,
    )
    arch_text = _resolve_arch_flag(args.arch)
    full = load_dataset(args.dataset, root=args.data_dir, split="train")
    holdout = min(args.val_holdout, len(full) // 5)
    train_ds, val_ds = split_dataset(full, holdout)

    model = build_model(arch_text, seed=cfg.seed)
    optimizer = make_optimizer(cfg)
    history = train(model, train_ds, cfg, val_ds, optimizer=optimizer)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.npz", model, cfg, optimizer,
                    iteration=history.epochs[-1].iteration if history.epochs else 0,
                    epoch=cfg.epochs)
    _write_metrics_csv(out / "metrics.csv", history)
    _write_layers_csv(out / "layers.csv", model, cfg.alpha)
    if args.per_iteration:
        _write_iterations_csv(out / "iterations.csv", history)
    if history.epochs:
        last = history.epochs[-1]
        print(f"val_accuracy={last.val_acc:.6f} pruned_ratio={last.global_pruned_ratio:.6f}")
    return 0


def _load_any_model(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == SPARSE_MAGIC:
        return import_sparse(path)
    return load_checkpoint(path).model


def cmd_eval(args) -> int:
    path = Path(args.model)
    if not path.exists():
        raise FileNotFoundError(f"model file {path} not found")
    model = _load_any_model(path)
    dataset = load_dataset(args.dataset, root=args.data_dir, split=args.split)
    accuracy = evaluate(model, dataset)
    print(f"accuracy={accuracy:.6f} pruned_ratio={global_pruned_ratio(model):.6f}")
    return 0


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    write_sparse(export_sparse(ckpt.model), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_layers_csv(out_dir / "layers.csv", ckpt.model, ckpt.config.alpha)
    report = report_compression(ckpt.model)
    print(f"dense_bytes={report.dense_bytes} sparse_bytes={report.sparse_bytes} "
          f"compression_ratio={report.ratio:.6f} "
          f"global_pruned_ratio={global_pruned_ratio(ckpt.model):.6f}")
    return 0


_COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, FormatError, DescriptorError, DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
