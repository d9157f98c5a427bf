"""Command-line entry point: ``evpnet {train,eval,attack,analyze,export,selftest}``.

Settings come from built-in defaults, then ``--config FILE``, then
subcommand flags, then ``--set section.key=value`` (last wins).  Every run
writes the effective configuration to ``<out>/run-config.resolved``; feeding
that file back with ``--config`` reproduces the run.

Exit status: 0 on success, 1 on runtime failure, 2 on usage or configuration
errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import selftest
from .analysis import error_amplification, response_map_export, robustness_sweep, write_rows
from .attacks import AttackSpec, EvalRow, accuracy, adversarial_accuracy
from .config import ConfigError, RunConfig, parse_config
from .data import DatasetHandle, load_dataset, write_records
from .models import ModelGraph, build, load_model, save_model
from .serialize import load_checkpoint, save_checkpoint
from .tensor import DTYPES, precision
from .train import train

log = logging.getLogger("evpnet")

RESOLVED = "run-config.resolved"
CHECKPOINT = "model"


def _common() -> argparse.ArgumentParser:
    # Defaults are suppressed so the flags work before or after the subcommand.
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="configuration file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one setting (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (model init, shuffling, attack starts)")
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--threads", type=int, help="BLAS thread count (default 1, deterministic)")
    p.add_argument("--precision", choices=sorted(DTYPES), help="floating-point precision")
    p.add_argument("--checkpoint", help="checkpoint stem to load (eval/attack/analyze)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="evpnet", description="Train, attack and analyze extreme value preserving networks.",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", parents=[common], help="train a model, write log and checkpoint")
    p.add_argument("--family", help="model.family")
    p.add_argument("--depth", type=int, help="model.depth")
    p.add_argument("--epochs", type=int, help="train.epochs")
    p.add_argument("--adv-mode", choices=("none", "fgsm", "pgd"), help="train.adv_mode")

    p = sub.add_parser("eval", parents=[common], help="clean test accuracy of a checkpoint")
    p.add_argument("--batch", help="data.batch: evaluate a saved adversarial batch instead")

    p = sub.add_parser("attack", parents=[common], help="accuracy under one attack")
    p.add_argument("--family", choices=("fgsm", "rfgsm", "pgd"), help="attack.family")
    p.add_argument("--eps", type=float, help="attack.eps in pixels")
    p.add_argument("--iters", type=int, help="attack.iters")
    p.add_argument("--step", type=float, help="attack.step in pixels")
    p.add_argument("--source", help="attack.source: craft examples on this checkpoint (black-box)")
    p.add_argument("--export-batch", action="store_true",
                   help="save the adversarial batch to <out>/adversarial.evpt")

    p = sub.add_parser("analyze", parents=[common], help="error amplification and response maps")
    p.add_argument("--n-samples", type=int, help="analysis.n_samples")
    p.add_argument("--sweep", action="store_true", help="also run the robustness sweep")

    p = sub.add_parser("export", parents=[common], help="write the configured dataset as records")
    p.add_argument("--split", choices=("train", "test", "both"), default="both")

    p = sub.add_parser("selftest", parents=[common], help="gradient and identity suites")
    p.add_argument("--full", action="store_true", help="also run the 8-way ablation lattice")
    p.add_argument("--seeds", type=int, default=3, help="gradient-check seeds per case")
    p.add_argument("--trials", type=int, default=1000, help="randomized trials per identity")
    return parser


_FLAG_KEYS = {
    "train": {"family": "model.family", "depth": "model.depth", "epochs": "train.epochs",
              "adv_mode": "train.adv_mode"},
    "attack": {"family": "attack.family", "eps": "attack.eps", "iters": "attack.iters",
               "step": "attack.step", "source": "attack.source"},
    "eval": {"batch": "data.batch"},
    "analyze": {"n_samples": "analysis.n_samples"},
}


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = parse_config(getattr(args, "config", None))
    for flag in ("seed", "threads", "precision", "checkpoint"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.override(f"run.{flag}={value}")
    for attr, key in _FLAG_KEYS.get(args.command, {}).items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.override(f"{key}={value}")
    if getattr(args, "export_batch", False):
        cfg.override("attack.export_batch=true")
    if getattr(args, "sweep", False):
        cfg.override("analysis.sweep=true")
    for assignment in getattr(args, "set", []):
        cfg.override(assignment)
    if cfg["run"]["precision"] not in DTYPES:
        raise ConfigError(f"run.precision must be one of {sorted(DTYPES)}")
    if cfg["run"]["threads"] < 1:
        raise ConfigError("run.threads must be >= 1")
    try:
        cfg.model_config().validate()
    except ValueError as exc:
        raise ConfigError(f"[model]: {exc}") from None
    return cfg


def load_batch(stem) -> DatasetHandle:
    """An adversarial batch written by ``attack --export-batch``."""
    named, meta = load_checkpoint(stem)
    return DatasetHandle(named["images"], named["labels"].astype(np.int64), "batch",
                         int(meta.get("num_classes", 10)))


def _dataset(cfg: RunConfig, split: str) -> DatasetHandle:
    d = cfg["data"]
    if split == "test" and d["batch"]:
        return load_batch(d["batch"])
    n = d["n_train"] if split == "train" else d["n_test"]
    return load_dataset(d["source"], split, path=d["path"] or None, n=n or None, noise=d["noise"],
                        seed=d["seed"])


def _arrays(model: ModelGraph, handle: DatasetHandle, limit: int = 0):
    if limit:
        handle = handle.take(slice(0, limit))
    dt = model.parameters()[0].dtype
    return handle.images.astype(dt, copy=False), handle.labels


def _checkpoint(cfg: RunConfig, key: str = "checkpoint", section: str = "run") -> ModelGraph:
    stem = cfg[section][key]
    if not stem:
        raise RuntimeError(f"no checkpoint given (--checkpoint or {section}.{key})")
    return load_model(stem)


def cmd_train(cfg: RunConfig, out: Path) -> None:
    mcfg = cfg.model_config()
    train_set, test_set = _dataset(cfg, "train"), _dataset(cfg, "test")
    if train_set.num_classes != mcfg.num_classes:
        log.info("model.num_classes set to %d to match the dataset", train_set.num_classes)
        mcfg.num_classes = train_set.num_classes
    model = build(mcfg, seed=cfg["run"]["seed"])
    spec = cfg.train_spec()
    csv_path = out / "train_log.csv"

    def echo(row):
        adv = "" if row["adv_acc"] is None else f" adv_acc {row['adv_acc']:.4f}"
        print(f"epoch {row['epoch']} lr {row['lr']:g} loss {row['loss']:.4f} "
              f"clean_acc {row['clean_acc']:.4f}{adv}", flush=True)

    tlog = train(model, train_set, spec, eval_set=test_set, on_epoch=echo)
    tlog.to_csv(csv_path)
    save_model(model, out / CHECKPOINT)
    print(f"wrote {csv_path} and {out / CHECKPOINT}.evpt")


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    model = _checkpoint(cfg)
    x, y = _arrays(model, _dataset(cfg, "test"), cfg["attack"]["limit"])
    acc = accuracy(model, x, y)
    write_rows([EvalRow("clean", 0.0, 0, acc)], out / "eval.csv")
    print(f"accuracy {acc:.4f}")


def cmd_attack(cfg: RunConfig, out: Path) -> None:
    model = _checkpoint(cfg)
    source = load_model(cfg["attack"]["source"]) if cfg["attack"]["source"] else None
    spec = cfg.attack_spec()
    x, y = _arrays(model, _dataset(cfg, "test"), cfg["attack"]["limit"])
    keep: Optional[list] = [] if cfg["attack"]["export_batch"] else None
    clean = accuracy(model, x, y)
    adv = adversarial_accuracy(model, x, y, spec, seed=cfg["run"]["seed"], source=source, keep=keep)
    write_rows([EvalRow("clean", 0.0, 0, clean),
                EvalRow(spec.label, spec.eps_pixels, spec.effective_iters, adv)], out / "attack.csv")
    if keep is not None:
        images = np.concatenate(keep) if keep else x[:0]
        # Labels travel as float64, which the container stores exactly.
        save_checkpoint(out / "adversarial", {"images": images, "labels": y.astype(np.float64)},
                        {"attack": spec.label, "eps_pixels": spec.eps_pixels,
                         "num_classes": model.config.num_classes})
    print(f"clean {clean:.4f} {spec.label} eps {spec.eps_pixels:g} accuracy {adv:.4f}")


def cmd_analyze(cfg: RunConfig, out: Path) -> None:
    model = _checkpoint(cfg)
    a = cfg["analysis"]
    x, y = _arrays(model, _dataset(cfg, "test"), cfg["attack"]["limit"])
    spec = AttackSpec.parse(a["attack"], eps_pixels=a["eps"])
    trace = error_amplification(model, x, y, spec, n_samples=a["n_samples"], seed=cfg["run"]["seed"])
    trace.to_csv(out / "gamma.csv")
    if trace.flagged:
        print(f"warning: zero benign response at taps {', '.join(trace.flagged)}", file=sys.stderr)
    maps = out / "maps"
    maps.mkdir(exist_ok=True)
    for b in a["maps"]:
        for i in range(min(a["map_images"], len(x))):
            response_map_export(model, x[i], b, maps / f"tap{b:02d}_img{i:03d}.pgm")
    if a["sweep"]:
        report = robustness_sweep(model, x, y, a["sweep_eps"], a["sweep_families"], seed=cfg["run"]["seed"])
        report.to_csv(out / "sweep.csv")
    for name, m, s in zip(trace.taps, trace.mean, trace.std):
        print(f"{name:<16s} gamma {m:.4f} +- {s:.4f}")


def cmd_export(cfg: RunConfig, out: Path, split: str) -> None:
    for s in (("train", "test") if split == "both" else (split,)):
        handle = _dataset(cfg, s)
        write_records(handle, out / f"{s}.bin")
        print(f"wrote {len(handle)} records to {out / f'{s}.bin'}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
    except (ConfigError, OSError) as exc:
        print(f"evpnet: error: {exc}", file=sys.stderr)
        return 2
    out = Path(getattr(args, "out", "out"))
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg.write(out / RESOLVED)
        with threadpool_limits(limits=cfg["run"]["threads"]), precision(cfg["run"]["precision"]), \
                warnings.catch_warnings():
            warnings.simplefilter("default")
            if args.command == "train":
                cmd_train(cfg, out)
            elif args.command == "eval":
                cmd_eval(cfg, out)
            elif args.command == "attack":
                cmd_attack(cfg, out)
            elif args.command == "analyze":
                cmd_analyze(cfg, out)
            elif args.command == "export":
                cmd_export(cfg, out, args.split)
            elif args.command == "selftest":
                ok = selftest.run(full=args.full, seeds=range(args.seeds), trials=args.trials)
                return 0 if ok else 1
    except Exception as exc:
        print(f"evpnet: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if verbose:
            raise
        return 1
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
