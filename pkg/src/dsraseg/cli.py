"""Command-line entry point: ``dsraseg {synth,train,eval,gradcheck,ablate}``.

Configuration comes from one JSON file; flags only override scalar fields.
Exit codes: 0 success, 1 failed check (ablation), 2 config error, 3 data
error, 4 numeric failure (non-finite loss or failed gradcheck).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from .archive import ArchiveError
from .metrics import EvaluationError, MetricsReport, evaluate_dir
from .net import NetworkConfig, load_checkpoint
from .synth import Dataset, DatasetError, SynthSpec, generate, load_dataset, reference_dataset, save_dataset
from .synth import split as split_indices
from .synth import write_gray
from .train import (
    NumericError,
    TrainConfig,
    ablate_losses,
    evaluate_predictions,
    gradcheck_model,
    predict,
    tiny_config,
)
from .train import train as run_training

THREADS_ENV = "DSRASEG_THREADS"
GRAD_TOL = 1e-4
DEFAULT_SPLIT = (0.8, 0.2, 0.0)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("dsraseg")


class ConfigError(ValueError):
    pass


# --- config -----------------------------------------------------------------


def read_json(path: str | Path) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _build(kind, section: dict[str, Any], where: str):
    try:
        return kind.from_dict(section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def parse_run_config(data: dict[str, Any]) -> tuple[NetworkConfig, TrainConfig]:
    """``{"network": {...}, "train": {..., "loss": {...}}}``; both sections optional."""
    unknown = set(data) - {"network", "train", "synth", "split"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    net = _build(NetworkConfig, data.get("network", {}), "network")
    train = dict(data.get("train", {}))
    if "scales" in train:
        train["scales"] = tuple(train["scales"])
    return net, _build(TrainConfig, train, "train")


def parse_split(value) -> tuple[float, float, float]:
    if isinstance(value, str):
        value = value.split(",")
    try:
        ratios = tuple(float(v) for v in value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad split {value!r}") from e
    if len(ratios) != 3:
        raise ConfigError("split needs three ratios (train, val, test)")
    return ratios


def apply_overrides(net: NetworkConfig, cfg: TrainConfig, args) -> tuple[NetworkConfig, TrainConfig]:
    try:
        if getattr(args, "seed", None) is not None:
            # one seed drives both the initial weights and the batch order
            net = replace(net, seed=args.seed)
            cfg = replace(cfg, seed=args.seed)
        for flag, field_ in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr")):
            v = getattr(args, flag, None)
            if v is not None:
                cfg = replace(cfg, **{field_: v})
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return net, cfg


def resolve_threads(flag: int | None) -> int | None:
    if flag is not None:
        value = flag
    elif os.environ.get(THREADS_ENV):
        try:
            value = int(os.environ[THREADS_ENV])
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from e
    else:
        return None
    if value < 1:
        raise ConfigError("thread count must be >= 1")
    return value


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _data(path: str | None, data_cfg: dict[str, Any]) -> Dataset:
    if path is not None:
        return load_dataset(path)
    if "synth" in data_cfg:
        spec = _build(SynthSpec, data_cfg["synth"], "synth")
        ds = generate(spec)
        ds.splits = split_indices(len(ds), parse_split(data_cfg.get("split", DEFAULT_SPLIT)), spec.seed)
        return ds
    return reference_dataset()


# --- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    data = read_json(args.spec)
    ratios = parse_split(args.split if args.split is not None else data.pop("split", DEFAULT_SPLIT))
    if args.seed is not None:
        data["seed"] = args.seed
    spec = _build(SynthSpec, data, "spec")
    ds = generate(spec)
    try:
        ds.splits = split_indices(len(ds), ratios, spec.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out = save_dataset(ds, args.out)
    classes = sorted(int(c) for c in np.unique(ds.labels) if c > 0)
    print(f"wrote {len(ds)} images ({spec.size}x{spec.size}, K={spec.num_classes}, "
          f"contrast={spec.contrast}, seed={spec.seed}) to {out}")
    print(f"classes present: {classes}")
    print("splits: " + ", ".join(f"{k}={len(v)}" for k, v in ds.splits.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    data = read_json(args.config)
    net, cfg = apply_overrides(*parse_run_config(data), args)
    ds = load_dataset(args.data)
    if ds.num_classes != net.num_classes:
        raise ConfigError(f"dataset has {ds.num_classes} classes but network.num_classes={net.num_classes}")
    if ds.images.shape[2:] != (net.height, net.width):
        raise ConfigError(f"dataset images are {ds.images.shape[2:]}, network expects "
                          f"{(net.height, net.width)}")
    out = _out_dir(args.out)
    _write_json(out / "config.json", {"network": net.to_dict(), "train": cfg.to_dict()})
    record, _ = run_training(net, cfg, ds, out, resume=args.resume)
    last = record.epochs[-1]
    print(f"trained {len(record.epochs)} epochs: loss {last.loss['total']:.4f}, "
          f"val mDice {100 * last.val_mdice:.2f}")
    print(f"checkpoint: {out / record.checkpoint}")
    return EXIT_OK


def _report_from_checkpoint(args, out: Path) -> MetricsReport:
    params, net, _, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if args.split != "all":
        ds = ds.split_subset(args.split)
    if ds.num_classes != net.num_classes:
        raise ConfigError(f"dataset has {ds.num_classes} classes, checkpoint {net.num_classes}")
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    preds = predict(params, net, ds.images)
    if net.num_classes == 1:
        # evaluate the 8-bit maps exactly as written so both eval modes agree
        preds = np.round(preds * 255.0)
        for name, p in zip(ds.names, preds):
            write_gray(pred_dir / f"{name}.png", p)
        return evaluate_predictions(preds / 255.0, net, ds)
    for name, p in zip(ds.names, preds):
        write_gray(pred_dir / f"{name}.png", p)
    return evaluate_predictions(preds, net, ds)


def cmd_eval(args) -> int:
    out = _out_dir(args.out)
    by_dirs = args.pred is not None or args.gt is not None
    by_ckpt = args.checkpoint is not None or args.data is not None
    if by_dirs == by_ckpt or (by_dirs and not (args.pred and args.gt)) or (by_ckpt and not (args.checkpoint and args.data)):
        raise ConfigError("use either --pred/--gt or --checkpoint/--data")
    if by_dirs:
        if args.mode == "multiclass" and args.classes is None:
            raise ConfigError("--mode multiclass needs --classes")
        report = evaluate_dir(args.pred, args.gt, args.mode, args.classes or 1)
    else:
        report = _report_from_checkpoint(args, out)
    report.write(out)
    print(report.summary(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        net = tiny_config(args.size, args.classes, args.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    reports = gradcheck_model(net, max_entries=args.max_entries, seed=args.seed)
    worst = max(r.max_rel_error for r in reports.values())
    ok = worst < GRAD_TOL
    for group, r in reports.items():
        status = "pass" if r.max_rel_error < GRAD_TOL else "FAIL"
        print(f"{group:<10} {r.max_rel_error:.3e}  ({sum(r.checked.values())} entries)  {status}")
    print(f"max relative error {worst:.3e} (tolerance {GRAD_TOL:g}): {'PASS' if ok else 'FAIL'}")
    if args.out is not None:
        out = _out_dir(args.out)
        _write_json(out / "gradcheck.json", {
            "network": net.to_dict(),
            "tolerance": GRAD_TOL,
            "groups": {g: {"max_rel_error": r.max_rel_error, "entries": sum(r.checked.values())}
                       for g, r in reports.items()},
            "passed": ok,
        })
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    data = read_json(args.config)
    net, cfg = apply_overrides(*parse_run_config(data), args)
    ds = _data(args.data, data)
    out = _out_dir(args.out)
    seeds = list(range(args.seeds)) if args.seed_list is None else args.seed_list
    table = ablate_losses(net, cfg, ds, seeds, out)
    print(table.render(), end="")
    if table.full_worst_every_seed():
        print("FAIL: the full combination is the worst in every seed")
        return EXIT_CHECK
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help=f"cap BLAS/worker threads (default: ${THREADS_ENV} or library default)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    p = argparse.ArgumentParser(prog="dsraseg",
                                description="Dual-supervised reverse-attention segmentation workflows.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--spec", required=True, help="JSON synth spec (SynthSpec fields)")
    s.add_argument("--out", required=True, help="dataset directory to write")
    s.add_argument("--seed", type=int, help="override the seed in --spec")
    s.add_argument("--split", help="train,val,test ratios (default 0.8,0.2,0)")

    def overrides(q):
        q.add_argument("--seed", type=int, help="override network and training seeds")
        q.add_argument("--epochs", type=int, help="override train.epochs")
        q.add_argument("--batch-size", type=int, help="override train.batch_size")
        q.add_argument("--lr", type=float, help="override train.lr")

    t = sub.add_parser("train", parents=[common], help="train a network")
    t.add_argument("--config", required=True, help="run config JSON (network and train sections)")
    t.add_argument("--data", required=True, help="dataset directory written by `synth`")
    t.add_argument("--out", required=True, help="run directory (records, checkpoints)")
    t.add_argument("--resume", help="checkpoint directory (e.g. OUT/checkpoints/last)")
    overrides(t)

    e = sub.add_parser("eval", parents=[common], help="score predictions or a checkpoint")
    e.add_argument("--pred", help="directory of predicted maps (paired with --gt by file stem)")
    e.add_argument("--gt", help="directory of ground-truth maps")
    e.add_argument("--mode", choices=("binary", "multiclass"), default="binary",
                   help="binary: 8-bit probability maps; multiclass: label maps")
    e.add_argument("--classes", type=int, help="number of foreground classes (multiclass mode)")
    e.add_argument("--checkpoint", help="checkpoint directory to run on --data instead")
    e.add_argument("--data", help="dataset directory for --checkpoint")
    e.add_argument("--split", default="val", help="dataset split, or 'all'")
    e.add_argument("--out", required=True, help="directory for metrics.csv / metrics.txt")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full loss")
    g.add_argument("--size", type=int, default=32, help="input extent (multiple of 32)")
    g.add_argument("--classes", type=int, default=2, help="foreground classes K")
    g.add_argument("--max-entries", type=int, default=None,
                   help="entries perturbed per parameter tensor (default: all)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="write gradcheck.json here")

    a = sub.add_parser("ablate", parents=[common], help="loss-combination ablation")
    a.add_argument("--config", required=True, help="run config JSON; may carry synth and split sections")
    a.add_argument("--data", help="dataset directory (default: synth section or reference task)")
    a.add_argument("--seeds", type=int, default=3, help="use seeds 0..N-1")
    a.add_argument("--seed-list", type=int, nargs="+", help="explicit seeds (overrides --seeds)")
    a.add_argument("--out", required=True, help="directory for ablation.csv / ablation.txt and runs")
    a.add_argument("--epochs", type=int, help="override train.epochs")
    a.add_argument("--batch-size", type=int, help="override train.batch_size")
    a.add_argument("--lr", type=float, help="override train.lr")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = resolve_threads(args.threads)
        if threads is None:
            return COMMANDS[args.command](args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, EvaluationError, ArchiveError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        where = f" (diagnostics: {e.dump})" if e.dump else ""
        print(f"numeric failure: {e}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # remaining validation failures come from configs that parse but do not fit together
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
