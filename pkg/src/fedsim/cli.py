"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data ingestion error.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import load_config, load_preset, preset_description, preset_names, validate_config
from .errors import ConfigError, IngestionError
from .simulator import run_experiment, write_metrics_csv
from .synth import write_corpus


def _load(config_arg):
    """A path to a YAML file, or the name of a bundled preset."""
    if not os.path.exists(config_arg) and config_arg in preset_names():
        return load_preset(config_arg)
    return load_config(config_arg)


def _cmd_run(args):
    cfg = _load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.attribution:
        cfg.attribution = True
    metrics = run_experiment(cfg, workers=args.workers)
    write_metrics_csv(metrics, args.out, attribution=cfg.attribution)
    last = metrics[-1]
    print(
        f"wrote {args.out}: {len(metrics)} rounds, final validation_acc "
        f"{last.validation_acc:.4f}, backdoor_acc {last.backdoor_acc:.4f}"
    )
    return 0


def _cmd_validate(args):
    cfg = _load(args.config)
    validate_config(cfg, check_files=True)
    print(f"{args.config}: ok")
    return 0


def _cmd_presets(args):
    for name in preset_names():
        print(f"{name:24s} {preset_description(name)}")
    return 0


def _cmd_make_data(args):
    paths = write_corpus(args.out, seed=args.seed, n_train=args.train, n_val=args.val,
                         n_classes=args.classes)
    for key in ("train_images", "train_labels", "val_images", "val_labels"):
        print(f"{key}: {paths[key]}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="fedsim", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write the metrics CSV")
    run.add_argument("config", help="path to a flat YAML config file, or a preset name")
    run.add_argument("--out", default="metrics.csv", help="output CSV path")
    run.add_argument("--attribution", action="store_true",
                     help="enable per-round parameter attribution columns")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--workers", type=int, default=1,
                     help="thread pool size for local training (same results any size)")
    run.set_defaults(func=_cmd_run)

    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("config")
    val.set_defaults(func=_cmd_validate)

    pre = sub.add_parser("presets", help="list bundled experiment presets")
    pre.set_defaults(func=_cmd_presets)

    mk = sub.add_parser("make-data", help="generate a synthetic IDX corpus")
    mk.add_argument("--out", required=True, help="output directory")
    mk.add_argument("--train", type=int, default=10000)
    mk.add_argument("--val", type=int, default=10000)
    mk.add_argument("--classes", type=int, default=10)
    mk.add_argument("--seed", type=int, default=0)
    mk.set_defaults(func=_cmd_make_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except IngestionError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
