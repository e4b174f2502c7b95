"""Command-line entry point: ``iglide <command> [--config PATH] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import pandas as pd

from . import data as D
from . import pipeline as P
from .config import ConfigError, ExperimentConfig, load_config, with_overrides
from .models import MODEL_KINDS
from .plotting import plot_hi_trajectory, plot_loss
from .serialize import CheckpointError

log = logging.getLogger("iglide")


def _seed_list(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in s.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {s!r}") from None


def _methods(args, cfg: ExperimentConfig):
    sel = list(cfg.methods)
    if getattr(args, "model", None):
        sel = [m for m in sel if m[0] in args.model]
    if getattr(args, "hi_set", None):
        sel = [m for m in sel if m[1] in args.hi_set]
    if not sel:
        raise ConfigError("no configured method matches the --model/--hi-set selection")
    return sel


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="experiment YAML")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--seed-list", type=_seed_list, default=argparse.SUPPRESS, help="e.g. 0,1,2")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="iglide", parents=[common], description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("prepare", parents=[common], help="parse, label, normalise, persist the dataset")
    for name, hlp in (
        ("train", "train autoencoders and fit NAP statistics"),
        ("extract", "write HI trajectory CSVs"),
        ("fit-rul", "fit the RUL forest on train HIs"),
        ("evaluate", "RMSE on test HIs, RunReports and comparison table"),
    ):
        sp = sub.add_parser(name, parents=[common], help=hlp)
        sp.add_argument("--model", nargs="+", choices=sorted(MODEL_KINDS))
        if name != "train":
            sp.add_argument("--hi-set", nargs="+", choices=["groups", "mono", "gonzalez"])
        if name == "train":
            sp.add_argument("--force", action="store_true", help="retrain even if a matching checkpoint exists")
    sub.add_parser("run-all", parents=[common], help="every stage for every configured method and seed")

    sp = sub.add_parser("synth", parents=[common], help="write a synthetic fleet as CSV")
    sp.add_argument("--output", type=Path, required=True)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--n-units", type=int)
    sp.add_argument("--truncate", action="store_true")

    sp = sub.add_parser("plot", parents=[common], help="render an HI trajectory or loss curve")
    sp.add_argument("input", type=Path, help="HI CSV or *_loss.csv")
    sp.add_argument("--unit", type=int, default=1)
    sp.add_argument("--output", type=Path)
    sp.add_argument("--clip-pct", type=float, default=99.0)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    return with_overrides(
        cfg,
        out=getattr(args, "out", None),
        seeds=getattr(args, "seed_list", None),
        jobs=getattr(args, "jobs", None),
    )


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    stage = args.command
    try:
        cfg = _config(args)
        if stage == "prepare":
            meta = P.cmd_prepare(cfg)
            print(f"prepared {meta['subset']}: {meta['n_train_units']} train / {meta['n_test_units']} test units, "
                  f"{meta['n_healthy_rows']} healthy rows -> {P.layout(cfg).bundle}")
        elif stage == "train":
            for path in P.cmd_train(cfg, args.model, force=args.force):
                print(path)
        elif stage == "extract":
            for paths in P.cmd_extract(cfg, _methods(args, cfg)):
                for path in paths:
                    print(path)
        elif stage == "fit-rul":
            for path in P.cmd_fit_rul(cfg, _methods(args, cfg)):
                print(path)
        elif stage == "evaluate":
            P.cmd_evaluate(cfg, _methods(args, cfg))
            print((P.layout(cfg).reports / "comparison.txt").read_text(), end="")
        elif stage == "run-all":
            P.cmd_run_all(cfg)
            print((P.layout(cfg).reports / "comparison.txt").read_text(), end="")
        elif stage == "synth":
            scfg = cfg.dataset.synth
            if args.n_units:
                scfg = dataclasses.replace(scfg, n_units=args.n_units)
            if args.truncate:
                scfg = dataclasses.replace(scfg, truncate=True)
            ts = D.make_synthetic(scfg, args.seed)
            P.write_csv(args.output, D.to_frame(ts))
            print(f"{len(ts)} units -> {args.output}")
        elif stage == "plot":
            df = pd.read_csv(args.input)
            if "train_loss" in df:
                out = plot_loss(df, args.output or args.input.with_suffix(".svg"))
            else:
                out = plot_hi_trajectory(df, args.unit, args.output or args.input.with_name(
                    f"{args.input.stem}_unit{args.unit}.svg"), args.clip_pct)
            print(out)
    except (P.StageError, ConfigError, D.DataError, CheckpointError, ValueError, FileNotFoundError) as exc:
        msg = str(exc)
        if not msg.startswith("["):
            msg = f"[{stage}] {msg}"
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
