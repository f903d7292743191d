"""Command-line surface: generate, train, eval, export-embeddings.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import ConfigError, TrainConfig, coerce
from .data import DataError, generate_gaussian_shift, generate_two_moons_shift, read_dataset_dir, write_dataset_dir
from .metrics import accuracy
from .train import Model, TrainingAborted, export_embeddings, predict, run_experiment, write_embeddings

log = logging.getLogger("domadapt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits on its own; raise instead so main() owns the exit code."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat JSON file of TrainConfig fields")
    group = p.add_argument_group("config overrides")
    for f in fields(TrainConfig):
        group.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar=f.type.upper(), default=None)


def _config_from(args) -> TrainConfig:
    base = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {}
    for f in fields(TrainConfig):
        raw = getattr(args, f"cfg_{f.name}")
        if raw is not None:
            overrides[f.name] = coerce(f.type, f.name, raw)
    return base.override(**overrides) if overrides else base


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="domadapt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic two-domain dataset")
    g.add_argument("--task", choices=("two-moons", "gaussian"), default="two-moons")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--m", type=int, default=2000, help="samples per domain")
    g.add_argument("--rotation", type=float, default=35.0, help="two-moons target rotation in degrees")
    g.add_argument("--noise", type=float, default=0.1, help="two-moons noise sd")
    g.add_argument("--classes", type=int, default=3, help="gaussian: number of clusters K")
    g.add_argument("--dim", type=int, default=2, help="gaussian: input dimension")
    g.add_argument("--shift", type=float, default=1.0, help="gaussian: norm of the mean shift")
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", type=Path, required=True, help="directory with source.csv and target.csv")
    t.add_argument("--out", type=Path, required=True)
    _add_config_flags(t)

    e = sub.add_parser("eval", help="target accuracy of a saved checkpoint")
    e.add_argument("--model", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)

    x = sub.add_parser("export-embeddings", help="write fused features of both domains as CSV")
    x.add_argument("--model", type=Path, required=True)
    x.add_argument("--data", type=Path, required=True)
    x.add_argument("--out", type=Path, required=True)
    return parser


def _generate(args) -> None:
    if args.task == "two-moons":
        s, t = generate_two_moons_shift(args.m, args.rotation, args.noise, args.seed)
    else:
        s, t = generate_gaussian_shift(args.classes, args.dim, args.shift, args.seed, m_per_domain=args.m)
    write_dataset_dir(s, t, args.out)
    print(f"wrote {args.out}/source.csv, target.csv, manifest.json")


def _train(args) -> None:
    config = _config_from(args)
    source, target = read_dataset_dir(args.data)
    result = run_experiment(config, source, target, args.out)
    summary = {
        "best_epoch": result.best_epoch,
        "best_target_acc": result.best_target_acc,
        "final_target_acc": result.final_target_acc,
    }
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))


def _load_model(path: Path):
    try:
        return Model.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None


def _eval(args) -> None:
    model, config = _load_model(args.model)
    source, target = read_dataset_dir(args.data)
    out = {
        "target_acc": accuracy(predict(model, target.features, config), target.labels),
        "source_acc": accuracy(predict(model, source.features, config), source.labels),
    }
    print(json.dumps(out))


def _export(args) -> None:
    model, config = _load_model(args.model)
    source, target = read_dataset_dir(args.data)
    write_embeddings(export_embeddings(model, config, source, target), args.out)
    print(f"wrote {args.out}")


COMMANDS = {"generate": _generate, "train": _train, "eval": _eval, "export-embeddings": _export}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
