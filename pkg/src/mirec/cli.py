"""Command-line entry point: prepare, train, evaluate, export, report.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, dump_config, load_config
from .data import IngestError, load_prepared, parse_dataset, popularity_cdf, prepare_dataset, write_prepared
from .evaluation import (
    MetricMismatch,
    compare_report,
    evaluate,
    export_embeddings,
    read_metric_file,
    write_embeddings,
    write_metric_file,
)
from .model import MapperTooLarge
from .numeric import ChecksumError, NonFiniteGradientError
from .training import REGIMES, TrainingDivergence, UnknownRegime, load_run, save_run, train_regime

log = logging.getLogger("mirec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def cmd_prepare(cfg: RunConfig) -> dict:
    d = cfg.dataset
    if not d.path:
        raise ConfigError("[dataset] path is required for prepare")
    raw = parse_dataset(d.path, d.format, d.include_zero_ratings)
    ds = prepare_dataset(raw, d.head_fraction, d.title_vocab_size, d.split_seed, d.curriculum_seed)
    settings = {
        "format": d.format,
        "head_fraction": d.head_fraction,
        "title_vocab_size": d.title_vocab_size,
        "include_zero_ratings": d.include_zero_ratings,
        "split_seed": d.split_seed,
        "curriculum_seed": d.curriculum_seed,
    }
    digest = write_prepared(ds, cfg.dataset_dir, settings)
    summary = dict(ds.summary, dataset_hash=digest, cdf=popularity_cdf(ds.popularity, ds.n_items))
    return summary


def _load_dataset(cfg: RunConfig):
    try:
        return load_prepared(cfg.dataset_dir)
    except (IngestError, OSError) as exc:
        raise CommandError(f"no prepared dataset at {cfg.dataset_dir} (run `prepare` first): {exc}", EXIT_DATA)


def default_run_dir(cfg: RunConfig, regime: str) -> Path:
    return cfg.output / "runs" / f"{regime}-seed{cfg.training.seed}"


def cmd_train(cfg: RunConfig, regime: str, run_dir=None) -> Path:
    if regime not in REGIMES:
        raise UnknownRegime(regime)
    ds = _load_dataset(cfg)
    model = train_regime(regime, ds, cfg.model, cfg.training)
    out = Path(run_dir) if run_dir else default_run_dir(cfg, regime)
    save_run(model, out, cfg.model, cfg.training, ds.dataset_hash)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    return out


def cmd_evaluate(cfg: RunConfig, run_dir, output=None, label: str | None = None, target: str = "test") -> dict:
    ds = _load_dataset(cfg)
    model, manifest = load_run(run_dir)
    if manifest["dataset_hash"] != ds.dataset_hash:
        raise CommandError(
            f"run {run_dir} was trained on dataset {manifest['dataset_hash'][:12]}, "
            f"prepared dataset is {ds.dataset_hash[:12]}; refusing to evaluate",
            EXIT_DATA,
        )
    scorer = model.scorer(cfg.loss.lambda_pred)
    record = evaluate(scorer, ds, label or model.regime, cfg.evaluation.k, cfg.evaluation.policy(), target)
    default = "metrics.json" if target == "test" else f"metrics_{target}.json"
    write_metric_file(output or Path(run_dir) / default, record)
    return record


def cmd_export(cfg: RunConfig, run_dir, items: str = "all", output=None) -> Path:
    ds = _load_dataset(cfg)
    model, manifest = load_run(run_dir)
    if manifest["dataset_hash"] != ds.dataset_hash:
        raise CommandError("checkpoint and prepared dataset hashes differ; refusing to export", EXIT_DATA)
    if items == "head":
        ids = sorted(ds.head_tail.head_items)
    elif items == "tail":
        ids = sorted(ds.head_tail.tail_items)
    else:
        ids = range(ds.n_items)
    rows = export_embeddings(model.scorer(cfg.loss.lambda_pred), ds, ids)
    out = Path(output) if output else Path(run_dir) / f"embeddings_{items}.tsv"
    write_embeddings(out, rows)
    return out


def cmd_report(metric_files, output_prefix=None) -> str:
    records = [read_metric_file(p) for p in metric_files]
    text, rows = compare_report(records)
    if output_prefix:
        prefix = Path(output_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.txt").write_text(text, encoding="utf-8")
        Path(f"{prefix}.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mirec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("-c", "--config", help="INI run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        return sp

    with_config(sub.add_parser("prepare", help="ingest raw files into a processed dataset"))
    t = with_config(sub.add_parser("train", help="train one regime"))
    t.add_argument("--regime", required=True, help=f"one of: {', '.join(REGIMES)}")
    t.add_argument("--run-dir")
    e = with_config(sub.add_parser("evaluate", help="rank test users and write a metric file"))
    e.add_argument("--run-dir", required=True)
    e.add_argument("--output")
    e.add_argument("--label", help="regime name written into the metric file")
    e.add_argument("--target", choices=("test", "validation"), default="test",
                   help="held-out item to rank; tune on validation")
    x = with_config(sub.add_parser("export", help="write item embeddings"))
    x.add_argument("--run-dir", required=True)
    x.add_argument("--items", choices=("all", "head", "tail"), default="all")
    x.add_argument("--output")
    r = sub.add_parser("report", help="compare metric files")
    r.add_argument("metric_files", nargs="+")
    r.add_argument("--output-prefix")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(cmd_report(args.metric_files, args.output_prefix), end="")
            return EXIT_OK
        cfg = load_config(args.config, args.overrides)
        if args.command == "prepare":
            summary = cmd_prepare(cfg)
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "train":
            print(cmd_train(cfg, args.regime, args.run_dir))
        elif args.command == "evaluate":
            print(json.dumps(cmd_evaluate(cfg, args.run_dir, args.output, args.label, args.target), indent=2, sort_keys=True))
        elif args.command == "export":
            print(cmd_export(cfg, args.run_dir, args.items, args.output))
    except (ConfigError, UnknownRegime, MapperTooLarge) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (IngestError, ChecksumError, MetricMismatch, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, NonFiniteGradientError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
