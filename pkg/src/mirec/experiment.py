"""Multi-seed regime sweeps with a result cache.

A sweep trains every (regime, seed) pair, evaluates it, and writes one metric
file per pair. Finished pairs are cached under a key covering the resolved
config, the dataset hash and the package source, so re-running a sweep after
any code or config change retrains from scratch while an unchanged sweep is
free.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, dump_config, load_config
from .data import load_prepared, parse_dataset, prepare_dataset, write_prepared
from .evaluation import evaluate, read_metric_file, write_metric_file
from .training import REGIMES, UnknownRegime, train_regime

log = logging.getLogger(__name__)

SLICE_KEYS = [(s, m) for s in ("overall", "head", "tail") for m in ("hr", "ndcg")]


def source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def ensure_prepared(cfg: RunConfig):
    """(Re)build the prepared dataset from cfg.dataset.path and load it back.

    Preparation is deterministic and cheap, so it always runs; a directory left
    over from different dataset settings can never leak into a sweep.
    """
    d = cfg.dataset
    raw = parse_dataset(d.path, d.format, d.include_zero_ratings)
    ds = prepare_dataset(raw, d.head_fraction, d.title_vocab_size, d.split_seed, d.curriculum_seed)
    write_prepared(ds, cfg.dataset_dir)
    return load_prepared(cfg.dataset_dir)


def load_sweep(path, regimes, overrides=()) -> dict:
    """Per-regime RunConfigs from a sweep INI.

    A sweep INI is a run config plus an optional ``[regimes]`` section mapping
    a regime name to space-separated ``section.key=value`` overrides, e.g.
    ``logq = model.lambda_logq=0.3``. ``overrides`` apply to every regime,
    after the per-regime ones.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read sweep config {path}: {exc.strerror or exc}") from None
    per_regime = {}
    if parser.has_section("regimes"):
        per_regime = {k: v.split() for k, v in parser.items("regimes")}
        parser.remove_section("regimes")
    for name in list(per_regime) + list(regimes):
        if name not in REGIMES:
            raise UnknownRegime(name)
    buf = io.StringIO()
    parser.write(buf)
    out = {}
    for regime in regimes:
        cfg = load_config(text=buf.getvalue(), overrides=[*per_regime.get(regime, []), *overrides])
        if cfg.dataset.path and not Path(cfg.dataset.path).is_absolute():
            cfg.dataset.path = str((Path(path).parent / cfg.dataset.path).resolve())
        out[regime] = cfg
    return out


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, seed=seed))


def run_sweep(configs: dict, seeds, out_dir=None, target: str = "test") -> dict:
    """Train and evaluate every regime x seed; returns {regime: [record per seed]}.

    ``configs`` maps regime name to its RunConfig; all must share dataset
    settings and output root.
    """
    first = next(iter(configs.values()))
    for regime, cfg in configs.items():
        if cfg.dataset != first.dataset or cfg.output != first.output:
            raise ConfigError(f"regime {regime}: sweep regimes must share [dataset] and [output]")
    ds = ensure_prepared(first)
    root = Path(out_dir) if out_dir else first.output / "sweeps"
    results = {}
    for regime, cfg in configs.items():
        results[regime] = []
        for seed in seeds:
            run_cfg = with_seed(cfg, seed)
            key = hashlib.sha256(
                "\n".join([dump_config(run_cfg), ds.dataset_hash, source_digest(), regime, target]).encode()
            ).hexdigest()[:16]
            path = root / key / f"{regime}-seed{seed}.json"
            if path.exists():
                results[regime].append(read_metric_file(path))
                continue
            t0 = time.time()
            model = train_regime(regime, ds, run_cfg.model, run_cfg.training)
            record = evaluate(model.scorer(run_cfg.loss.lambda_pred), ds, regime, run_cfg.evaluation.k,
                              run_cfg.evaluation.policy(), target)
            write_metric_file(path, record)
            (path.parent / "config.ini").write_text(dump_config(run_cfg), encoding="utf-8")
            log.info("%s seed %d: %.0fs overall HR %.4f tail HR %.4f", regime, seed, time.time() - t0,
                     record["slices"]["overall"]["hr"], (record["slices"]["tail"] or {}).get("hr", float("nan")))
            results[regime].append(record)
    return results


def seed_means(records: list[dict]) -> dict:
    """Mean of each slice metric over seeds (slices absent in any seed give None)."""
    out = {}
    for s, m in SLICE_KEYS:
        vals = [r["slices"][s][m] for r in records if r["slices"][s] is not None]
        out[f"{s}_{m}"] = float(np.mean(vals)) if len(vals) == len(records) else None
    return out


def summary_table(results: dict) -> str:
    header = "regime".ljust(14) + "".join(f"{s[:4]} {m.upper()}".rjust(12) for s, m in SLICE_KEYS)
    lines = [header]
    for regime, records in results.items():
        mean = seed_means(records)
        cells = "".join(("-" if mean[f"{s}_{m}"] is None else f"{100 * mean[f'{s}_{m}']:.2f}").rjust(12)
                        for s, m in SLICE_KEYS)
        lines.append(regime.ljust(14) + cells)
    return "\n".join(lines) + "\n"


def dumps_results(results: dict) -> str:
    return json.dumps({r: {"seeds": recs, "mean": seed_means(recs)} for r, recs in results.items()},
                      indent=2, sort_keys=True) + "\n"


ML1M_ENV = "MIREC_ML1M_DIR"


def movielens_dir(repo_root) -> Path | None:
    """ML-1M-format directory for desk-scale runs, or None when nothing is available.

    Order: $MIREC_ML1M_DIR, data/ml-1m, then data/ml-100k-as-1m (ML-100K
    converted by scripts/convert_ml100k.py).
    """
    root = Path(repo_root)
    env = os.environ.get(ML1M_ENV)
    for cand in ([Path(env)] if env else []) + [root / "data" / "ml-1m", root / "data" / "ml-100k-as-1m"]:
        if (cand / "ratings.dat").is_file():
            return cand
    return None
