"""Desk-scale MovieLens sweep: train and evaluate each regime over several seeds.

    python3 scripts/desk_scale.py                       # configs/desk_scale.ini, seeds 0 1 2
    python3 scripts/desk_scale.py --regimes two_tower mirec --seeds 0
    python3 scripts/desk_scale.py --target validation   # for tuning

Data: $MIREC_ML1M_DIR, data/ml-1m, or data/ml-100k-as-1m (see
scripts/convert_ml100k.py). Finished (regime, seed) pairs are cached, so an
interrupted sweep resumes where it stopped.
"""

import argparse
import logging
from pathlib import Path

from mirec.evaluation import compare_report
from mirec.experiment import dumps_results, load_sweep, movielens_dir, run_sweep, summary_table

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_REGIMES = ["two_tower", "oversample", "undersample", "logq", "mirec"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "desk_scale.ini", type=Path)
    ap.add_argument("--data", type=Path, help="ML-1M-format directory (default: auto-detect)")
    ap.add_argument("--regimes", nargs="+", default=DEFAULT_REGIMES)
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ap.add_argument("--target", choices=("test", "validation"), default="test")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("--out", type=Path, help="result directory (default: <output dir>/sweeps)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    data = args.data or movielens_dir(ROOT)
    if data is None:
        raise SystemExit("no MovieLens data: set MIREC_ML1M_DIR or run scripts/convert_ml100k.py")
    # same dataset path and output root as the desk_scale acceptance tests, so
    # either one reuses the other's cached runs
    base = [f"dataset.path={data}", f"output.dir={ROOT / 'runs' / 'desk'}"]
    configs = load_sweep(args.config, args.regimes, [*base, *args.overrides])
    results = run_sweep(configs, args.seeds, args.out, args.target)

    out = args.out or next(iter(configs.values())).output / "sweeps"
    print(f"data: {data}  seeds: {args.seeds}  target: {args.target}")
    print(summary_table(results))
    first_seed = [recs[0] for recs in results.values()]
    text, _ = compare_report(first_seed)
    print(f"seed {args.seeds[0]} table:\n{text}")
    (out / f"summary_{args.target}.json").write_text(dumps_results(results), encoding="utf-8")


if __name__ == "__main__":
    main()
