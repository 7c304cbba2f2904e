"""Convert the atomic-file ML-100K release (as shipped with RecBole) into the
ML-1M ``::``-separated layout read by ``mirec prepare``.

    python3 scripts/convert_ml100k.py SRC_DIR data/ml-100k-as-1m

SRC_DIR must hold ml-100k.inter, ml-100k.user and ml-100k.item (tab separated,
typed headers). Ages are bucketed into the ML-1M age codes; items with no
release year are skipped, as the loader would drop them anyway.
"""

import argparse
import csv
from pathlib import Path

AGE_CODES = [(18, 1), (25, 18), (35, 25), (45, 35), (50, 45), (56, 50)]


def age_code(age: int) -> int:
    for bound, code in AGE_CODES:
        if age < bound:
            return code
    return 56


def read_atomic(path: Path):
    with path.open(encoding="latin-1", newline="") as fh:
        rows = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = [h.split(":")[0] for h in next(rows)]
        for row in rows:
            yield dict(zip(header, row))


def convert(src: Path, dst: Path) -> dict:
    dst.mkdir(parents=True, exist_ok=True)
    counts = {"users": 0, "items": 0, "ratings": 0, "skipped_items": 0}

    with (dst / "users.dat").open("w", encoding="latin-1") as out:
        for r in read_atomic(src / "ml-100k.user"):
            out.write(f"{r['user_id']}::{r['gender']}::{age_code(int(r['age']))}::{r['occupation']}::{r['zip_code']}\n")
            counts["users"] += 1

    kept = set()
    with (dst / "movies.dat").open("w", encoding="latin-1") as out:
        for r in read_atomic(src / "ml-100k.item"):
            year = r.get("release_year", "").strip()
            genres = r.get("class", "").split()
            if not year.isdigit() or not genres:
                counts["skipped_items"] += 1
                continue
            out.write(f"{r['item_id']}::{r['movie_title']} ({year})::{'|'.join(genres)}\n")
            kept.add(r["item_id"])
            counts["items"] += 1

    with (dst / "ratings.dat").open("w", encoding="latin-1") as out:
        for r in read_atomic(src / "ml-100k.inter"):
            if r["item_id"] in kept:
                out.write(f"{r['user_id']}::{r['item_id']}::{int(float(r['rating']))}::{int(float(r['timestamp']))}\n")
                counts["ratings"] += 1
    return counts


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src", type=Path)
    ap.add_argument("dst", type=Path)
    args = ap.parse_args()
    print(convert(args.src, args.dst))


if __name__ == "__main__":
    main()
