"""Small long-tailed MovieLens-1M-format corpora for tests and smoke runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

GENRES = ["Action", "Comedy", "Drama", "Horror", "Romance", "Sci-Fi", "Thriller", "Western"]
WORDS = ["star", "wars", "night", "love", "dark", "return", "city", "last", "blue", "king", "dead", "summer"]


def write_synthetic_movielens(
    root, n_users: int = 60, n_items: int = 40, per_user=(5, 15), seed: int = 0, zipf: float = 1.1
) -> Path:
    """Write ratings.dat / users.dat / movies.dat with Zipf item popularity.

    Users prefer one genre, so item features carry signal a model can use.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    item_genre = rng.integers(0, len(GENRES), size=n_items)
    pop = 1.0 / np.arange(1, n_items + 1) ** zipf
    with open(root / "movies.dat", "w", encoding="latin-1") as fh:
        for i in range(n_items):
            words = " ".join(rng.choice(WORDS, size=rng.integers(1, 4)))
            extra = GENRES[(item_genre[i] + 1) % len(GENRES)]
            genres = GENRES[item_genre[i]] + ("|" + extra if rng.random() < 0.3 else "")
            fh.write(f"{i + 1}::{words.title()} ({1950 + int(rng.integers(0, 50))})::{genres}\n")
    user_genre = rng.integers(0, len(GENRES), size=n_users)
    with open(root / "users.dat", "w", encoding="latin-1") as fh:
        for u in range(n_users):
            gender = "MF"[int(rng.integers(0, 2))]
            age = int(rng.choice([1, 18, 25, 35, 45, 50, 56]))
            fh.write(f"{u + 1}::{gender}::{age}::{int(rng.integers(0, 21))}::{int(rng.integers(10000, 10010))}\n")
    ts = 978300000
    with open(root / "ratings.dat", "w", encoding="latin-1") as fh:
        for u in range(n_users):
            affinity = np.where(item_genre == user_genre[u], 4.0, 1.0)
            p = pop * affinity
            p /= p.sum()
            n = int(rng.integers(per_user[0], per_user[1] + 1))
            items = rng.choice(n_items, size=min(n, n_items), replace=False, p=p)
            for i in items:
                ts += int(rng.integers(1, 1000))
                fh.write(f"{u + 1}::{i + 1}::{int(rng.integers(1, 6))}::{ts}\n")
    return root
