"""Planted-preference session generator.

Users fall into latent clusters. Each cluster has its own successor rule
per item, so the next item depends on both the current item and who is
browsing. Parameters live in a versioned JSON file shipped with the package.
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .dataio import DAY, Dataset, Interaction, PreprocessConfig, preprocess


def load_params(version: int = 1) -> dict:
    text = resources.files("sesshet").joinpath(f"data/synthetic_planted_v{version}.json").read_text()
    return json.loads(text)


def planted_interactions(params: dict | None = None) -> list[Interaction]:
    p = dict(load_params() if params is None else params)
    rng = np.random.default_rng(p["seed"])
    n_items, n_users = p["n_items"], p["n_users"]
    cluster = rng.permutation(np.arange(n_users) % p["n_clusters"])
    # background popularity: Zipf over a shuffled item order
    weights = 1.0 / np.arange(1, n_items + 1) ** p["zipf_exponent"]
    popularity = weights[rng.permutation(n_items)]
    popularity /= popularity.sum()
    successors = np.empty((p["n_clusters"], n_items, p["successors_per_item"]), dtype=np.int64)
    for c in range(p["n_clusters"]):
        for i in range(n_items):
            others = np.delete(np.arange(n_items), i)
            successors[c, i] = rng.choice(others, size=p["successors_per_item"], replace=False)

    spacing = p["days"] * DAY / p["n_sessions"]
    rows = []
    for s in range(p["n_sessions"]):
        user = int(rng.integers(n_users))
        c = cluster[user]
        length = int(rng.integers(p["session_len_min"], p["session_len_max"] + 1))
        cur = int(rng.choice(n_items, p=popularity))
        t0 = int(s * spacing)
        for k in range(length):
            rows.append(Interaction(f"u{user}", f"i{cur}", f"s{s}", t0 + 60 * k))
            if rng.random() < p["follow_prob"]:
                cur = int(rng.choice(successors[c, cur]))
            else:
                cur = int(rng.choice(n_items, p=popularity))
    return rows


def planted_config(params: dict | None = None) -> PreprocessConfig:
    p = load_params() if params is None else params
    return PreprocessConfig(min_item_freq=p["min_item_freq"], min_user_ops=1,
                            test_window_days=p["test_window_days"])


def planted_dataset(params: dict | None = None) -> Dataset:
    p = load_params() if params is None else params
    return preprocess(planted_interactions(p), planted_config(p))
