"""Interaction log ingestion, filter cascade, train/test split and batching."""

from __future__ import annotations

import csv
import hashlib
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

DAY = 86400
ANONYMOUS_USERS = frozenset({"na", "nan", "null", "none", "anonymous", "-1"})


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    session_id: str
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")
        if not (self.user_id and self.item_id and self.session_id):
            raise DataError("interaction ids must be non-empty")


@dataclass(frozen=True)
class PreprocessConfig:
    min_item_freq: int = 5
    min_user_ops: int = 1
    min_session_len: int = 2
    test_window_days: int = 7

    def __post_init__(self):
        for name in ("min_item_freq", "min_user_ops", "min_session_len", "test_window_days"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


PRESETS = {
    "diginetica": PreprocessConfig(min_item_freq=5, min_user_ops=1, test_window_days=7),
    "tmall": PreprocessConfig(min_item_freq=10, min_user_ops=20, test_window_days=15),
}


class Vocab:
    """Bijection between external string ids and dense indices 0..n-1."""

    def __init__(self, ids=()):
        self.ids: list[str] = []
        self.index: dict[str, int] = {}
        for x in ids:
            self.add(x)

    def add(self, ext: str) -> int:
        idx = self.index.get(ext)
        if idx is None:
            idx = self.index[ext] = len(self.ids)
            self.ids.append(ext)
        return idx

    def __len__(self):
        return len(self.ids)

    def __contains__(self, ext):
        return ext in self.index

    def __getitem__(self, ext: str) -> int:
        return self.index[ext]

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.ids == other.ids


@dataclass
class Dataset:
    train_sessions: list[tuple[int, list[int]]]
    test_sessions: list[tuple[int, list[int]]]
    item_vocab: Vocab
    user_vocab: Vocab
    session_vocab: Vocab

    @property
    def n_items(self) -> int:
        return len(self.item_vocab)

    @property
    def n_users(self) -> int:
        return len(self.user_vocab)

    @property
    def n_sessions(self) -> int:
        return len(self.session_vocab)

    def stats(self) -> dict[str, int]:
        return {
            "items": self.n_items,
            "train_sessions": len(self.train_sessions),
            "test_sessions": len(self.test_sessions),
            "users": self.n_users,
        }

    def vocab_hash(self) -> str:
        h = hashlib.sha256()
        for name, vocab in (("item", self.item_vocab), ("user", self.user_vocab), ("session", self.session_vocab)):
            h.update(name.encode())
            for ext in vocab.ids:
                h.update(b"\x00" + ext.encode("utf-8"))
        return h.hexdigest()[:16]


def parse_log(path, delimiter: str = ",") -> list[Interaction]:
    """Read ``user,item,session,timestamp`` rows; a header row is skipped if present."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"interaction log not found: {path}")
    rows: list[Interaction] = []
    errors: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            rec = [f.strip() for f in rec]
            if lineno == 1 and rec[-1].lower() in ("timestamp", "time", "ts", "eventdate"):
                continue
            if len(rec) != 4:
                errors.append(f"line {lineno}: expected 4 fields, got {len(rec)}")
                continue
            user, item, session, ts = rec
            if not (user and item and session and ts):
                errors.append(f"line {lineno}: empty field")
                continue
            try:
                stamp = int(ts)
            except ValueError:
                errors.append(f"line {lineno}: unparseable timestamp {ts!r}")
                continue
            if stamp < 0:
                errors.append(f"line {lineno}: negative timestamp {stamp}")
                continue
            rows.append(Interaction(user, item, session, stamp))
    if errors:
        raise DataError(f"{path}: " + "; ".join(errors))
    return rows


def write_log(rows: list[Interaction], path, delimiter: str = ","):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["user", "item", "session", "timestamp"])
        for r in rows:
            w.writerow([r.user_id, r.item_id, r.session_id, r.timestamp])


def preprocess(raw: list[Interaction], cfg: PreprocessConfig) -> Dataset:
    """Filter cascade applied once, in a fixed order, then a time-based split.

    1. drop anonymous users
    2. drop users with fewer than ``min_user_ops`` interactions
    3. drop items seen fewer than ``min_item_freq`` times
    4. drop sessions shorter than ``min_session_len``
    5. sessions ending within the last ``test_window_days`` become test
    6. drop test sessions whose user or any item is unknown to train
    """
    if not raw:
        raise DataError("no interactions to preprocess")
    rows = [r for r in raw if r.user_id.lower() not in ANONYMOUS_USERS]
    if cfg.min_user_ops > 1:
        ops = Counter(r.user_id for r in rows)
        rows = [r for r in rows if ops[r.user_id] >= cfg.min_user_ops]
    freq = Counter(r.item_id for r in rows)
    rows = [r for r in rows if freq[r.item_id] >= cfg.min_item_freq]

    # session -> [(timestamp, input position, item)], sessions in first-seen order;
    # a session's user is the user of its first row
    sessions: dict[str, list[tuple[int, int, str]]] = {}
    owner: dict[str, str] = {}
    for pos, r in enumerate(rows):
        sessions.setdefault(r.session_id, []).append((r.timestamp, pos, r.item_id))
        owner.setdefault(r.session_id, r.user_id)
    kept = {}
    for sid, events in sessions.items():
        if len(events) >= cfg.min_session_len:
            kept[sid] = sorted(events)
    if not kept:
        raise DataError("no sessions survive filtering")

    last_ts = max(ev[-1][0] for ev in kept.values())
    split = last_ts - cfg.test_window_days * DAY
    train_raw = [(sid, ev) for sid, ev in kept.items() if ev[-1][0] <= split]
    test_raw = [(sid, ev) for sid, ev in kept.items() if ev[-1][0] > split]

    items, users, sess = Vocab(), Vocab(), Vocab()
    train = []
    for sid, events in train_raw:
        u = users.add(owner[sid])
        sess.add(sid)
        train.append((u, [items.add(it) for _, _, it in events]))
    test = []
    for sid, events in test_raw:
        if owner[sid] not in users or any(it not in items for _, _, it in events):
            continue
        test.append((users[owner[sid]], [items[it] for _, _, it in events]))
    if not train:
        raise DataError("empty train split after filtering")
    if not test:
        raise DataError("empty test split after filtering")
    return Dataset(train, test, items, users, sess)


def to_interactions(ds: Dataset) -> list[Interaction]:
    """Re-serialise train and test sessions as interactions (synthetic timestamps).

    Test sessions are placed 10000 days after the last train interaction, so
    any test window shorter than that reproduces the split.
    """
    rows = []
    t = 0
    for si, (u, items) in enumerate(ds.train_sessions):
        for it in items:
            rows.append(Interaction(ds.user_vocab.ids[u], ds.item_vocab.ids[it], ds.session_vocab.ids[si], t))
            t += 1
    t += 10000 * DAY
    for ti, (u, items) in enumerate(ds.test_sessions):
        for it in items:
            rows.append(Interaction(ds.user_vocab.ids[u], ds.item_vocab.ids[it], f"__test{ti}", t))
            t += 1
    return rows


# persistence ----------------------------------------------------------------

def _write_vocab(vocab: Vocab, path: Path):
    with open(path, "w", encoding="utf-8") as fh:
        for i, ext in enumerate(vocab.ids):
            fh.write(f"{i}\t{ext}\n")


def _read_vocab(path: Path) -> Vocab:
    vocab = Vocab()
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            idx, ext = line.rstrip("\n").split("\t", 1)
            if int(idx) != i:
                raise DataError(f"{path}: non-contiguous index at line {i + 1}")
            vocab.add(ext)
    return vocab


def _write_sessions(sessions, path: Path):
    with open(path, "w", encoding="utf-8") as fh:
        for u, items in sessions:
            fh.write(f"{u}\t{','.join(map(str, items))}\n")


def _read_sessions(path: Path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            u, items = line.rstrip("\n").split("\t")
            out.append((int(u), [int(x) for x in items.split(",")]))
    return out


def save_dataset(ds: Dataset, outdir):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    _write_vocab(ds.item_vocab, out / "items.tsv")
    _write_vocab(ds.user_vocab, out / "users.tsv")
    _write_vocab(ds.session_vocab, out / "sessions.tsv")
    _write_sessions(ds.train_sessions, out / "train.txt")
    _write_sessions(ds.test_sessions, out / "test.txt")
    (out / "vocab_hash").write_text(ds.vocab_hash() + "\n")


def load_dataset(indir) -> Dataset:
    d = Path(indir)
    if not (d / "train.txt").is_file():
        raise FileNotFoundError(f"no dataset in {d}")
    ds = Dataset(
        _read_sessions(d / "train.txt"),
        _read_sessions(d / "test.txt"),
        _read_vocab(d / "items.tsv"),
        _read_vocab(d / "users.tsv"),
        _read_vocab(d / "sessions.tsv"),
    )
    stored = d / "vocab_hash"
    if stored.exists() and stored.read_text().strip() != ds.vocab_hash():
        raise DataError(f"{d}: vocabulary hash mismatch")
    return ds


# batching -------------------------------------------------------------------

@dataclass
class SessionBatch:
    items: np.ndarray    # (B, L) int64, right-padded with 0
    mask: np.ndarray     # (B, L) bool
    lengths: np.ndarray  # (B,)
    targets: np.ndarray  # (B,)
    users: np.ndarray    # (B,)

    def __len__(self):
        return len(self.targets)


def session_instances(sessions, prefixes: str = "all") -> list[tuple[int, list[int], int]]:
    """(user, prefix, target) triples; ``prefixes='last'`` keeps only the full prefix."""
    if prefixes not in ("all", "last"):
        raise ValueError(f"prefixes must be 'all' or 'last', got {prefixes!r}")
    out = []
    for u, items in sessions:
        starts = range(1, len(items)) if prefixes == "all" else [len(items) - 1]
        for k in starts:
            out.append((u, items[:k], items[k]))
    return out


def make_batch(instances) -> SessionBatch:
    B = len(instances)
    L = max(len(p) for _, p, _ in instances)
    items = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, (_, prefix, _) in enumerate(instances):
        items[b, :len(prefix)] = prefix
        mask[b, :len(prefix)] = True
    return SessionBatch(
        items=items,
        mask=mask,
        lengths=mask.sum(axis=1),
        targets=np.array([t for _, _, t in instances], dtype=np.int64),
        users=np.array([u for u, _, _ in instances], dtype=np.int64),
    )


def batch_iter(ds: Dataset, batch_size: int, seed: int, prefixes: str = "all") -> Iterator[SessionBatch]:
    """Shuffle train sessions with ``seed``, expand to instances, chunk into batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(ds.train_sessions))
    instances = session_instances([ds.train_sessions[i] for i in order], prefixes)
    for start in range(0, len(instances), batch_size):
        yield make_batch(instances[start:start + batch_size])


def eval_batches(sessions, batch_size: int = 256, prefixes: str = "all") -> Iterator[SessionBatch]:
    instances = session_instances(sessions, prefixes)
    for start in range(0, len(instances), batch_size):
        yield make_batch(instances[start:start + batch_size])


def default_data_dir() -> Path:
    return Path(os.environ.get("SESSHET_DATA_DIR", "sesshet-data"))
