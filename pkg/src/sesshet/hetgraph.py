"""Heterogeneous item/session/user graph and restart-based neighbor sampling."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from .dataio import Dataset


class Kind(IntEnum):
    ITEM = 0
    SESSION = 1
    USER = 2


KIND_NAMES = {Kind.ITEM: "item", Kind.SESSION: "session", Kind.USER: "user"}
KIND_BY_NAME = {v: k for k, v in KIND_NAMES.items()}


class NodeRef(NamedTuple):
    kind: Kind
    index: int

    def __str__(self):
        return f"{KIND_NAMES[self.kind]}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "NodeRef":
        name, idx = text.split(":")
        return cls(KIND_BY_NAME[name], int(idx))


class HetGraph:
    """Immutable typed graph.

    ``transitions`` holds the directed item edges with multiplicity;
    ``edges`` the undirected item-session, item-user and session-user links.
    Nodes are also addressed by a flat id: items first, then sessions, then
    users. The sampler's view (``indptr``/``indices``) is the union of both
    edge sets with item transitions usable in either direction.
    """

    def __init__(self, n_items: int, n_sessions: int, n_users: int,
                 transitions: dict[tuple[int, int], int], edges: set[tuple[NodeRef, NodeRef]]):
        self.n_items = n_items
        self.n_sessions = n_sessions
        self.n_users = n_users
        self.transitions = dict(sorted(transitions.items()))
        self.edges = sorted(edges)
        self.item_item_out: list[Counter] = [Counter() for _ in range(n_items)]
        for (a, b), cnt in self.transitions.items():
            self.item_item_out[a][b] = cnt

        adj: list[set[int]] = [set() for _ in range(self.n_nodes)]
        for a, b in self.transitions:
            adj[a].add(b)
            adj[b].add(a)
        for a, b in self.edges:
            fa, fb = self.flat(a), self.flat(b)
            adj[fa].add(fb)
            adj[fb].add(fa)
        self.indptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
        self.indptr[1:] = np.cumsum([len(s) for s in adj])
        self.indices = np.array([n for s in adj for n in sorted(s)], dtype=np.int64)
        self.kind_of = np.repeat(np.array([Kind.ITEM, Kind.SESSION, Kind.USER]),
                                 [n_items, n_sessions, n_users])
        self._components = None
        self.vocab_hash: str | None = None

    @property
    def n_nodes(self) -> int:
        return self.n_items + self.n_sessions + self.n_users

    def count(self, kind: Kind) -> int:
        return (self.n_items, self.n_sessions, self.n_users)[kind]

    def offset(self, kind: Kind) -> int:
        return (0, self.n_items, self.n_items + self.n_sessions)[kind]

    def flat(self, ref: NodeRef) -> int:
        if not 0 <= ref.index < self.count(ref.kind):
            raise IndexError(f"{ref} out of range")
        return self.offset(ref.kind) + ref.index

    def ref(self, flat_id: int) -> NodeRef:
        kind = Kind(int(self.kind_of[flat_id]))
        return NodeRef(kind, int(flat_id) - self.offset(kind))

    def neighbors(self, flat_id: int) -> np.ndarray:
        return self.indices[self.indptr[flat_id]:self.indptr[flat_id + 1]]

    def degree(self, flat_id: int) -> int:
        return int(self.indptr[flat_id + 1] - self.indptr[flat_id])

    def component_kind_counts(self, flat_id: int) -> np.ndarray:
        """Nodes of each kind in the connected component containing ``flat_id``."""
        if self._components is None:
            label = -np.ones(self.n_nodes, dtype=np.int64)
            counts = []
            for root in range(self.n_nodes):
                if label[root] >= 0:
                    continue
                cid = len(counts)
                label[root] = cid
                stack = [root]
                per_kind = np.zeros(3, dtype=np.int64)
                while stack:
                    u = stack.pop()
                    per_kind[self.kind_of[u]] += 1
                    for v in self.neighbors(u):
                        if label[v] < 0:
                            label[v] = cid
                            stack.append(v)
                counts.append(per_kind)
            self._components = (label, counts)
        label, counts = self._components
        return counts[label[flat_id]]


def build_graph(ds: Dataset, include_sessions: bool = True) -> HetGraph:
    transitions: Counter = Counter()
    edges: set[tuple[NodeRef, NodeRef]] = set()
    for s, (u, items) in enumerate(ds.train_sessions):
        user = NodeRef(Kind.USER, u)
        for a, b in zip(items, items[1:]):
            transitions[(a, b)] += 1
        for it in items:
            item = NodeRef(Kind.ITEM, it)
            edges.add((item, user))
            if include_sessions:
                edges.add((item, NodeRef(Kind.SESSION, s)))
        if include_sessions:
            edges.add((NodeRef(Kind.SESSION, s), user))
    n_sessions = ds.n_sessions if include_sessions else 0
    return HetGraph(ds.n_items, n_sessions, ds.n_users, dict(transitions), edges)


def save_graph(g: HetGraph, path, vocab_hash: str | None = None):
    """Edge list, one ``kind:idx kind:idx count`` line per edge, after a node-count header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# nodes item={g.n_items} session={g.n_sessions} user={g.n_users}\n")
        if vocab_hash:
            fh.write(f"# vocab_hash {vocab_hash}\n")
        for (a, b), cnt in g.transitions.items():
            fh.write(f"item:{a} item:{b} {cnt}\n")
        for a, b in g.edges:
            fh.write(f"{a} {b} 1\n")


def load_graph(path) -> HetGraph:
    transitions = {}
    edges = set()
    sizes = None
    vocab_hash = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# nodes"):
                sizes = dict(kv.split("=") for kv in line.split()[2:])
                continue
            if line.startswith("# vocab_hash"):
                vocab_hash = line.split()[2]
                continue
            if line.startswith("#") or not line.strip():
                continue
            a, b, cnt = line.split()
            ra, rb = NodeRef.parse(a), NodeRef.parse(b)
            if ra.kind == Kind.ITEM and rb.kind == Kind.ITEM:
                transitions[(ra.index, rb.index)] = int(cnt)
            else:
                edges.add((ra, rb))
    if sizes is None:
        raise ValueError(f"{path}: missing node-count header")
    g = HetGraph(int(sizes["item"]), int(sizes["session"]), int(sizes["user"]), transitions, edges)
    g.vocab_hash = vocab_hash
    return g


# restart-based random walk --------------------------------------------------

DIGINETICA_CAPS = {Kind.USER: 15, Kind.ITEM: 10, Kind.SESSION: 1}
TMALL_CAPS = {Kind.USER: 1, Kind.ITEM: 1, Kind.SESSION: 15}


@dataclass(frozen=True)
class WalkConfig:
    restart_prob: float = 0.5
    rwr_list_len: int = 100
    caps: dict = field(default_factory=lambda: dict(DIGINETICA_CAPS))
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.restart_prob <= 1.0:
            raise ValueError("restart_prob must lie in [0, 1]")
        if self.rwr_list_len < 1:
            raise ValueError("rwr_list_len must be >= 1")

    def cap(self, kind: Kind) -> int:
        return int(self.caps.get(kind, 0))


@dataclass
class NeighborSet:
    start: int
    by_kind: dict[Kind, list[int]]
    visits: dict[Kind, list[int]]
    steps: int = 0  # walk steps taken; equal to the cap when the walk was cut short

    def refs(self, kind: Kind) -> list[NodeRef]:
        return [NodeRef(kind, i) for i in self.by_kind[kind]]


def rwr_sample(g: HetGraph, start: int, cfg: WalkConfig) -> NeighborSet:
    """Sample heterogeneous neighbors of item ``start`` by random walk with restart.

    Every non-restart step moves to a uniformly chosen adjacent node, which
    is recorded unless it is ``start``. The walk continues until
    ``rwr_list_len`` nodes are recorded and every kind has
    ``min(cap, reachable)`` distinct nodes, or 10 * ``rwr_list_len`` steps.
    """
    if not 0 <= start < g.n_items:
        raise IndexError(f"start item {start} out of range")
    if g.degree(start) == 0:
        raise ValueError(f"item {start} is isolated")
    empty = {k: [] for k in Kind}
    if cfg.restart_prob >= 1.0:
        return NeighborSet(start, empty, {k: [] for k in Kind})

    reachable = g.component_kind_counts(start).copy()
    reachable[Kind.ITEM] -= 1
    need = np.array([min(cfg.cap(k), reachable[k]) for k in Kind])
    distinct = np.zeros(3, dtype=np.int64)
    counts: dict[int, int] = {}
    recorded = 0
    max_steps = 10 * cfg.rwr_list_len
    rng = np.random.default_rng([cfg.seed, start])
    restarts = rng.random(max_steps) < cfg.restart_prob
    picks = rng.random(max_steps)
    indptr, indices, kind_of = g.indptr, g.indices, g.kind_of
    cur = start
    steps = max_steps
    for step in range(max_steps):
        if recorded >= cfg.rwr_list_len and (distinct >= need).all():
            steps = step
            break
        if restarts[step]:
            cur = start
            continue
        lo, hi = indptr[cur], indptr[cur + 1]
        cur = int(indices[lo + int(picks[step] * (hi - lo))])
        if cur == start:
            continue
        recorded += 1
        seen = counts.get(cur, 0)
        if seen == 0:
            distinct[kind_of[cur]] += 1
        counts[cur] = seen + 1

    by_kind = {k: [] for k in Kind}
    visits = {k: [] for k in Kind}
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    for node, cnt in ranked:
        ref = g.ref(node)
        if len(by_kind[ref.kind]) < cfg.cap(ref.kind):
            by_kind[ref.kind].append(ref.index)
            visits[ref.kind].append(cnt)
    return NeighborSet(start, by_kind, visits, steps)


@dataclass
class NeighborTable:
    """Padded per-kind neighbor indices for all items (-1 = no neighbor)."""

    index: dict[Kind, np.ndarray]

    def mask(self, kind: Kind) -> np.ndarray:
        return self.index[kind] >= 0

    @classmethod
    def from_sets(cls, sets: list[NeighborSet], caps: dict) -> "NeighborTable":
        index = {}
        for kind in Kind:
            width = max(int(caps.get(kind, 0)), 0)
            arr = -np.ones((len(sets), width), dtype=np.int64)
            for i, ns in enumerate(sets):
                row = ns.by_kind[kind][:width]
                arr[i, :len(row)] = row
            index[kind] = arr
        return cls(index)


def sample_all(g: HetGraph, cfg: WalkConfig) -> NeighborTable:
    sets = []
    for item in range(g.n_items):
        if g.degree(item) == 0:
            sets.append(NeighborSet(item, {k: [] for k in Kind}, {k: [] for k in Kind}))
        else:
            sets.append(rwr_sample(g, item, cfg))
    return NeighborTable.from_sets(sets, cfg.caps)
