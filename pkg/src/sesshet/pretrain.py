"""DeepWalk pre-embeddings: uniform walks over the graph, then skip-gram with negative sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hetgraph import KIND_NAMES, HetGraph, Kind


@dataclass
class WalkCorpus:
    walks: list[np.ndarray]  # flat node ids
    n_items: int
    n_sessions: int
    n_users: int

    @property
    def n_nodes(self) -> int:
        return self.n_items + self.n_sessions + self.n_users

    def __len__(self):
        return len(self.walks)


@dataclass
class EmbeddingTable:
    tables: dict[Kind, np.ndarray]
    history: list[float] = field(default_factory=list)

    @property
    def d(self) -> int:
        return next(iter(self.tables.values())).shape[1]

    def __getitem__(self, kind: Kind) -> np.ndarray:
        return self.tables[kind]


def generate_walks(g: HetGraph, l: int, walks_per_node: int, seed: int) -> WalkCorpus:
    """``walks_per_node`` uniform walks of length ``l`` from every node, all kinds.

    Walks are emitted round by round (all nodes, then all nodes again).
    Isolated nodes give length-1 walks.
    """
    if l < 2:
        raise ValueError("walk length must be >= 2")
    rng = np.random.default_rng(seed)
    nodes = np.arange(g.n_nodes)
    deg = np.diff(g.indptr)
    walks = []
    for _ in range(walks_per_node):
        path = np.empty((g.n_nodes, l), dtype=np.int64)
        path[:, 0] = nodes
        cur = nodes
        for step in range(1, l):
            u = rng.random(g.n_nodes)
            d = deg[cur]
            nxt = g.indices[np.minimum(g.indptr[cur] + (u * d).astype(np.int64), len(g.indices) - 1)]
            cur = np.where(d > 0, nxt, cur)
            path[:, step] = cur
        for node in range(g.n_nodes):
            walks.append(path[node] if deg[node] > 0 else path[node, :1])
    return WalkCorpus(walks, g.n_items, g.n_sessions, g.n_users)


def positive_pairs(walk, window: int) -> np.ndarray:
    """All (center, context) pairs within ``window`` positions, both directions."""
    walk = np.asarray(walk, dtype=np.int64)
    out = []
    for off in range(1, min(window, len(walk) - 1) + 1):
        a, b = walk[:-off], walk[off:]
        out.append(np.stack([a, b], axis=1))
        out.append(np.stack([b, a], axis=1))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(out)


def sgns_grad(u: np.ndarray, v: np.ndarray, vn: np.ndarray):
    """Batched negative-sampling loss and gradients.

    u, v: (B, d) center and context vectors; vn: (B, K, d) noise vectors.
    Returns per-pair loss (B,) and gradients for u, v and vn.
    """
    pos = np.einsum("bd,bd->b", u, v)
    neg = np.einsum("bd,bkd->bk", u, vn)
    loss = np.logaddexp(0.0, -pos) + np.logaddexp(0.0, neg).sum(axis=1)
    g_pos = -0.5 * (1.0 - np.tanh(0.5 * pos))  # sigma(pos) - 1
    g_neg = 0.5 * (1.0 + np.tanh(0.5 * neg))   # sigma(neg)
    du = g_pos[:, None] * v + np.einsum("bk,bkd->bd", g_neg, vn)
    dv = g_pos[:, None] * u
    dvn = g_neg[:, :, None] * u[:, None, :]
    return loss, du, dv, dvn


def sgns_pair_loss(u, v, vn):
    loss, du, dv, dvn = sgns_grad(u[None], v[None], np.asarray(vn).reshape(1, -1, len(u)))
    return float(loss[0]), du[0], dv[0], dvn[0]


def skipgram_train(corpus: WalkCorpus, d: int, window: int = 5, negatives: int = 5,
                   epochs: int = 1, lr: float = 0.025, seed: int = 0,
                   batch_size: int = 256) -> EmbeddingTable:
    if d < 2:
        raise ValueError("embedding dimension must be >= 2")
    if window < 1:
        raise ValueError("window must be >= 1")
    if not corpus.walks:
        raise ValueError("empty walk corpus")
    rng = np.random.default_rng(seed)
    n = corpus.n_nodes
    pairs = np.concatenate([positive_pairs(w, window) for w in corpus.walks])
    counts = np.bincount(np.concatenate(corpus.walks), minlength=n).astype(np.float64)
    noise = counts ** 0.75
    noise /= noise.sum()
    noise_cdf = np.cumsum(noise)

    emb_in = (rng.random((n, d)) - 0.5) / d
    emb_out = np.zeros((n, d))
    total = max(1, epochs * -(-len(pairs) // batch_size))
    step = 0
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        for start in range(0, len(pairs), batch_size):
            batch = pairs[order[start:start + batch_size]]
            c, o = batch[:, 0], batch[:, 1]
            neg = np.searchsorted(noise_cdf, rng.random((len(batch), negatives)) * noise_cdf[-1], side="right")
            neg = np.minimum(neg, n - 1)
            loss, du, dv, dvn = sgns_grad(emb_in[c], emb_out[o], emb_out[neg])
            alpha = lr * max(1e-4, 1.0 - step / total)
            np.add.at(emb_in, c, -alpha * du)
            np.add.at(emb_out, o, -alpha * dv)
            if negatives:
                np.add.at(emb_out, neg.reshape(-1), -alpha * dvn.reshape(-1, d))
            epoch_loss += loss.sum()
            step += 1
        history.append(epoch_loss / len(pairs))
    if not np.isfinite(emb_in).all():
        raise FloatingPointError("skip-gram training diverged")
    tables = {
        Kind.ITEM: emb_in[:corpus.n_items],
        Kind.SESSION: emb_in[corpus.n_items:corpus.n_items + corpus.n_sessions],
        Kind.USER: emb_in[corpus.n_items + corpus.n_sessions:],
    }
    return EmbeddingTable(tables, history)


def deepwalk(g: HetGraph, d: int, l: int = 20, walks_per_node: int = 10, window: int = 5,
             negatives: int = 5, epochs: int = 1, lr: float = 0.025, seed: int = 0) -> EmbeddingTable:
    corpus = generate_walks(g, l, walks_per_node, seed)
    return skipgram_train(corpus, d, window, negatives, epochs, lr, seed)


# persistence ----------------------------------------------------------------

_MAGIC = b"SHEM"


def save_embeddings(emb: EmbeddingTable, outdir, text: bool = True):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for kind, mat in emb.tables.items():
        rows, d = mat.shape
        with open(out / f"{KIND_NAMES[kind]}.emb", "wb") as fh:
            fh.write(_MAGIC + struct.pack("<BII", int(kind), rows, d))
            fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())
        if text:
            np.savetxt(out / f"{KIND_NAMES[kind]}.txt", mat.astype(np.float32), fmt="%.6g")


def load_embeddings(indir) -> EmbeddingTable:
    tables = {}
    for kind, name in KIND_NAMES.items():
        path = Path(indir) / f"{name}.emb"
        blob = path.read_bytes()
        if blob[:4] != _MAGIC:
            raise ValueError(f"{path}: bad magic")
        code, rows, d = struct.unpack_from("<BII", blob, 4)
        if code != int(kind):
            raise ValueError(f"{path}: kind tag {code} does not match {name}")
        data = np.frombuffer(blob, dtype="<f4", count=rows * d, offset=13)
        tables[kind] = data.reshape(rows, d).astype(np.float64)
    return EmbeddingTable(tables)
