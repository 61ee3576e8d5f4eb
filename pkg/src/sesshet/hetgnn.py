"""Heterogeneous neighbor aggregation for item embeddings and attention-based session embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import LstmParams, Tensor
from .hetgraph import DIGINETICA_CAPS, Kind, NeighborTable
from .pretrain import EmbeddingTable


@dataclass
class ModelConfig:
    d: int = 64
    caps: dict = field(default_factory=lambda: dict(DIGINETICA_CAPS))
    use_hetgnn: bool = True
    use_sessions: bool = True
    normalize_session_attention: bool = False
    leaky_slope: float = dc.LEAKY_SLOPE
    seed: int = 0
    standardize_attributes: bool = True

    def active_kinds(self) -> list[Kind]:
        return [k for k in Kind if self.caps.get(k, 0) > 0 and (k != Kind.SESSION or self.use_sessions)]


@dataclass
class ContentParams:
    fc_W: Tensor
    fc_b: Tensor
    fwd: LstmParams
    bwd: LstmParams
    proj: Tensor


@dataclass
class TypeParams:
    fwd: LstmParams
    bwd: LstmParams
    proj: Tensor


@dataclass
class SessionEmbedding:
    s_l: Tensor
    s_g: Tensor
    s_h: Tensor


def _param(rng, shape, name):
    return dc.parameter(dc.glorot(rng, shape), name)


def _standardize(m: np.ndarray) -> np.ndarray:
    """Per-dimension z-score; walk embeddings share a large common offset."""
    if len(m) < 2:
        return np.zeros_like(m)
    return (m - m.mean(axis=0)) / np.maximum(m.std(axis=0), 1e-8)


def node_attributes(pre_rows: np.ndarray, tag: Tensor) -> Tensor:
    """Attribute sequence [pre-embedding, kind tag] per node: (N, 2, d)."""
    n, d = pre_rows.shape
    pre = Tensor(pre_rows.reshape(n, 1, d))
    tags = tag.reshape(1, 1, d) * np.ones((n, 1, 1))
    return dc.concat([pre, tags], axis=1)


def aggregate_content(attrs: Tensor, p: ContentParams) -> Tensor:
    """f1: mean of BiLSTM outputs over the FC-mapped attributes, projected 2d -> d.

    ``attrs`` is (N, A, d) or (A, d).
    """
    attrs = dc.as_tensor(attrs)
    if attrs.shape[-2] == 0:
        raise ValueError("node has no attributes")
    x = attrs @ p.fc_W + p.fc_b
    h = dc.bilstm_encode(x, p.fwd, p.bwd)
    return h.mean(axis=-2) @ p.proj


def aggregate_type(neigh: Tensor, p: TypeParams, mask: np.ndarray | None = None) -> Tensor:
    """f2: masked mean of type-BiLSTM outputs over a neighbor sequence, projected 2d -> d.

    ``neigh`` is (N, T, d) with ``mask`` (N, T), or an unbatched (T, d).
    Rows with no valid neighbor come out as zeros.
    """
    neigh = dc.as_tensor(neigh)
    if neigh.ndim == 2:
        if neigh.shape[0] == 0:
            raise ValueError("empty neighbor list")
        return aggregate_type(neigh.reshape(1, *neigh.shape), p, mask if mask is None else mask[None]).reshape(-1)
    if mask is None:
        mask = np.ones(neigh.shape[:2], dtype=bool)
    h = dc.bilstm_encode(neigh, p.fwd, p.bwd, mask)
    count = np.maximum(mask.sum(axis=1, keepdims=True), 1).astype(np.float64)
    return (h.sum(axis=1) / count) @ p.proj


def type_attention(f1_self: Tensor, candidates: list[tuple[Tensor, np.ndarray]], U: Tensor,
                   slope: float = dc.LEAKY_SLOPE) -> tuple[Tensor, Tensor]:
    """Attention over {available type embeddings} plus the node's own f1.

    ``candidates`` pairs each type embedding (N, d) with an availability
    mask (N,). Returns weights (N, K+1), self last, and f3 (N, d).
    """
    f1_self = dc.as_tensor(f1_self)
    single = f1_self.ndim == 1
    if single:
        f1_self = f1_self.reshape(1, -1)
        candidates = [(c.reshape(1, -1), np.atleast_1d(m)) for c, m in candidates]
    n, d = f1_self.shape
    cands = dc.stack([c for c, _ in candidates] + [f1_self], axis=1)
    k = cands.shape[1]
    mask = np.stack([np.asarray(m, dtype=bool) for _, m in candidates] + [np.ones(n, dtype=bool)], axis=1)
    own = f1_self.reshape(n, 1, d) * np.ones((1, k, 1))
    logits = dc.leaky_relu(dc.concat([cands, own], axis=-1) @ U, slope)
    weights = dc.softmax(logits, axis=1, mask=mask)
    f3 = (weights.reshape(n, k, 1) * cands).sum(axis=1)
    if single:
        return weights.reshape(-1), f3.reshape(-1)
    return weights, f3


def session_embed(V: Tensor, items: np.ndarray, mask: np.ndarray, p: dict[str, Tensor],
                  normalize: bool = False) -> SessionEmbedding:
    """Local, global and hybrid session embeddings for right-padded prefixes.

    s_l is the last item's embedding; the global weights are
    w . sigmoid(W1 v_last + W2 v_i + c), left unnormalised unless ``normalize``.
    """
    items = np.atleast_2d(np.asarray(items, dtype=np.int64))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    lengths = mask.sum(axis=1)
    if (lengths == 0).any():
        raise ValueError("empty session prefix")
    B, L = items.shape
    E = V[items]
    s_l = V[items[np.arange(B), lengths - 1]]
    hidden = dc.sigmoid((s_l @ p["W1"].T).reshape(B, 1, -1) + E @ p["W2"].T + p["c"])
    a = hidden @ p["w"]
    a = dc.softmax(a, axis=1, mask=mask) if normalize else a * mask
    s_g = (a.reshape(B, L, 1) * E).sum(axis=1)
    s_h = dc.concat([s_l, s_g], axis=-1) @ p["W3"].T
    return SessionEmbedding(s_l, s_g, s_h)


def score(s_h, V) -> np.ndarray:
    """Softmax over inner-product logits against every item embedding."""
    s_h = s_h.data if isinstance(s_h, Tensor) else np.asarray(s_h, dtype=np.float64)
    V = V.data if isinstance(V, Tensor) else np.asarray(V, dtype=np.float64)
    z = s_h @ V.T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class SRHetGNN:
    """Item embeddings from aggregated heterogeneous neighbors, scored by session attention.

    With ``use_hetgnn=False`` the pre-embeddings are used directly as item
    embeddings and only the session-attention weights are trained.
    """

    def __init__(self, cfg: ModelConfig, pre: EmbeddingTable):
        if pre.d != cfg.d:
            raise ValueError(f"pre-embedding dimension {pre.d} != model dimension {cfg.d}")
        self.cfg = cfg
        self.pre = pre
        self.attrs = {k: _standardize(m) if cfg.standardize_attributes else m for k, m in pre.tables.items()}
        self.neighbors: NeighborTable | None = None
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d
        self.content: ContentParams | None = None
        self.types: dict[Kind, TypeParams] = {}
        self.kind_tag = self.U = None
        if cfg.use_hetgnn:
            self.kind_tag = _param(rng, (len(Kind), d), "kind_tag")
            self.content = ContentParams(
                fc_W=_param(rng, (d, d), "fc_W"),
                fc_b=_param(rng, (d,), "fc_b"),
                fwd=LstmParams.init(d, d, rng, "content_fwd."),
                bwd=LstmParams.init(d, d, rng, "content_bwd."),
                proj=_param(rng, (2 * d, d), "content_proj"),
            )
            for kind in cfg.active_kinds():
                name = kind.name.lower()
                self.types[kind] = TypeParams(
                    fwd=LstmParams.init(d, d, rng, f"type_{name}_fwd."),
                    bwd=LstmParams.init(d, d, rng, f"type_{name}_bwd."),
                    proj=_param(rng, (2 * d, d), f"type_{name}_proj"),
                )
            self.U = _param(rng, (2 * d,), "U")
        self.session = {
            "w": _param(rng, (d,), "w"),
            "W1": _param(rng, (d, d), "W1"),
            "W2": _param(rng, (d, d), "W2"),
            "c": _param(rng, (d,), "c"),
            "W3": _param(rng, (d, 2 * d), "W3"),
        }

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.cfg.use_hetgnn:
            c = self.content
            out.update({"kind_tag": self.kind_tag, "fc_W": c.fc_W, "fc_b": c.fc_b, "content_proj": c.proj})
            out.update(c.fwd.named("content_fwd."))
            out.update(c.bwd.named("content_bwd."))
            for kind, tp in self.types.items():
                name = kind.name.lower()
                out[f"type_{name}_proj"] = tp.proj
                out.update(tp.fwd.named(f"type_{name}_fwd."))
                out.update(tp.bwd.named(f"type_{name}_bwd."))
            out["U"] = self.U
        out.update(self.session)
        return out

    def load_parameters(self, values: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(values)
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {sorted(missing)}")
        for name, p in params.items():
            if values[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {values[name].shape} vs {p.shape}")
            p.data[...] = values[name]

    # forward ----------------------------------------------------------------
    def content_embeddings(self, kind: Kind, rows: np.ndarray) -> Tensor:
        attrs = node_attributes(self.attrs[kind][rows], self.kind_tag[int(kind)])
        return aggregate_content(attrs, self.content)

    def embed_items(self, neighbors: NeighborTable | None = None) -> Tensor:
        """Final item embeddings V* (n_items, d)."""
        item_pre = self.pre[Kind.ITEM]
        if not self.cfg.use_hetgnn:
            return Tensor(item_pre)
        neighbors = neighbors if neighbors is not None else self.neighbors
        if neighbors is None:
            raise ValueError("no neighbor table: sample neighbors first")
        n_items = item_pre.shape[0]
        f1_items = self.content_embeddings(Kind.ITEM, np.arange(n_items))
        candidates = []
        for kind, tp in self.types.items():
            idx = neighbors.index[kind]
            mask = idx >= 0
            if idx.shape[1] == 0:
                continue
            if kind == Kind.ITEM:
                table, lookup = f1_items, np.clip(idx, 0, None)
            else:
                needed = np.unique(idx[mask])
                if needed.size == 0:
                    continue
                table = self.content_embeddings(kind, needed)
                lookup = np.searchsorted(needed, np.clip(idx, 0, None))
                lookup = np.where(mask, lookup, 0)
            f2 = aggregate_type(table[lookup], tp, mask)
            candidates.append((f2, mask.any(axis=1)))
        _, f3 = type_attention(f1_items, candidates, self.U, self.cfg.leaky_slope)
        return f3

    def session_embed(self, V: Tensor, items, mask) -> SessionEmbedding:
        return session_embed(V, items, mask, self.session, self.cfg.normalize_session_attention)

    def logits(self, V: Tensor, items, mask) -> Tensor:
        return self.session_embed(V, items, mask).s_h @ V.T

    def loss(self, batch, neighbors: NeighborTable | None = None) -> Tensor:
        V = self.embed_items(neighbors)
        return dc.cross_entropy(self.logits(V, batch.items, batch.mask), batch.targets)

    def item_embeddings(self) -> np.ndarray:
        return self.embed_items().data.copy()
