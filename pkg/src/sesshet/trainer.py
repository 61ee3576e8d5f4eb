"""Training loop, Recall@n evaluation, sanity baselines and experiment presets."""

from __future__ import annotations

import logging
import time
from importlib import resources
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from . import diffcore as dc
from . import synthetic
from .dataio import PRESETS as PREPROCESS_PRESETS
from .dataio import Dataset, SessionBatch, batch_iter, eval_batches, parse_log, preprocess
from .hetgnn import ModelConfig, SRHetGNN
from .hetgraph import DIGINETICA_CAPS, HetGraph, Kind, WalkConfig, build_graph, sample_all
from .pretrain import EmbeddingTable, deepwalk

log = logging.getLogger(__name__)

PUBLISHED_REFERENCE = {
    "diginetica_full_recall@40": "60.87",
    "diginetica_full_recall@50": "64.24",
    "tmall_full_recall@40": "26.82",
    "tmall_full_recall@50": "28.45",
}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.0002
    epochs: int = 10
    batch_size: int = 100
    d: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    caps: dict = field(default_factory=lambda: dict(DIGINETICA_CAPS))
    restart_prob: float = 0.5
    rwr_list_len: int = 100
    seed: int = 0
    prefixes: str = "all"
    use_hetgnn: bool = True
    use_sessions: bool = True
    normalize_session_attention: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, caps=dict(self.caps), use_hetgnn=self.use_hetgnn,
                           use_sessions=self.use_sessions,
                           normalize_session_attention=self.normalize_session_attention,
                           seed=self.seed)

    def walk_config(self, epoch: int) -> WalkConfig:
        return WalkConfig(restart_prob=self.restart_prob, rwr_list_len=self.rwr_list_len,
                          caps=dict(self.caps), seed=self.seed * 1000 + epoch)


class Adam:
    def __init__(self, params: dict[str, dc.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: SRHetGNN
    losses: list[float]
    epoch_seconds: list[float]


def train(ds: Dataset, g: HetGraph, pre: EmbeddingTable, cfg: TrainConfig) -> TrainResult:
    """Mini-batch cross-entropy training; neighbors are resampled every epoch."""
    model = SRHetGNN(cfg.model_config(), pre)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    losses, seconds = [], []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        neighbors = sample_all(g, cfg.walk_config(epoch)) if cfg.use_hetgnn else None
        total, count = 0.0, 0
        for b, batch in enumerate(batch_iter(ds, cfg.batch_size, cfg.seed * 1000 + epoch, cfg.prefixes)):
            opt.zero_grad()
            try:
                loss = model.loss(batch, neighbors)
            except dc.NumericError as exc:
                raise TrainingError(f"non-finite values in epoch {epoch + 1}, batch {b}: {exc}") from exc
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss in epoch {epoch + 1}, batch {b}")
            loss.backward()
            opt.step()
            total += float(loss.data) * len(batch)
            count += len(batch)
        losses.append(total / count)
        seconds.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.5f (%.1fs)", epoch + 1, losses[-1], seconds[-1])
    model.neighbors = sample_all(g, cfg.walk_config(cfg.epochs)) if cfg.use_hetgnn else None
    return TrainResult(model, losses, seconds)


# scorers ----------------------------------------------------------------------

class ModelScorer:
    def __init__(self, model: SRHetGNN, item_embeddings: np.ndarray | None = None):
        self.model = model
        self.V = dc.Tensor(model.item_embeddings() if item_embeddings is None else item_embeddings)

    def __call__(self, batch: SessionBatch) -> np.ndarray:
        return self.model.logits(self.V, batch.items, batch.mask).data


class PopularityScorer:
    def __init__(self, ds: Dataset):
        counts = np.zeros(ds.n_items)
        for _, items in ds.train_sessions:
            np.add.at(counts, items, 1.0)
        self.counts = counts

    def __call__(self, batch: SessionBatch) -> np.ndarray:
        return np.tile(self.counts, (len(batch), 1))


class MarkovScorer:
    """Ranks by transition count from the last item, ties broken by popularity."""

    def __init__(self, ds: Dataset):
        self.popularity = PopularityScorer(ds).counts
        rows, cols = [], []
        for _, items in ds.train_sessions:
            rows.extend(items[:-1])
            cols.extend(items[1:])
        n = ds.n_items
        self.transitions = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        self.transitions.sum_duplicates()

    def __call__(self, batch: SessionBatch) -> np.ndarray:
        last = batch.items[np.arange(len(batch)), batch.lengths - 1]
        trans = self.transitions[last].toarray()
        return trans + self.popularity / (self.popularity.sum() + 1.0)


class RandomScorer:
    def __init__(self, n_items: int, seed: int = 0):
        self.n_items = n_items
        self.rng = np.random.default_rng(seed)

    def __call__(self, batch: SessionBatch) -> np.ndarray:
        return self.rng.random((len(batch), self.n_items))


def baseline_popularity(ds: Dataset) -> PopularityScorer:
    return PopularityScorer(ds)


def baseline_markov(ds: Dataset) -> MarkovScorer:
    return MarkovScorer(ds)


# evaluation ---------------------------------------------------------------------

def target_ranks(scorer, sessions, prefixes: str = "all") -> np.ndarray:
    """0-based rank of each target under score-descending, index-ascending order."""
    ranks = []
    for batch in eval_batches(sessions, prefixes=prefixes):
        scores = scorer(batch)
        rows = np.arange(len(batch))
        target = scores[rows, batch.targets][:, None]
        idx = np.arange(scores.shape[1])[None, :]
        ahead = (scores > target) | ((scores == target) & (idx < batch.targets[:, None]))
        ranks.append(ahead.sum(axis=1))
    return np.concatenate(ranks) if ranks else np.zeros(0, dtype=np.int64)


def _clamp(n: int, n_items: int) -> int:
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > n_items:
        log.warning("Recall@%d exceeds the %d candidate items; clamping", n, n_items)
        return n_items
    return n


def recall_at_n(scorer, sessions, n: int, n_items: int, prefixes: str = "all") -> float:
    n = _clamp(n, n_items)
    ranks = target_ranks(scorer, sessions, prefixes)
    return float((ranks < n).mean()) if len(ranks) else 0.0


def recall_curve(scorer, sessions, ns, n_items: int, prefixes: str = "all") -> dict[int, float]:
    ranks = target_ranks(scorer, sessions, prefixes)
    return {n: float((ranks < _clamp(n, n_items)).mean()) for n in ns}


# reports --------------------------------------------------------------------------

@dataclass
class ReportRow:
    model: str
    setting: str
    recall: dict[int, float]
    losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    preset: str
    rows: list[ReportRow]
    metadata: dict[str, str] = field(default_factory=dict)

    def row(self, model: str, setting: str = "") -> ReportRow:
        for r in self.rows:
            if r.model == model and (not setting or r.setting == setting):
                return r
        raise KeyError(model)

    def to_tsv(self) -> str:
        ns = sorted({n for r in self.rows for n in r.recall})
        lines = ["\t".join(["model", "setting"] + [f"recall@{n}" for n in ns])]
        for r in self.rows:
            lines.append("\t".join([r.model, r.setting or "-"] + [f"{r.recall[n]:.6f}" for n in ns]))
        return "\n".join(lines) + "\n"

    def to_text(self, timing: bool = True) -> str:
        out = ["[report]", f"preset = {self.preset}"]
        out += [f"{k} = {v}" for k, v in sorted(self.metadata.items())]
        for r in self.rows:
            out.append("")
            out.append(f"[row {r.model}{' ' + r.setting if r.setting else ''}]")
            out += [f"recall@{n} = {v:.6f}" for n, v in sorted(r.recall.items())]
            if r.losses:
                out.append("loss = " + ",".join(f"{x:.8f}" for x in r.losses))
            if timing and r.epoch_seconds:
                out.append("epoch_seconds = " + ",".join(f"{x:.3f}" for x in r.epoch_seconds))
        return "\n".join(out) + "\n"


# experiments ------------------------------------------------------------------------

PRESETS = ("synthetic-planted", "mini-fixture", "ablation-suite", "neighbor-sweep", "lr-sweep", "topn-sweep")


@dataclass
class PipelineConfig:
    """Knobs shared by every preset; fields mirror TrainConfig plus pre-embedding settings."""

    train: TrainConfig = field(default_factory=TrainConfig)
    walk_length: int = 20
    walks_per_node: int = 10
    window: int = 5
    negatives: int = 5
    sg_epochs: int = 1
    sg_lr: float = 0.025
    topn: tuple = (10, 20)


def mini_fixture() -> Dataset:
    path = resources.files("sesshet").joinpath("data/mini_fixture.csv")
    with resources.as_file(path) as p:
        return preprocess(parse_log(p), PREPROCESS_PRESETS["diginetica"])


def _dataset_for(preset: str) -> Dataset:
    return mini_fixture() if preset == "mini-fixture" else synthetic.planted_dataset()


def pretrain_for(ds: Dataset, pc: PipelineConfig, include_sessions: bool = True):
    g = build_graph(ds, include_sessions=include_sessions)
    pre = deepwalk(g, pc.train.d, pc.walk_length, pc.walks_per_node, pc.window,
                   pc.negatives, pc.sg_epochs, pc.sg_lr, pc.train.seed)
    return g, pre


def _fit_row(ds, g, pre, tc: TrainConfig, name: str, setting: str, ns) -> ReportRow:
    res = train(ds, g, pre, tc)
    rec = recall_curve(ModelScorer(res.model), ds.test_sessions, ns, ds.n_items, tc.prefixes)
    return ReportRow(name, setting, rec, res.losses, res.epoch_seconds)


def run_experiment(preset: str, pc: PipelineConfig | None = None, ds: Dataset | None = None) -> EvalReport:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    pc = pc or PipelineConfig()
    ds = ds if ds is not None else _dataset_for(preset)
    tc = pc.train
    ns = tuple(pc.topn)
    meta = {f"reference_{k}": v for k, v in PUBLISHED_REFERENCE.items()}
    meta.update({"seed": str(tc.seed), "d": str(tc.d), "lr": str(tc.lr), "epochs": str(tc.epochs),
                 "caps": ",".join(f"{k.name.lower()}={tc.caps.get(k, 0)}" for k in Kind)})
    meta.update({f"data_{k}": str(v) for k, v in ds.stats().items()})
    rows: list[ReportRow] = []
    g, pre = pretrain_for(ds, pc)

    def baselines(ns_):
        for name, scorer in (("popularity", baseline_popularity(ds)), ("markov", baseline_markov(ds))):
            rows.append(ReportRow(name, "", recall_curve(scorer, ds.test_sessions, ns_, ds.n_items, tc.prefixes)))

    if preset in ("synthetic-planted", "mini-fixture"):
        rows.append(_fit_row(ds, g, pre, tc, "sr-hetgnn", "", ns))
        baselines(ns)
    elif preset == "ablation-suite":
        rows.append(_fit_row(ds, g, pre, tc, "sr-hetgnn", "", ns))
        g_s, pre_s = pretrain_for(ds, pc, include_sessions=False)
        rows.append(_fit_row(ds, g_s, pre_s, replace(tc, use_sessions=False), "sr-hetgnn-s", "", ns))
        rows.append(_fit_row(ds, g, pre, replace(tc, use_hetgnn=False), "sr-hetgnn-het", "", ns))
        baselines(ns)
    elif preset == "neighbor-sweep":
        for kind in (Kind.USER, Kind.ITEM, Kind.SESSION):
            for k in (1, 5, 10, 15):
                caps = dict(tc.caps)
                caps[kind] = k
                rows.append(_fit_row(ds, g, pre, replace(tc, caps=caps), "sr-hetgnn",
                                     f"{kind.name.lower()}={k}", ns))
    elif preset == "lr-sweep":
        for lr in (0.0001, 0.0002, 0.0005, 0.001, 0.005):
            rows.append(_fit_row(ds, g, pre, replace(tc, lr=lr), "sr-hetgnn", f"lr={lr}", ns))
    elif preset == "topn-sweep":
        ns = (5, 10, 20, 30, 40, 50)
        rows.append(_fit_row(ds, g, pre, tc, "sr-hetgnn", "", ns))
        rows.append(_fit_row(ds, g, pre, replace(tc, use_hetgnn=False), "sr-hetgnn-het", "", ns))
        baselines(ns)
    return EvalReport(preset, rows, meta)
