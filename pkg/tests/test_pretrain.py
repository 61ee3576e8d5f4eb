from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sesshet.hetgraph import HetGraph, Kind, NodeRef, build_graph
from sesshet.pretrain import (EmbeddingTable, WalkCorpus, deepwalk, generate_walks, load_embeddings,
                              positive_pairs, save_embeddings, sgns_grad, sgns_pair_loss, skipgram_train)

DATA = Path(__file__).parent / "data"


def path_graph():
    # a single item a linked to a single user b
    return HetGraph(1, 0, 1, {}, {(NodeRef(Kind.ITEM, 0), NodeRef(Kind.USER, 0))})


def test_path_graph_walks_alternate():
    c = generate_walks(path_graph(), 3, 4, seed=1)
    for w in c.walks:
        assert list(w) in ([0, 1, 0], [1, 0, 1])


def test_walk_count():
    g = HetGraph(3, 0, 2, {(0, 1): 1}, {(NodeRef(Kind.ITEM, 2), NodeRef(Kind.USER, 0)),
                                          (NodeRef(Kind.ITEM, 1), NodeRef(Kind.USER, 1))})
    c = generate_walks(g, 5, 2, seed=0)
    assert len(c) == 10
    assert all(len(w) == 5 for w in c.walks)


def test_isolated_node_gives_length_one_walk():
    g = HetGraph(2, 0, 1, {}, {(NodeRef(Kind.ITEM, 0), NodeRef(Kind.USER, 0))})
    c = generate_walks(g, 4, 1, seed=0)
    assert list(c.walks[1]) == [1]


def test_walks_follow_edges(mini):
    g = build_graph(mini)
    for w in generate_walks(g, 8, 3, seed=2).walks:
        for a, b in zip(w, w[1:]):
            assert b in g.neighbors(a)


def test_walk_length_validated(mini):
    with pytest.raises(ValueError):
        generate_walks(build_graph(mini), 1, 1, seed=0)


def test_golden_corpus(mini):
    g = build_graph(mini)
    c = generate_walks(g, 6, 2, seed=0)
    got = [" ".join(str(g.ref(int(n))) for n in w) for w in c.walks]
    assert got == (DATA / "mini_walks_l6_w2_seed0.txt").read_text().splitlines()


def test_window_one_pairs():
    pairs = {tuple(p) for p in positive_pairs([0, 1, 2], 1)}
    assert pairs == {(0, 1), (1, 0), (1, 2), (2, 1)}


@given(st.lists(st.integers(0, 9), min_size=1, max_size=12), st.integers(1, 6))
def test_pairs_symmetric(walk, window):
    pairs = [tuple(p) for p in positive_pairs(walk, window)]
    assert sorted(pairs) == sorted((b, a) for a, b in pairs)
    n = len(walk)
    assert len(pairs) == 2 * sum(n - k for k in range(1, min(window, n - 1) + 1))


def _fd(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def test_pair_loss_gradient_matches_finite_differences(rng):
    u, v, vn = rng.normal(size=4), rng.normal(size=4), rng.normal(size=(3, 4))
    _, du, dv, dvn = sgns_pair_loss(u, v, vn)
    f = lambda: sgns_pair_loss(u, v, vn)[0]
    for analytic, x in ((du, u), (dv, v), (dvn, vn)):
        numeric = _fd(f, x)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        assert rel.max() <= 1e-6


def test_batched_loss_value():
    u = np.array([[1.0, 0.0]])
    v = np.array([[2.0, 0.0]])
    vn = np.array([[[0.0, 1.0]]])
    loss, *_ = sgns_grad(u, v, vn)
    assert loss[0] == pytest.approx(np.log1p(np.exp(-2.0)) + np.log(2.0))


def test_repeated_pair_grows_dot_product():
    corpus = WalkCorpus([np.array([0, 1])] * 200, 2, 0, 0)
    emb = skipgram_train(corpus, d=4, window=1, negatives=0, epochs=5, lr=0.2, seed=0)
    # mean -log sigma(u_a . v_b) over the epoch; below 0.05 means sigma > 0.95
    assert emb.history[-1] < emb.history[0]
    assert emb.history[-1] < 0.05


def test_skipgram_validation():
    corpus = WalkCorpus([np.array([0, 1])], 2, 0, 0)
    with pytest.raises(ValueError):
        skipgram_train(corpus, d=0)
    with pytest.raises(ValueError):
        skipgram_train(corpus, d=4, window=0)
    with pytest.raises(ValueError):
        skipgram_train(WalkCorpus([], 2, 0, 0), d=4)


def test_fixture_training(mini):
    g = build_graph(mini)
    corpus = generate_walks(g, 10, 10, seed=0)
    emb = skipgram_train(corpus, d=8, epochs=6, seed=0)
    assert emb[Kind.ITEM].shape == (4, 8)
    assert emb[Kind.SESSION].shape == (5, 8)
    assert emb[Kind.USER].shape == (3, 8)
    for m in emb.tables.values():
        assert np.isfinite(m).all()
        assert (np.linalg.norm(m, axis=1) < 100).all()
    h = np.array(emb.history)
    assert (np.diff(h) <= 0.02).all()
    assert h[-1] < h[0]


def test_deepwalk_deterministic(mini):
    g = build_graph(mini)
    a = deepwalk(g, 8, seed=5)
    b = deepwalk(g, 8, seed=5)
    c = deepwalk(g, 8, seed=6)
    assert all(np.array_equal(a[k], b[k]) for k in Kind)
    assert not np.array_equal(a[Kind.ITEM], c[Kind.ITEM])


def test_embedding_file_format(tmp_path, rng):
    emb = EmbeddingTable({Kind.ITEM: rng.normal(size=(3, 4)), Kind.SESSION: rng.normal(size=(2, 4)),
                          Kind.USER: rng.normal(size=(1, 4))})
    save_embeddings(emb, tmp_path)
    blob = (tmp_path / "session.emb").read_bytes()
    assert blob[:4] == b"SHEM"
    assert blob[4] == int(Kind.SESSION)
    assert int.from_bytes(blob[5:9], "little") == 2 and int.from_bytes(blob[9:13], "little") == 4
    assert len(blob) == 13 + 2 * 4 * 4
    back = load_embeddings(tmp_path)
    for k in Kind:
        assert np.allclose(back[k], emb[k], atol=1e-6)
    assert (tmp_path / "item.txt").read_text().count("\n") == 3


def test_embedding_file_kind_check(tmp_path, rng):
    emb = EmbeddingTable({k: rng.normal(size=(2, 3)) for k in Kind})
    save_embeddings(emb, tmp_path, text=False)
    (tmp_path / "user.emb").write_bytes((tmp_path / "item.emb").read_bytes())
    with pytest.raises(ValueError, match="kind"):
        load_embeddings(tmp_path)
