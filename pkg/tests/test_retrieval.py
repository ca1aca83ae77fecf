import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from partslot.errors import ContractError
from partslot.kernel.nn import ParamStore
from partslot.retrieval import (EmbeddingPair, Ranking, best_matching, contingency,
                                export_attention, part_purity, rank_gallery, read_matrix_csv,
                                read_pgm, recall_at_k, write_matrix_csv, write_pgm)
from partslot.similarity import init_tdpa


def _store(D=4, K=3, seed=0):
    store = ParamStore(seed)
    init_tdpa(store, D, K)
    return store


def _pair(r, D=4, K=3, modality="visual"):
    return EmbeddingPair(r.normal(size=D), r.normal(size=(K, D)), modality)


def _brute_rank(query, gallery, store):
    """Score every item with scalar loops, then sort by (-score, id)."""
    g = query.global_
    logits = oracles.mlp(g.tolist(), *(store[f"tdpa.{n}"].data.tolist()
                                       for n in ("fc1.w", "fc1.b", "fc2.w", "fc2.b")))
    a = oracles.softmax(logits)
    scored = []
    for i, item in enumerate(gallery):
        s = oracles.cos(item.global_, g) + sum(a[k] * oracles.cos(item.parts[k], query.parts[k])
                                               for k in range(len(a)))
        scored.append((-s, i))
    return [i for _, i in sorted(scored)]


def test_rank_matches_brute_force_on_random_instances():
    store = _store()
    r = np.random.default_rng(0)
    for _ in range(50):
        gallery = [_pair(r) for _ in range(int(r.integers(1, 21)))]
        q = _pair(r, modality="text")
        ranking = rank_gallery(q, gallery, store)
        assert ranking.ids.tolist() == _brute_rank(q, gallery, store)
        assert np.all(np.diff(ranking.scores) <= 0)


def test_rank_edge_cases(rng):
    store = _store()
    one = [_pair(rng)]
    assert rank_gallery(_pair(rng), one, store).ids.tolist() == [0]
    item = _pair(rng)
    dup = [_pair(rng), item, _pair(rng), EmbeddingPair(item.global_.copy(), item.parts.copy())]
    ranking = rank_gallery(EmbeddingPair(item.global_, item.parts, "text"), dup, store)
    assert ranking.ids.tolist()[:2] == [1, 3]
    custom = rank_gallery(_pair(rng), dup, store, gallery_ids=[40, 30, 20, 10], query_id=7)
    assert custom.query == 7 and sorted(custom.ids.tolist()) == [10, 20, 30, 40]
    with pytest.raises(ContractError):
        rank_gallery(_pair(rng), [], store)


def _recall_oracle(rankings, relevance, k):
    hits = sum(bool(set(r.ids[:k].tolist()) & relevance[r.query]) for r in rankings)
    return hits / len(rankings)


def test_recall_matches_set_intersection_oracle():
    r = np.random.default_rng(1)
    for _ in range(50):
        M = int(r.integers(1, 21))
        rankings, relevance = [], {}
        for q in range(20):
            rankings.append(Ranking(q, r.permutation(M), np.zeros(M)))
            relevance[q] = set(r.choice(M, size=int(r.integers(0, min(M, 3) + 1)),
                                        replace=False).tolist())
        ks = [1, 5, 10]
        rep = recall_at_k(rankings, relevance, ks)
        for k in ks:
            assert rep.recall_at[k] == _recall_oracle(rankings, relevance, k)
        assert rep.num_queries == 20 and rep.num_gallery == M


def test_recall_closed_forms():
    rankings = [Ranking(q, np.array([q, 5, 6]), np.zeros(3)) for q in range(3)]
    rep = recall_at_k(rankings, {q: {q} for q in range(3)}, [1, 2])
    assert rep.recall_at == {1: 1.0, 2: 1.0}
    rep = recall_at_k(rankings, {q: set() for q in range(3)}, [1, 3])
    assert rep.recall_at == {1: 0.0, 3: 0.0}
    with pytest.raises(ContractError):
        recall_at_k(rankings, {0: {0}}, [1])
    assert '"1": 1.0' in recall_at_k(rankings, {q: {q} for q in range(3)}, [1]).to_json()


@given(st.lists(st.integers(0, 9), min_size=5, max_size=20), st.integers(0, 1000))
def test_recall_is_monotone_in_k(order, seed):
    r = np.random.default_rng(seed)
    ids = np.array(list(dict.fromkeys(order)))
    rankings = [Ranking(0, r.permutation(ids), np.zeros(len(ids)))]
    rel = {0: {int(r.choice(ids))}}
    vals = [recall_at_k(rankings, rel, [k]).recall_at[k] for k in range(1, len(ids) + 1)]
    assert all(a <= b for a, b in zip(vals, vals[1:])) and vals[-1] == 1.0


# -- purity -----------------------------------------------------------------------

def test_one_hot_attention_is_pure():
    labels = [np.array([0, 1, 2, 2, -1]), np.array([1, 1, 0, 2, 2])]
    maps = [np.eye(3)[np.maximum(l, 0)] for l in labels]
    assert part_purity(maps, labels) == 1.0


def test_uniform_attention_two_balanced_parts():
    labels = [np.array([0, 0, 1, 1])]
    uniform = [np.full((4, 2), 0.5)]   # argmax ties resolve to slot 0
    table = contingency(uniform, labels)
    best = max(sum(table[i, p[i]] for i in range(2)) for p in itertools.permutations(range(2)))
    assert part_purity(uniform, labels) == best / 4 == 0.5


def test_matching_agrees_with_exhaustive_search(rng):
    for _ in range(20):
        table = rng.integers(0, 20, size=(4, 4))
        brute = max(sum(table[i, p[i]] for i in range(4)) for p in itertools.permutations(range(4)))
        assert sum(table[r, c] for r, c in best_matching(table)) == brute


@given(st.integers(0, 10_000))
def test_purity_ignores_slot_relabelling(seed):
    r = np.random.default_rng(seed)
    maps = [r.dirichlet(np.ones(4), size=6) for _ in range(3)]
    labels = [r.integers(-1, 3, size=6) for _ in range(3)]
    if all((l < 0).all() for l in labels):
        return
    perm = r.permutation(4)
    assert part_purity(maps, labels) == part_purity([m[:, perm] for m in maps], labels)


def test_purity_without_labelled_tokens():
    with pytest.raises(ContractError):
        part_purity([np.ones((2, 2)) / 2], [np.array([-1, -1])])


# -- export ------------------------------------------------------------------------

@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 1000))
def test_csv_round_trip(tmp_path_factory, n, k, seed):
    M = np.random.default_rng(seed).random((n, k))
    p = tmp_path_factory.mktemp("csv") / "m.csv"
    write_matrix_csv(p, M)
    assert p.read_text().splitlines()[0].split(",") == [f"slot_{i}" for i in range(k)]
    assert np.allclose(read_matrix_csv(p), M, atol=1e-9)


def test_pgm_round_trip(tmp_path, rng):
    img = rng.random((4, 3))
    write_pgm(tmp_path / "h.pgm", img)
    back = read_pgm(tmp_path / "h.pgm")
    assert back.shape == (4, 3) and back.size == 12 and back.max() == 255
    assert np.array_equal(back, np.rint(img / img.max() * 255))
    write_pgm(tmp_path / "z.pgm", np.zeros((2, 2)))
    assert np.array_equal(read_pgm(tmp_path / "z.pgm"), np.zeros((2, 2)))
    (tmp_path / "bad.pgm").write_text("P5 1 1 255 0")
    with pytest.raises(ContractError):
        read_pgm(tmp_path / "bad.pgm")


def test_export_attention_layout(tmp_path, rng):
    vis = [rng.dirichlet(np.ones(6), size=3).T for _ in range(2)]    # (N=6, K=3)
    txt = [rng.random((5, 3))]
    tdpa = rng.dirichlet(np.ones(3), size=1)
    files = export_attention({"visual": vis, "text": txt}, tdpa, tmp_path / "out", grid=(2, 3))
    names = sorted(f.name for f in files)
    assert "tdpa.csv" in names and "attn_text_0000.csv" in names
    assert len([n for n in names if n.startswith("heat_visual")]) == 2 * 3
    assert np.allclose(read_matrix_csv(tmp_path / "out" / "attn_visual_0001.csv"), vis[1])
    heat = read_pgm(tmp_path / "out" / "heat_visual_0000_slot2.pgm")
    assert heat.size == 6 and heat.shape == (2, 3)
    assert np.allclose(read_matrix_csv(tmp_path / "out" / "tdpa.csv"), tdpa)
