import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles

from condvit.errors import IndexStateError, NumericError, StoreError
from condvit.index import EmbeddingStore, GalleryIndex, cosine_sim, read_store, write_store


def test_cosine_examples():
    assert cosine_sim([1, 0], [1, 0]) == 1.0
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(0.70711, abs=1e-5)
    with pytest.raises(NumericError):
        cosine_sim([0, 0], [1, 0])


def test_rows_renormalized():
    idx = GalleryIndex(np.array([[3.0, 4.0], [0.0, -2.0]]))
    np.testing.assert_allclose(np.linalg.norm(idx.matrix, axis=1), 1.0, atol=1e-12)
    with pytest.raises(NumericError):
        GalleryIndex(np.array([[0.0, 0.0]]))


def test_self_retrieval_and_clamp():
    rng = np.random.default_rng(0)
    emb = rng.standard_normal((10, 8))
    idx = GalleryIndex(emb)
    res = idx.search(emb[6], 3)
    assert res.positions[0] == 6 and res.scores[0] == pytest.approx(1.0, abs=1e-6)
    everything = idx.search(emb[0], 50)
    assert len(everything) == 10
    assert everything.scores == sorted(everything.scores, reverse=True)


def test_empty_index_and_bad_k():
    with pytest.raises(IndexStateError):
        GalleryIndex(np.zeros((0, 4))).search(np.ones(4), 1)
    with pytest.raises(ValueError):
        GalleryIndex(np.eye(3)).search(np.ones(3), 0)


def test_sort_oracle_1000_items():
    rng = np.random.default_rng(1)
    emb = rng.standard_normal((1000, 16)).astype(np.float32)
    idx = GalleryIndex(emb)
    for q in rng.standard_normal((100, 16)):
        assert idx.search(q, 10).positions == oracles.sort_search(emb, q, 10)


def test_ties_break_by_insertion_order():
    emb = np.array([[1, 0], [0, 1], [1, 0], [1, 0], [0, 1]], dtype=float)
    idx = GalleryIndex(emb)
    assert idx.search([1, 0], 4).positions == [0, 2, 3, 1]
    assert idx.search([1, 0], 2).positions == [0, 2]


# unit vectors whose pairwise cosines are exact in binary floating point, so
# mathematical ties stay ties under any summation order
_EXACT = np.concatenate([
    np.eye(4), -np.eye(4),
    np.array([[a, b, c, d] for a in (-0.5, 0.5) for b in (-0.5, 0.5) for c in (-0.5, 0.5) for d in (-0.5, 0.5)]),
])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_exact_with_heavy_ties(n, k, seed):
    rng = np.random.default_rng(seed)
    # few distinct directions so ties are common
    emb = _EXACT[rng.integers(0, len(_EXACT), size=n)] * rng.choice([1.0, 2.0, 4.0], size=(n, 1))
    q = _EXACT[rng.integers(0, len(_EXACT))]
    assert GalleryIndex(emb).search(q, k).positions == oracles.sort_search(emb, q, k)


@pytest.fixture
def labelled():
    rng = np.random.default_rng(2)
    emb = rng.standard_normal((200, 12))
    cats = [int(c) for c in rng.integers(0, 4, size=200)]
    cats[5] = None
    return emb, cats, GalleryIndex(emb, categories=cats, num_categories=5)


def test_filtered_equals_prefiltered_copy(labelled):
    emb, cats, idx = labelled
    rng = np.random.default_rng(3)
    for q in rng.standard_normal((30, 12)):
        c = int(rng.integers(0, 4))
        rows = [i for i, x in enumerate(cats) if x == c]
        sub = GalleryIndex(emb[rows])
        expect = [rows[p] for p in sub.search(q, 7).positions]
        assert idx.search_filtered(q, 7, c).positions == expect
        assert expect == oracles.sort_search(emb, q, 7, rows)


def test_filtered_is_ordered_subset(labelled):
    emb, cats, idx = labelled
    q = np.random.default_rng(4).standard_normal(12)
    full = idx.search(q, len(emb)).positions
    filt = idx.search_filtered(q, len(emb), 2).positions
    assert filt == [p for p in full if cats[p] == 2]
    assert 5 not in filt


def test_filter_never_demotes_target(labelled):
    emb, cats, idx = labelled
    rng = np.random.default_rng(6)
    for q in rng.standard_normal((20, 12)):
        target = int(rng.integers(0, 200))
        if cats[target] is None:
            continue
        full = idx.search(q, 200).positions.index(target)
        filt = idx.search_filtered(q, 200, cats[target]).positions.index(target)
        assert filt <= full


def test_filter_edge_cases(labelled):
    _, _, idx = labelled
    assert len(idx.search_filtered(np.ones(12), 3, 4)) == 0
    with pytest.raises(ValueError):
        idx.search_filtered(np.ones(12), 3, 7)


def test_batch_equals_sequential(labelled):
    emb, cats, idx = labelled
    qs = np.random.default_rng(7).standard_normal((25, 12))
    seq = [idx.search(q, 5) for q in qs]
    for threads in (1, 4):
        batch = idx.search_batch(qs, 5, threads=threads)
        assert [b.positions for b in batch] == [s.positions for s in seq]
        assert [b.scores for b in batch] == [s.scores for s in seq]
    fc = [i % 4 for i in range(25)]
    batch = idx.search_batch(qs, 5, category=fc, threads=3)
    assert [b.positions for b in batch] == [idx.search_filtered(q, 5, c).positions for q, c in zip(qs, fc)]


def test_adding_items_never_improves_rank():
    rng = np.random.default_rng(8)
    emb = rng.standard_normal((300, 6))
    q = rng.standard_normal(6)
    small = GalleryIndex(emb[:100])
    big = GalleryIndex(emb)
    assert big.scores(q)[:100].tobytes() == small.scores(q).tobytes()
    for t in (0, 50, 99):
        assert big.search(q, 300).positions.index(t) >= small.search(q, 100).positions.index(t)


def test_store_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    store = EmbeddingStore(
        rng.standard_normal((4, 5)).astype(np.float32),
        ["a", "b", "é", "d"],
        ["p1", None, "p3", "p4"],
        [0, 3, None, 1],
    )
    path = tmp_path / "x.cvem"
    write_store(path, store)
    back = read_store(path)
    assert back.embeddings.tobytes() == store.embeddings.tobytes()
    assert (back.item_ids, back.product_ids, back.categories) == (store.item_ids, store.product_ids, store.categories)


def test_store_corruption(tmp_path):
    store = EmbeddingStore(np.ones((2, 3), np.float32), ["a", "b"], [None, None], [None, None])
    path = tmp_path / "x.cvem"
    write_store(path, store)
    data = path.read_bytes()
    for bad, match in [
        (b"XXXX" + data[4:], "magic"),
        (data[:10], "header"),
        (data[:30], "embedding"),
        (data[:-1], "metadata"),
        (data + b"\0", "trailing"),
    ]:
        path.write_bytes(bad)
        with pytest.raises(StoreError, match=match):
            read_store(path)


def test_store_metadata_length_checked():
    with pytest.raises(StoreError):
        EmbeddingStore(np.ones((2, 3)), ["a"], [None, None], [None, None])
