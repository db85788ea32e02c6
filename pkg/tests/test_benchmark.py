import numpy as np
import pytest

import oracles

from condvit.benchmark import (
    BootstrapSpec,
    MetricReport,
    bootstrap_eval,
    cat_at_1,
    embed_gallery,
    embed_queries,
    evaluate_index,
    make_subsets,
    recall_at_k,
)
from condvit.data import load_manifest
from condvit.datasets import EvalSplit
from condvit.errors import CapacityError, ConfigError, ProtocolError
from condvit.index import EmbeddingStore, GalleryIndex
from condvit.model import Categorical, CondViT, preset
from condvit.synthetic import gen_dataset


def test_recall_examples():
    assert recall_at_k(["t", "a"], "t", 1) == 1
    assert recall_at_k(["a", "t"], "t", 1) == 0
    assert recall_at_k(["a", "t"], "t", 2) == 1
    ranks = [1, 5, 2]
    hits = [recall_at_k(["x"] * (r - 1) + ["t"], "t", 1) for r in ranks]
    assert sum(hits) / 3 == pytest.approx(1 / 3)
    with pytest.raises(ProtocolError):
        recall_at_k(["a"], "t", 1, gallery_ids=["a", "b"])


def test_cat_examples():
    assert cat_at_1(2, 2) == 1
    assert cat_at_1(1, 2) == 0
    assert cat_at_1(None, 2) == 0
    assert np.mean([cat_at_1(c, 0) for c in (0, 0, 3, 0)]) == 0.75


def test_distractor_of_same_category_counts_for_cat_only():
    idx = GalleryIndex(np.array([[1.0, 0.0], [0.9, 0.1]]), product_ids=[None, "p"], categories=[1, 1])
    q = EmbeddingStore(np.array([[1.0, 0.0]]), ["q"], ["p"], [1])
    out = evaluate_index(idx, q)
    assert out.recall == 0.0 and out.cat_accuracy == 1.0


def test_spec_validation():
    with pytest.raises(ConfigError):
        BootstrapSpec(n_query_subsets=10, n_distractor_subsets=5)
    with pytest.raises(ConfigError):
        BootstrapSpec(distractor_levels=(-1,))


def test_capacity_error():
    with pytest.raises(CapacityError):
        make_subsets(BootstrapSpec(distractor_levels=(0, 500)), 10, 100)


def _stores(rng, n, d=8, n_dist=30, cats=3):
    t = rng.standard_normal((n, d))
    tstore = EmbeddingStore(t, [f"t{i}" for i in range(n)], [f"p{i}" for i in range(n)],
                            [i % cats for i in range(n)])
    dstore = EmbeddingStore(rng.standard_normal((n_dist, d)), [f"d{i}" for i in range(n_dist)],
                            [None] * n_dist, [i % cats for i in range(n_dist)])
    return tstore, dstore


def test_perfect_model_zero_distractors():
    rng = np.random.default_rng(0)
    tstore, dstore = _stores(rng, 12)
    q = EmbeddingStore(tstore.embeddings.copy(), [f"q{i}" for i in range(12)], tstore.product_ids, tstore.categories)
    rep = bootstrap_eval(q, tstore, dstore, BootstrapSpec(queries_per_subset=12, distractor_levels=(0,)))
    lv = rep.level(0)
    assert (lv.r1_mean, lv.r1_std) == (1.0, 0.0)
    assert (lv.cat1_mean, lv.cat1_std) == (1.0, 0.0)


def test_missing_target_is_protocol_error():
    rng = np.random.default_rng(1)
    tstore, dstore = _stores(rng, 4)
    q = EmbeddingStore(rng.standard_normal((1, 8)), ["q"], ["nope"], [0])
    with pytest.raises(ProtocolError):
        bootstrap_eval(q, tstore, dstore, BootstrapSpec(distractor_levels=(0,)))


# ---------------------------------------------------------------------------
# straight-line oracle on a synthetic set
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def synthetic_stores(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    gen_dataset(20, 200, 2, 11, root, n_train_products=2, n_val_products=2, n_val_distractors=0)
    split = EvalSplit.from_manifest(load_manifest(root / "manifest.jsonl"), "test", 64)
    model = CondViT(preset("tiny"), seed=0)
    q = embed_queries(model, split.query_images, split.conditions())
    t = embed_gallery(model, split.target_images)
    d = embed_gallery(model, split.distractor_images)
    return (
        EmbeddingStore(q, list(split.query_ids), list(split.query_targets), list(split.query_categories)),
        EmbeddingStore(t, list(split.target_ids), list(split.target_products), list(split.target_categories)),
        EmbeddingStore(d, list(split.distractor_ids), [None] * len(d), list(split.distractor_categories)),
    )


SPEC = BootstrapSpec(seed=5, n_query_subsets=10, n_distractor_subsets=10, queries_per_subset=20,
                     distractor_levels=(0, 100, 200))


def test_harness_matches_straight_line_oracle(synthetic_stores):
    qs, ts, ds = synthetic_stores
    rep = bootstrap_eval(qs, ts, ds, SPEC)
    oracle = oracles.bootstrap_levels(qs, ts, ds, SPEC.seed, 10, 20, SPEC.distractor_levels)
    for level, (r1, c1) in oracle.items():
        assert abs(rep.level(level).r1_mean - r1) <= 1e-12
        assert abs(rep.level(level).cat1_mean - c1) <= 1e-12


def test_report_deterministic_and_round_trips(synthetic_stores):
    a = bootstrap_eval(*synthetic_stores, SPEC)
    b = bootstrap_eval(*synthetic_stores, SPEC, threads=3)
    assert a.to_json() == b.to_json()
    assert MetricReport.from_dict(a.to_dict()).to_json() == a.to_json()
    assert "%R@1" in a.to_table() and "%Cat@1" in a.to_table()


def test_level_monotonicity_and_metric_relations(synthetic_stores):
    rep = bootstrap_eval(*synthetic_stores, SPEC)
    means = [lv.r1_mean for lv in rep.levels]
    assert all(a >= b for a, b in zip(means, means[1:]))
    for lv in rep.levels:
        assert lv.cat1_mean >= lv.r1_mean
        assert all(c >= r for c, r in zip(lv.cat1_values, lv.r1_values))
        assert lv.r1_std >= 0
    assert rep.full.cat1 >= rep.full.r1


def test_filtered_dominates(synthetic_stores):
    qs, ts, ds = synthetic_stores
    plain = bootstrap_eval(qs, ts, ds, SPEC)
    filt = bootstrap_eval(qs, ts, ds, SPEC, filtered=True)
    for a, b in zip(plain.levels, filt.levels):
        assert all(f >= p for f, p in zip(b.r1_values, a.r1_values))
    idx = GalleryIndex(np.concatenate([ts.embeddings, ds.embeddings]),
                       product_ids=ts.product_ids + ds.product_ids, categories=ts.categories + ds.categories)
    u = evaluate_index(idx, qs)
    f = evaluate_index(idx, qs, filtered=True)
    assert np.all(f.hits >= u.hits)


def test_gallery_embedding_is_asymmetric_and_order_equivariant(synthetic_stores, tmp_path_factory):
    model = CondViT(preset("tiny"), seed=0)
    rng = np.random.default_rng(3)
    imgs = rng.uniform(-1, 1, size=(5, 64, 64, 3)).astype(np.float32)
    g = embed_gallery(model, imgs)
    embed_queries(model, imgs, [Categorical(i % 4) for i in range(5)])
    assert embed_gallery(model, imgs).tobytes() == g.tobytes()
    perm = rng.permutation(5)
    assert embed_gallery(model, imgs[perm]).tobytes() == g[perm].tobytes()
