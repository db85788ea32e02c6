"""Acceptance gate: ten criteria, one pass/fail line each.

Criteria 4 to 6 train four tiny models on the synthetic task (conditional,
unconditional, condition inserted after block 1 and after the last block);
each run must fit the single-threaded 15 minute budget, so the whole module
takes close to an hour.
"""

import json
import time

import numpy as np
import pytest

import oracles
from acceptance_log import record

from condvit import autodiff as ad
from condvit.benchmark import BootstrapSpec, bootstrap_eval, embed_gallery, embed_queries, evaluate_index
from condvit.cli import main
from condvit.data import load_manifest
from condvit.datasets import EvalSplit, PairDataset
from condvit.gradsuite import TOLERANCE, run_suite
from condvit.index import EmbeddingStore, GalleryIndex
from condvit.model import CONDITION_PARAMS, CondViT, preset
from condvit.synthetic import gen_dataset
from condvit.trainer import TrainConfig, bidirectional_loss, infonce_half, train

pytestmark = pytest.mark.slow

# synthetic task: 40 test products, two categories per scene, 400 distractors
TASK = dict(n_products=40, n_distractors=400, categories_per_scene=2, seed=1)
TASK_EXTRA = dict(n_train_products=1920, n_val_products=40, n_val_distractors=200)
RECIPE = dict(epochs=125, batch_size=128, max_lr=1e-3, warmup_epochs=1, crop_min_area=1.0, hflip_prob=0.5, seed=0)
BUDGET_S = 15 * 60


# ---------------------------------------------------------------------------
# 1-3: numerical oracles
# ---------------------------------------------------------------------------


def test_c01_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for dtype in ("float32", "float64"):
        results = run_suite(dtype, seed=0)
        worst[dtype] = max(results, key=lambda r: r.max_rel_error)
    elapsed = time.perf_counter() - t0
    passed = all(worst[d].max_rel_error <= TOLERANCE[d] for d in worst) and elapsed < 60
    detail = ", ".join(f"{d} worst {w.name} {w.max_rel_error:.2e} (tol {TOLERANCE[d]:g})" for d, w in worst.items())
    record(1, "gradient suite", passed, f"{detail}; {elapsed:.1f}s")
    assert passed


def test_c02_loss_oracle():
    import itertools

    grid = (-1, -0.5, 0, 0.5, 1)
    worst = 0.0
    with ad.precision("float64"):
        for tau in (0.5, 1.0, 14.29):
            mats = [np.array(e, dtype=float).reshape(2, 2) for e in itertools.product(grid, repeat=4)]
            rng = np.random.default_rng(0)
            mats += [rng.choice(grid, size=(3, 3)) for _ in range(500)]
            for S in mats:
                got = float(bidirectional_loss(ad.tensor(S), ad.tensor(tau)).data)
                worst = max(worst, abs(got - oracles.loss(S.tolist(), tau)))
        single = [float(infonce_half(ad.tensor([[s]]), ad.tensor(t)).data) for s in grid for t in (0.5, 14.29)]
        rng = np.random.default_rng(1)
        sym_ok = True
        for _ in range(50):
            a = rng.uniform(-1, 1, size=(4, 4))
            S = ad.tensor(a + a.T)
            sym_ok &= infonce_half(S, ad.tensor(3.0)).data.tobytes() == infonce_half(S.T, ad.tensor(3.0)).data.tobytes()
    passed = worst <= 1e-6 and all(v == 0.0 for v in single) and sym_ok
    record(2, "loss oracle", passed, f"max |err| {worst:.2e}, N=1 zero {all(v == 0.0 for v in single)}, "
                                     f"symmetric bitwise {sym_ok}")
    assert passed


def test_c03_exact_search():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    emb = rng.standard_normal((2000, 32))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    # duplicated rows force exact ties
    emb[1500:1600] = emb[:100]
    index = GalleryIndex(emb)
    queries = rng.standard_normal((100, 32))
    queries[:10] = emb[:10]
    mismatches = sum(index.search(q, 10).positions != oracles.sort_search(emb, q, 10) for q in queries)
    elapsed = time.perf_counter() - t0
    passed = mismatches == 0 and elapsed < 10
    record(3, "exact search", passed, f"{mismatches} mismatches over 100 queries x 2000 items; {elapsed:.1f}s")
    assert passed


# ---------------------------------------------------------------------------
# 4-6, 9: trained models on the synthetic task
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def task(tmp_path_factory):
    root = tmp_path_factory.mktemp("task")
    gen_dataset(TASK["n_products"], TASK["n_distractors"], TASK["categories_per_scene"], TASK["seed"],
                root, **TASK_EXTRA)
    manifest = load_manifest(root / "manifest.jsonl")
    return (
        PairDataset.from_manifest(manifest, "train", 64),
        EvalSplit.from_manifest(manifest, "val", 64),
        EvalSplit.from_manifest(manifest, "test", 64),
    )


class Run:
    """A trained model with its test outcomes, filtered and unfiltered."""

    def __init__(self, task, mode, depth):
        ds, val, test = task
        cfg = preset("tiny", insertion_depth=depth)
        model = CondViT(cfg, seed=0)
        t0 = time.perf_counter()
        train(model, ds, TrainConfig(condition_mode=mode, **RECIPE), validation=val)
        self.seconds = time.perf_counter() - t0
        self.model = model
        q = embed_queries(model, test.query_images, test.conditions(mode))
        t = embed_gallery(model, test.target_images)
        d = embed_gallery(model, test.distractor_images)
        self.queries = EmbeddingStore(q, test.query_ids, test.query_targets, test.query_categories)
        self.targets = EmbeddingStore(t, test.target_ids, test.target_products, test.target_categories)
        self.distractors = EmbeddingStore(d, test.distractor_ids, [None] * len(d), test.distractor_categories)
        index = GalleryIndex(
            np.concatenate([t, d]),
            product_ids=list(test.target_products) + [None] * len(d),
            categories=list(test.target_categories) + list(test.distractor_categories),
        )
        self.index = index
        self.plain = evaluate_index(index, self.queries)
        self.filtered = evaluate_index(index, self.queries, filtered=True)

    @property
    def r1(self) -> float:
        return self.plain.recall


_RUNS: dict = {}


def get_run(task, mode, depth) -> Run:
    key = (mode, depth)
    if key not in _RUNS:
        _RUNS[key] = Run(task, mode, depth)
    return _RUNS[key]


def test_c04_conditioning_efficacy(task):
    cond = get_run(task, "category", 0)
    uncond = get_run(task, "none", 0)
    slowest = max(cond.seconds, uncond.seconds)
    passed = cond.r1 >= 0.85 and uncond.r1 <= 0.65 and slowest <= BUDGET_S
    record(4, "conditioning efficacy", passed,
           f"conditional R@1 {cond.r1:.3f} (>= 0.85), unconditional R@1 {uncond.r1:.3f} (<= 0.65), "
           f"slowest run {slowest:.0f}s (<= {BUDGET_S}s)")
    assert passed


def test_c05_insertion_depth(task):
    depth = preset("tiny").depth
    r = {d: get_run(task, "category", d).r1 for d in (0, 1, depth)}
    gap = r[0] - r[depth]
    early = abs(r[0] - r[1])
    passed = gap >= 0.15 and early < 0.1
    record(5, "insertion depth", passed,
           f"R@1 depth0 {r[0]:.3f}, depth1 {r[1]:.3f}, depth{depth} {r[depth]:.3f}; "
           f"late gap {gap:.3f} (>= 0.15), early diff {early:.3f} (< 0.1)")
    assert passed


def _all_runs(task):
    depth = preset("tiny").depth
    return [get_run(task, m, d) for m, d in (("category", 0), ("none", 0), ("category", 1), ("category", depth))]


def test_c06_filter_dominance(task):
    ok_per_query = True
    ok_aggregate = True
    notes = []
    for run in _all_runs(task):
        ok_per_query &= bool(np.all(run.filtered.hits >= run.plain.hits))
        cross = sum(
            1 for hit, cat_hit in zip(run.plain.hits, run.plain.cat_hits) if not hit and not cat_hit
        )
        gain = run.filtered.recall - run.plain.recall
        if cross:
            ok_aggregate &= gain > 0
        notes.append(f"{run.plain.recall:.3f}->{run.filtered.recall:.3f} ({cross} cross-category misses)")
    passed = ok_per_query and ok_aggregate
    record(6, "filter dominance", passed, "; ".join(notes))
    assert passed


def test_c09_metric_relations(task):
    ok = True
    for run in _all_runs(task):
        ok &= run.plain.cat_accuracy >= run.plain.recall and run.filtered.cat_accuracy >= run.filtered.recall
        rep = bootstrap_eval(run.queries, run.targets, run.distractors,
                             BootstrapSpec(queries_per_subset=40, distractor_levels=(0, 100, 400)))
        ok &= all(c >= r for lv in rep.levels for c, r in zip(lv.cat1_values, lv.r1_values))
        ok &= rep.full.cat1 >= rep.full.r1
    run = get_run(task, "category", 0)
    perfect = EmbeddingStore(run.targets.embeddings.copy(), [f"q{i}" for i in range(len(run.targets))],
                             run.targets.product_ids, run.targets.categories)
    rep = bootstrap_eval(perfect, run.targets, run.distractors,
                         BootstrapSpec(queries_per_subset=40, distractor_levels=(0,)))
    perfect_ok = (rep.level(0).r1_mean, rep.level(0).r1_std) == (1.0, 0.0)
    passed = ok and perfect_ok
    record(9, "metric relations", passed, f"Cat@1 >= R@1 everywhere {ok}; perfect oracle R@1 "
                                          f"{rep.level(0).r1_mean} std {rep.level(0).r1_std}")
    assert passed


# ---------------------------------------------------------------------------
# 7-8: protocol and asymmetry
# ---------------------------------------------------------------------------


def test_c07_benchmark_protocol(task, tmp_path):
    gen_dataset(20, 200, 2, 11, tmp_path / "small", n_train_products=2, n_val_products=2, n_val_distractors=0)
    split = EvalSplit.from_manifest(load_manifest(tmp_path / "small" / "manifest.jsonl"), "test", 64)
    model = get_run(task, "category", 0).model
    qs = EmbeddingStore(embed_queries(model, split.query_images, split.conditions()),
                        split.query_ids, split.query_targets, split.query_categories)
    ts = EmbeddingStore(embed_gallery(model, split.target_images),
                        split.target_ids, split.target_products, split.target_categories)
    ds = EmbeddingStore(embed_gallery(model, split.distractor_images),
                        split.distractor_ids, [None] * len(split.distractor_ids), split.distractor_categories)
    spec = BootstrapSpec(seed=3, queries_per_subset=20, distractor_levels=(0, 100, 200))
    rep = bootstrap_eval(qs, ts, ds, spec)
    oracle = oracles.bootstrap_levels(qs, ts, ds, spec.seed, spec.n_query_subsets, 20, spec.distractor_levels)
    err = max(abs(rep.level(lv).r1_mean - r1) for lv, (r1, _) in oracle.items())
    same = rep.to_json() == bootstrap_eval(qs, ts, ds, spec).to_json()

    run = get_run(task, "category", 0)
    big = bootstrap_eval(run.queries, run.targets, run.distractors,
                         BootstrapSpec(queries_per_subset=40, distractor_levels=(0, 100, 400)))
    means = [lv.r1_mean for lv in big.levels]
    monotone = all(a >= b for a, b in zip(means, means[1:]))
    passed = err <= 1e-12 and same and monotone
    record(7, "benchmark protocol", passed,
           f"oracle max |err| {err:.1e}, bitwise repeat {same}, R@1 by level 0/100/400 "
           + "/".join(f"{m:.3f}" for m in means))
    assert passed


def test_c08_asymmetry_contract():
    model = CondViT(preset("tiny", external_cond_dim=16), seed=0)
    rng = np.random.default_rng(8)
    images = rng.uniform(-1, 1, size=(6, 64, 64, 3)).astype(np.float32)
    before = embed_gallery(model, images)
    same = True
    for trial in range(5):
        for name in CONDITION_PARAMS:
            if name in model.params:
                p = model.params[name]
                p.data = (rng.standard_normal(p.shape) * 10 ** trial).astype(p.dtype)
        same &= embed_gallery(model, images).tobytes() == before.tobytes()
    mutated = [n for n in CONDITION_PARAMS if n in model.params]
    record(8, "asymmetry contract", same, f"gallery bitwise unchanged over 5 mutations of {mutated}")
    assert same


# ---------------------------------------------------------------------------
# 10: end-to-end CLI
# ---------------------------------------------------------------------------


def test_c10_cli_smoke(tmp_path, capsys):
    t0 = time.perf_counter()
    steps = [
        ["gen-synthetic", "--products", "20", "--distractors", "200", "--seed", "7", "--train-products", "64",
         "--out", tmp_path / "data"],
        ["train", "--data", tmp_path / "data" / "manifest.jsonl", "--out", tmp_path / "model",
         "--epochs", "3", "--batch-size", "32", "--lr", "1e-3"],
        ["embed", "--data", tmp_path / "data" / "manifest.jsonl", "--checkpoint", tmp_path / "model" / "model.ckpt",
         "--out", tmp_path / "emb"],
        ["build-index", "--store", tmp_path / "emb" / "targets.cvem", "--store",
         tmp_path / "emb" / "distractors.cvem", "--out", tmp_path / "index"],
        ["evaluate", "--queries", tmp_path / "emb" / "queries.cvem", "--targets", tmp_path / "emb" / "targets.cvem",
         "--distractors", tmp_path / "emb" / "distractors.cvem", "--levels", "0,100,200",
         "--queries-per-subset", "20", "--out", tmp_path / "report"],
    ]
    codes = [main([str(a) for a in argv]) for argv in steps]
    manifest = [json.loads(line) for line in (tmp_path / "data" / "manifest.jsonl").read_text().splitlines()]
    scene = next(r for r in manifest if r["type"] == "complex" and r["split"] == "test")
    codes.append(main(["query", "--checkpoint", str(tmp_path / "model" / "model.ckpt"),
                       "--index", str(tmp_path / "index"), "--image", str(tmp_path / "data" / scene["path"]),
                       "--category", "0", "--k", "3"]))
    capsys.readouterr()
    elapsed = time.perf_counter() - t0
    well_formed = False
    report_path = tmp_path / "report" / "report.json"
    if report_path.exists():
        rep = json.loads(report_path.read_text())
        well_formed = bool(rep["levels"]) and all(
            0 <= lv["r1_mean"] <= 1 and lv["r1_std"] >= 0 and 0 <= lv["cat1_mean"] <= 1 for lv in rep["levels"]
        ) and "full" in rep
    passed = codes == [0] * 6 and well_formed and elapsed < 20 * 60
    record(10, "CLI smoke", passed, f"exit codes {codes}, report well-formed {well_formed}, {elapsed:.0f}s")
    assert passed
