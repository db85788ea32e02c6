"""Asymmetric retrieval benchmark: R@1 and Cat@1 with bootstrapped subsets.

Queries are complex images embedded *with* their condition; the gallery
(targets plus distractors) is embedded without one.  For each distractor
level, query subset ``i`` is paired with distractor subset ``i``; both are
drawn with replacement from a Philox generator seeded by ``BootstrapSpec``,
so every subset is regenerable bit-exactly on any platform.  Distractor
subsets are nested across levels (level ``L`` uses the first ``L`` draws of
its sequence), so adding distractors can only add competitors.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from condvit.errors import CapacityError, ConfigError, ProtocolError
from condvit.index import EmbeddingStore, GalleryIndex, score_rows


@dataclass
class BootstrapSpec:
    seed: int = 0
    n_query_subsets: int = 10
    queries_per_subset: int = 1000
    distractor_levels: tuple[int, ...] = (0, 10_000, 100_000, 1_000_000)
    n_distractor_subsets: int = 10

    def __post_init__(self):
        self.distractor_levels = tuple(int(x) for x in self.distractor_levels)
        if self.n_query_subsets != self.n_distractor_subsets:
            raise ConfigError(
                "query subset i is paired with distractor subset i; "
                f"got {self.n_query_subsets} query and {self.n_distractor_subsets} distractor subsets"
            )
        if self.n_query_subsets < 1 or self.queries_per_subset < 1:
            raise ConfigError("need at least one subset of at least one query")
        if any(x < 0 for x in self.distractor_levels):
            raise ConfigError("distractor levels must be non-negative")

    def available(self, pool_size: int) -> "BootstrapSpec":
        """Copy keeping only the levels a pool of ``pool_size`` can serve."""
        return dataclasses.replace(
            self, distractor_levels=tuple(x for x in self.distractor_levels if x <= pool_size)
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["distractor_levels"] = list(self.distractor_levels)
        return out


@dataclass
class SubsetPlan:
    query_subsets: list[np.ndarray]
    distractor_draws: list[np.ndarray]


def make_subsets(spec: BootstrapSpec, n_queries: int, n_distractors: int) -> SubsetPlan:
    """Query subsets, then one nested distractor sequence per subset."""
    top = max(spec.distractor_levels, default=0)
    if top > n_distractors:
        raise CapacityError(
            f"distractor level {top} exceeds the pool of {n_distractors} distractors"
        )
    if n_queries < 1:
        raise ProtocolError("no queries to evaluate")
    rng = np.random.Generator(np.random.Philox(spec.seed))
    queries = [rng.integers(0, n_queries, size=spec.queries_per_subset) for _ in range(spec.n_query_subsets)]
    draws = [
        rng.integers(0, n_distractors, size=top) if top else np.zeros(0, dtype=np.int64)
        for _ in range(spec.n_distractor_subsets)
    ]
    return SubsetPlan(queries, draws)


# ---------------------------------------------------------------------------
# per-query metrics
# ---------------------------------------------------------------------------


def recall_at_k(ranked_ids: Sequence, target_id, k: int, gallery_ids: Sequence | None = None) -> int:
    """1 if ``target_id`` is among the first ``k`` ranked ids."""
    if gallery_ids is not None and target_id not in set(gallery_ids):
        raise ProtocolError(f"target {target_id!r} is not in the gallery")
    return int(target_id in list(ranked_ids)[:k])


def cat_at_1(top1_category, query_category) -> int:
    """1 if the top-1 item's category equals the query's; unlabelled counts 0."""
    if top1_category is None:
        return 0
    return int(top1_category == query_category)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return 0.0, 0.0
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class QueryOutcomes:
    hits: np.ndarray
    cat_hits: np.ndarray
    top1_ids: list
    unlabeled_top1: int

    @property
    def recall(self) -> float:
        return float(self.hits.mean()) if self.hits.size else 0.0

    @property
    def cat_accuracy(self) -> float:
        return float(self.cat_hits.mean()) if self.cat_hits.size else 0.0


def evaluate_index(
    index: GalleryIndex,
    queries: EmbeddingStore,
    filtered: bool = False,
    threads: int = 1,
) -> QueryOutcomes:
    """Top-1 outcome of every query against one fixed gallery.

    ``queries.product_ids`` name each query's target product and
    ``queries.categories`` its conditioning category.
    """
    gallery_products = set(p for p in index.product_ids if p is not None)
    for q, target in zip(queries.item_ids, queries.product_ids):
        if target not in gallery_products:
            raise ProtocolError(f"target {target!r} of query {q!r} is not in the gallery")
    results = index.search_batch(
        queries.embeddings, 1, threads=threads, category=list(queries.categories) if filtered else None
    )
    hits, cats, top1, unlabeled = [], [], [], 0
    for res, target, cat in zip(results, queries.product_ids, queries.categories):
        if not len(res):
            hits.append(0)
            cats.append(0)
            top1.append(None)
            continue
        pos = res.positions[0]
        top_cat = index.categories[pos]
        unlabeled += top_cat is None
        hits.append(int(index.product_ids[pos] == target))
        cats.append(cat_at_1(top_cat, cat))
        top1.append(res.ids[0])
    return QueryOutcomes(np.array(hits), np.array(cats), top1, unlabeled)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------


@dataclass
class LevelMetrics:
    distractors: int
    r1_mean: float
    r1_std: float
    cat1_mean: float
    cat1_std: float
    r1_values: list[float] = field(default_factory=list)
    cat1_values: list[float] = field(default_factory=list)


@dataclass
class FullMetrics:
    distractors: int
    r1: float
    cat1: float
    n_queries: int


@dataclass
class MetricReport:
    levels: list[LevelMetrics]
    full: FullMetrics
    spec: dict
    filtered: bool = False
    unlabeled_top1: int = 0

    def level(self, n: int) -> LevelMetrics:
        for lv in self.levels:
            if lv.distractors == n:
                return lv
        raise KeyError(n)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(
            [LevelMetrics(**lv) for lv in data["levels"]],
            FullMetrics(**data["full"]),
            data["spec"],
            data.get("filtered", False),
            data.get("unlabeled_top1", 0),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        """Aligned text table: one column group per distractor level."""

        def label(n: int) -> str:
            for div, suffix in ((1_000_000, "M"), (1_000, "K")):
                if n >= div and n % div == 0:
                    return f"{n // div}{suffix}"
            return str(n)

        heads = [label(lv.distractors) for lv in self.levels] + [f"+{label(self.full.distractors)} (full)"]
        cells = [
            (f"{100 * lv.r1_mean:.1f} ±{100 * lv.r1_std:.2f}", f"{100 * lv.cat1_mean:.1f} ±{100 * lv.cat1_std:.2f}")
            for lv in self.levels
        ]
        cells.append((f"{100 * self.full.r1:.1f}", f"{100 * self.full.cat1:.1f}"))
        width = max(13, *(len(c) for pair in cells for c in pair))
        group = 2 * width + 3
        line1 = "distractors  | " + " | ".join(h.center(group) for h in heads)
        line2 = "             | " + " | ".join(
            f"{'%R@1'.center(width)}   {'%Cat@1'.center(width)}" for _ in heads
        )
        line3 = "             | " + " | ".join(
            f"{a.center(width)}   {b.center(width)}" for a, b in cells
        )
        rule = "-" * len(line1)
        return "\n".join([line1, line2, rule, line3]) + "\n"


def _score_matrix(index: GalleryIndex, queries: np.ndarray, threads: int) -> np.ndarray:
    if not len(index):
        return np.zeros((len(queries), 0))

    def row(i):
        return index.scores(queries[i])

    if threads <= 1:
        rows = [row(i) for i in range(len(queries))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, range(len(queries))))
    return np.stack(rows)


def bootstrap_eval(
    queries: EmbeddingStore,
    targets: EmbeddingStore,
    distractors: EmbeddingStore,
    spec: BootstrapSpec,
    filtered: bool = False,
    threads: int = 1,
) -> MetricReport:
    """Bootstrapped R@1 / Cat@1 for every distractor level plus one full run.

    Galleries list the targets first and the sampled distractors after them,
    in draw order; that insertion order breaks exact score ties.
    """
    if not len(queries):
        raise ProtocolError("no queries to evaluate")
    target_pos = {}
    for i, pid in enumerate(targets.product_ids):
        if pid is None:
            raise ProtocolError(f"target row {targets.item_ids[i]!r} has no product id")
        if pid in target_pos:
            raise ProtocolError(f"product {pid!r} has more than one gallery target")
        target_pos[pid] = i
    for q, pid in zip(queries.item_ids, queries.product_ids):
        if pid not in target_pos:
            raise ProtocolError(f"target {pid!r} of query {q!r} is not in the gallery")

    plan = make_subsets(spec, len(queries), len(distractors))
    t_index = GalleryIndex.from_store(targets)
    d_index = GalleryIndex.from_store(distractors) if len(distractors) else None
    qemb = np.asarray(queries.embeddings)
    ts = _score_matrix(t_index, qemb, threads)
    ds = _score_matrix(d_index, qemb, threads) if d_index is not None else np.zeros((len(qemb), 0))

    q_target = np.array([target_pos[p] for p in queries.product_ids])
    q_cat = np.array([-1 if c is None else c for c in queries.categories])
    t_cat = np.array([-1 if c is None else c for c in targets.categories])
    d_cat = np.array([-1 if c is None else c for c in distractors.categories], dtype=np.int64)
    neg = -np.inf

    if filtered:
        ts = np.where(t_cat[None, :] == q_cat[:, None], ts, neg)
        ds = np.where(d_cat[None, :] == q_cat[:, None], ds, neg) if ds.size else ds

    def outcome(rows: np.ndarray, draw: np.ndarray | None):
        """Hits, category hits and unlabelled count for query ``rows``."""
        t_scores = ts[rows]
        best_t = t_scores.argmax(axis=1)
        best_t_score = t_scores[np.arange(len(rows)), best_t]
        if draw is not None and draw.size:
            d_scores = ds[rows][:, draw]
            best_d = d_scores.argmax(axis=1)
            best_d_score = d_scores[np.arange(len(rows)), best_d]
            # targets precede distractors in the gallery, so they win ties
            from_target = best_t_score >= best_d_score
            top_cat = np.where(from_target, t_cat[best_t], d_cat[draw[best_d]])
            empty = np.isneginf(best_t_score) & np.isneginf(best_d_score)
        else:
            from_target = np.ones(len(rows), dtype=bool)
            top_cat = t_cat[best_t]
            empty = np.isneginf(best_t_score)
        hit = from_target & (best_t == q_target[rows]) & ~empty
        cat_hit = (top_cat == q_cat[rows]) & (top_cat >= 0) & ~empty
        unlabeled = int(((top_cat < 0) & ~empty).sum())
        return hit, cat_hit, unlabeled

    unlabeled_total = 0
    levels = []
    for level in spec.distractor_levels:
        r1s, c1s = [], []
        for i, qrows in enumerate(plan.query_subsets):
            draw = plan.distractor_draws[i][:level]
            hit, cat_hit, unl = outcome(qrows, draw)
            unlabeled_total += unl
            r1s.append(float(hit.mean()))
            c1s.append(float(cat_hit.mean()))
        r_mean, r_std = mean_std(r1s)
        c_mean, c_std = mean_std(c1s)
        levels.append(LevelMetrics(level, r_mean, r_std, c_mean, c_std, r1s, c1s))

    all_rows = np.arange(len(queries))
    hit, cat_hit, unl = outcome(all_rows, np.arange(len(distractors)))
    unlabeled_total += unl
    full = FullMetrics(len(distractors), float(hit.mean()), float(cat_hit.mean()), len(queries))
    return MetricReport(levels, full, spec.to_dict(), filtered, unlabeled_total)


# ---------------------------------------------------------------------------
# embedding helpers
# ---------------------------------------------------------------------------


def _chunks(n: int, size: int):
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def embed_gallery(model, images: np.ndarray, batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """Unconditional embeddings (``c_empty`` when the model uses one)."""
    return embed_queries(model, images, None, batch_size, threads)


def embed_queries(model, images: np.ndarray, conds, batch_size: int = 64, threads: int = 1) -> np.ndarray:
    images = np.asarray(images)
    n = len(images)
    if n == 0:
        return np.zeros((0, model.config.output_dim), dtype=np.float32)
    spans = _chunks(n, batch_size)
    per_item = conds is not None and not hasattr(conds, "id") and not hasattr(conds, "values")

    def run(span):
        s, e = span
        c = list(conds)[s:e] if per_item else conds
        return model.embed(images[s:e], c, batch_size=batch_size)

    if threads <= 1:
        parts = [run(sp) for sp in spans]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, spans))
    return np.concatenate(parts).astype(np.float32)
