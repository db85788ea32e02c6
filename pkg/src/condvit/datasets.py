"""In-memory training and evaluation sets assembled from a manifest split."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from condvit.data import ConditionVectors, Manifest, load_image
from condvit.errors import ConfigError, DataError
from condvit.model import Categorical, ExternalVector

# "none" trains and queries without any condition token (the unconditional baseline)
CONDITION_MODES = ("category", "caption", "none")


class _ImageCache:
    def __init__(self, manifest: Manifest, size: int):
        self.manifest = manifest
        self.size = size
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, record) -> np.ndarray:
        key = record.path
        if key not in self._cache:
            self._cache[key] = load_image(self.manifest.resolve(record), self.size)
        return self._cache[key]


def _check_mode(mode: str, captions: ConditionVectors | None) -> None:
    if mode not in CONDITION_MODES:
        raise ConfigError(f"condition mode {mode!r} not in {CONDITION_MODES}")
    if mode == "caption" and captions is None:
        raise ConfigError("caption conditioning needs a condition-vector file")


@dataclass
class TrainProduct:
    product_id: str
    category: int
    simple: list[np.ndarray]
    complex: list[np.ndarray]
    complex_ids: list[str]
    captions: list[list[np.ndarray]] = field(default_factory=list)


@dataclass
class PairDataset:
    products: list[TrainProduct]

    def __len__(self) -> int:
        return len(self.products)

    @classmethod
    def from_manifest(
        cls,
        manifest: Manifest,
        split: str,
        image_size: int,
        captions: ConditionVectors | None = None,
        include_partial: bool = False,
    ) -> "PairDataset":
        load = _ImageCache(manifest, image_size)
        products = []
        for pid, group in manifest.split(split).items():
            queries = group.queries(include_partial)
            caps = []
            if captions is not None:
                for rec in queries:
                    vecs = captions.get(rec.image_id)
                    if not vecs:
                        raise DataError(f"no caption vector for complex image {rec.image_id!r}")
                    caps.append(vecs)
            products.append(
                TrainProduct(
                    pid,
                    group.category_id,
                    [load(r) for r in group.simple],
                    [load(r) for r in queries],
                    [r.image_id for r in queries],
                    caps,
                )
            )
        return cls(products)


@dataclass
class EvalSplit:
    """Queries (complex images + condition), targets and distractors of one split."""

    query_images: np.ndarray
    query_ids: list[str]
    query_targets: list[str]
    query_categories: list[int]
    query_captions: list[np.ndarray | None]
    target_images: np.ndarray
    target_ids: list[str]
    target_products: list[str]
    target_categories: list[int]
    distractor_images: np.ndarray
    distractor_ids: list[str]
    distractor_categories: list[int | None]

    def conditions(self, mode: str = "category") -> list | None:
        if mode == "none":
            return None
        if mode == "category":
            return [Categorical(c) for c in self.query_categories]
        if mode == "caption":
            if any(v is None for v in self.query_captions):
                raise ConfigError("caption conditioning needs a vector for every query")
            return [ExternalVector(v) for v in self.query_captions]
        raise ConfigError(f"condition mode {mode!r} not in {CONDITION_MODES}")

    @classmethod
    def from_manifest(
        cls,
        manifest: Manifest,
        split: str,
        image_size: int,
        captions: ConditionVectors | None = None,
        include_partial: bool = False,
    ) -> "EvalSplit":
        load = _ImageCache(manifest, image_size)
        q_img, q_ids, q_tgt, q_cat, q_cap = [], [], [], [], []
        t_img, t_ids, t_pid, t_cat = [], [], [], []
        for pid, group in manifest.split(split).items():
            target = group.simple[0]
            t_img.append(load(target))
            t_ids.append(target.image_id)
            t_pid.append(pid)
            t_cat.append(group.category_id)
            for rec in group.queries(include_partial):
                q_img.append(load(rec))
                q_ids.append(rec.image_id)
                q_tgt.append(pid)
                q_cat.append(group.category_id)
                vecs = captions.get(rec.image_id) if captions is not None else []
                q_cap.append(vecs[0] if vecs else None)
        d_recs = manifest.split_distractors(split)
        d_img = [load(r) for r in d_recs]
        empty = np.zeros((0, image_size, image_size, 3), dtype=np.float32)
        return cls(
            np.stack(q_img) if q_img else empty,
            q_ids, q_tgt, q_cat, q_cap,
            np.stack(t_img) if t_img else empty,
            t_ids, t_pid, t_cat,
            np.stack(d_img) if d_img else empty,
            [r.image_id for r in d_recs],
            [r.category_id for r in d_recs],
        )
