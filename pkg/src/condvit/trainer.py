"""Contrastive training of CondViT.

For a batch of N products the query side embeds a complex image with the
product's condition, the gallery side embeds a simple image with none.  With
``S_ij`` the cosine similarity of query ``i`` and gallery item ``j`` the
per-direction loss is

    l(S) = -1/N * sum_i log( exp(S_ii * tau) / sum_j exp(S_ij * tau) )

and the objective is ``l(S)/2 + l(S^T)/2``.  The temperature multiplies the
similarities; ``tau = exp(t)`` with ``t`` learned and ``tau`` clamped to 100.

Training runs in two phases: during the warm-up epochs only the final
projection and the condition-related embeddings move (linear warm-up of the
learning rate), afterwards every parameter trains under a cosine decay.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from condvit import autodiff as ad
from condvit.autodiff import DimensionError, Tensor
from condvit.benchmark import embed_gallery, embed_queries
from condvit.datasets import CONDITION_MODES, EvalSplit, PairDataset, TrainProduct
from condvit.data import resize_bilinear
from condvit.errors import ConfigError, DataError, NumericFailure
from condvit.index import GalleryIndex
from condvit.model import WARMUP_PARAMS, Categorical, CondViT, ExternalVector

log = logging.getLogger(__name__)

TAU_INIT = 1.0 / 0.07
TAU_MAX = 100.0


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def infonce_half(S, tau) -> Tensor:
    """Cross-entropy of each row of ``S * tau`` against its diagonal entry."""
    S = S if isinstance(S, Tensor) else ad.tensor(S)
    tau = tau if isinstance(tau, Tensor) else ad.tensor(tau)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"infonce_half needs a square matrix, got shape {S.shape}")
    n = S.shape[0]
    logp = ad.log_softmax(S * tau, axis=-1)
    eye = np.eye(n, dtype=S.dtype)
    return ad.scale((logp * eye).sum(), -1.0 / n)


def bidirectional_loss(S, tau) -> Tensor:
    S = S if isinstance(S, Tensor) else ad.tensor(S)
    return ad.scale(infonce_half(S, tau) + infonce_half(S.T, tau), 0.5)


class Temperature:
    """``tau = exp(t)``; ``t`` is the trained parameter."""

    def __init__(self, tau: float = TAU_INIT):
        self.param = ad.parameter(np.asarray(math.log(tau), dtype=ad.get_default_dtype()), name="logit_scale")

    def tensor(self) -> Tensor:
        return ad.exp(self.param)

    @property
    def value(self) -> float:
        return float(np.exp(self.param.data))

    def clamp(self) -> None:
        limit = self.param.data.dtype.type(math.log(TAU_MAX))
        if self.param.data > limit:
            self.param.data = np.asarray(limit, dtype=self.param.data.dtype)


# ---------------------------------------------------------------------------
# schedule and optimiser
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    max_lr: float = 3e-4
    warmup_epochs: int = 1
    batch_size: int = 32
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    crop_min_area: float = 0.8
    hflip_prob: float = 0.5
    condition_mode: str = "category"
    include_partial: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0 < self.crop_min_area <= 1:
            raise ConfigError(f"crop_min_area must be in (0, 1], got {self.crop_min_area}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})"
            )
        if self.batch_size < 2:
            raise ConfigError("in-batch negatives need batch_size >= 2")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Full-scale schedule: 30 epochs, peak learning rate 1e-5."""
        return cls(**{"epochs": 30, "max_lr": 1e-5, **overrides})

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["betas"] = list(self.betas)
        return out


def lr_at(step: int, total_steps: int, config: TrainConfig, warmup_steps: int | None = None) -> float:
    """Linear warm-up from 0 to ``max_lr``, then cosine decay to 0 at the last step."""
    if warmup_steps is None:
        warmup_steps = round(total_steps * config.warmup_epochs / config.epochs)
    peak = config.max_lr
    if step < warmup_steps:
        return peak * step / warmup_steps
    span = max(1, total_steps - 1 - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(
    params: list[Tensor],
    grads: list[np.ndarray | None],
    state: dict,
    lr: float,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    decay_mask: list[bool] | None = None,
) -> None:
    """One AdamW update in place; decay is applied to weights, not moments.

    ``state`` holds ``t`` and per-parameter ``m``/``v`` keyed by ``id``.
    """
    b1, b2 = betas
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        key = id(p)
        m = state.setdefault(("m", key), np.zeros_like(p.data))
        v = state.setdefault(("v", key), np.zeros_like(p.data))
        if m.shape != p.shape:
            raise DimensionError(f"optimizer state {m.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        decay = weight_decay if (decay_mask is None or decay_mask[i]) else 0.0
        new = p.data * (1.0 - lr * decay) - lr * update
        p.data = new.astype(p.data.dtype, copy=False)


class AdamW:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}
        self._t: dict[int, int] = {}

    def step(self, params: list[Tensor], lr: float, decay_mask: list[bool]) -> None:
        # bias correction counts each parameter's own updates, so parameters
        # frozen during warm-up start their moments fresh
        for p, decays in zip(params, decay_mask):
            if p.grad is None:
                continue
            sub = self.state.setdefault(id(p), {})
            adamw_step([p], [p.grad], sub, lr, self.betas, self.eps,
                       self.weight_decay if decays else 0.0)


def _decays(name: str) -> bool:
    return not name.endswith((".gamma", ".beta")) and name != "logit_scale"


# ---------------------------------------------------------------------------
# augmentation and batches
# ---------------------------------------------------------------------------


def random_resized_crop_box(rng: np.random.Generator, h: int, w: int, min_area: float,
                            ratio=(3 / 4, 4 / 3), attempts: int = 10) -> tuple[int, int, int, int]:
    """``(top, left, height, width)``; falls back to the whole image."""
    area = h * w
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(attempts):
        target = area * rng.uniform(min_area, 1.0)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def augment(image: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    """Random horizontal flip then random resized crop back to the input size."""
    h, w = image.shape[:2]
    out = image
    if rng.uniform() < config.hflip_prob:
        out = hflip(out)
    top, left, ch, cw = random_resized_crop_box(rng, h, w, config.crop_min_area)
    if (ch, cw) != (h, w):
        out = resize_bilinear(out[top:top + ch, left:left + cw], h, w)
    return np.ascontiguousarray(out, dtype=np.float32)


@dataclass
class Pair:
    product_id: str
    complex: np.ndarray
    simple: np.ndarray
    category: int
    caption: np.ndarray | None = None


def sample_batch(products: list[TrainProduct], batch_size: int, rng: np.random.Generator,
                 use_captions: bool = False) -> list[Pair]:
    """``batch_size`` distinct products, each with a random complex/simple pair."""
    if batch_size > len(products):
        raise ConfigError(f"batch of {batch_size} from {len(products)} products")
    chosen = rng.choice(len(products), size=batch_size, replace=False)
    return [draw_pair(products[i], rng, use_captions) for i in chosen]


def draw_pair(product: TrainProduct, rng: np.random.Generator, use_captions: bool = False) -> Pair:
    if not product.simple or not product.complex:
        raise DataError(f"product {product.product_id!r} lacks a simple or complex image")
    ci = int(rng.integers(len(product.complex)))
    si = int(rng.integers(len(product.simple)))
    caption = None
    if use_captions:
        if not product.captions or not product.captions[ci]:
            raise DataError(f"product {product.product_id!r} has no caption vectors")
        options = product.captions[ci]
        caption = options[int(rng.integers(len(options)))]
    return Pair(product.product_id, product.complex[ci], product.simple[si], product.category, caption)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    step: int
    loss: float
    lr: float
    tau: float
    val_r1: float | None
    seconds: float

    def line(self) -> str:
        val = "nan" if self.val_r1 is None else f"{self.val_r1:.4f}"
        return (
            f"epoch={self.epoch} step={self.step} loss={self.loss:.6f} lr={self.lr:.3e} "
            f"tau={self.tau:.4f} val_r1={val}"
        )


@dataclass
class TrainResult:
    model: CondViT
    temperature: Temperature
    history: list[EpochRecord]
    step_losses: list[float]
    best_epoch: int
    best_val_r1: float | None
    warmup_snapshot: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def metrics(self) -> dict:
        last = self.history[-1] if self.history else None
        return {
            "epochs": len(self.history),
            "steps": len(self.step_losses),
            "first_epoch_loss": self.history[0].loss if self.history else float("nan"),
            "final_loss": last.loss if last else float("nan"),
            "final_tau": self.temperature.value,
            "best_epoch": self.best_epoch,
            "best_val_r1": self.best_val_r1 if self.best_val_r1 is not None else float("nan"),
        }


def conditions_for(pairs: list[Pair], mode: str) -> list | None:
    if mode == "none":
        return None
    if mode == "category":
        return [Categorical(p.category) for p in pairs]
    return [ExternalVector(p.caption) for p in pairs]


def validation_r1(model: CondViT, val: EvalSplit, mode: str = "category") -> float:
    """R@1 of the validation queries against targets plus validation distractors."""
    if not len(val.query_ids):
        return float("nan")
    q = embed_queries(model, val.query_images, val.conditions(mode))
    gallery_imgs = (
        np.concatenate([val.target_images, val.distractor_images])
        if len(val.distractor_images) else val.target_images
    )
    g = embed_gallery(model, gallery_imgs)
    pids = list(val.target_products) + [None] * len(val.distractor_ids)
    index = GalleryIndex(g, product_ids=pids)
    results = index.search_batch(q, 1)
    hits = [index.product_ids[r.positions[0]] == t for r, t in zip(results, val.query_targets)]
    return float(np.mean(hits))


def train(
    model: CondViT,
    dataset: PairDataset,
    config: TrainConfig,
    validation: EvalSplit | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    keep_warmup_snapshot: bool = False,
) -> TrainResult:
    """Train in place; the returned model holds the best-validation weights."""
    products = [p for p in dataset.products if p.simple and p.complex]
    for p in dataset.products:
        if not (p.simple and p.complex):
            raise DataError(f"product {p.product_id!r} lacks a simple or complex image")
    if len(products) < 2:
        raise DataError("training needs at least two products")
    use_captions = config.condition_mode == "caption"
    if config.condition_mode not in CONDITION_MODES:
        raise ConfigError(f"unknown condition mode {config.condition_mode!r}")

    rng = np.random.Generator(np.random.Philox(config.seed))
    bs = min(config.batch_size, len(products))
    steps_per_epoch = len(products) // bs
    total = steps_per_epoch * config.epochs
    warmup_steps = steps_per_epoch * config.warmup_epochs

    temp = Temperature()
    names = list(model.params)
    params = [model.params[n] for n in names] + [temp.param]
    decay_mask = [_decays(n) for n in names] + [False]
    warm = [n in WARMUP_PARAMS for n in names] + [True]
    opt = AdamW(config.betas, config.adam_eps, config.weight_decay)

    history: list[EpochRecord] = []
    step_losses: list[float] = []
    best_state = model.state_dict()
    best_val: float | None = None
    best_epoch = 0
    snapshot = None
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        in_warmup = epoch < config.warmup_epochs
        for p, w in zip(params, warm):
            p.requires_grad = w or not in_warmup
        order = rng.permutation(len(products))
        epoch_losses = []
        lr = 0.0
        for b in range(steps_per_epoch):
            batch = [draw_pair(products[i], rng, use_captions) for i in order[b * bs:(b + 1) * bs]]
            xc = np.stack([augment(p.complex, rng, config) for p in batch])
            xs = np.stack([augment(p.simple, rng, config) for p in batch])
            za = model.encode_batch(xc, conditions_for(batch, config.condition_mode))
            zb = model.encode_batch(xs, None)
            S = za @ zb.T
            loss = bidirectional_loss(S, temp.tensor())
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericFailure(f"non-finite loss {value} at step {step} (tau={temp.value:.6g})")
            for p in params:
                p.zero_grad()
            ad.backward(loss)
            lr = lr_at(step, total, config, warmup_steps)
            opt.step(params, lr, decay_mask)
            temp.clamp()
            for p in params:
                p.zero_grad()
            epoch_losses.append(value)
            step_losses.append(value)
            step += 1
        if keep_warmup_snapshot and epoch == config.warmup_epochs - 1:
            snapshot = model.state_dict()
        val_r1 = validation_r1(model, validation, config.condition_mode) if validation is not None else None
        rec = EpochRecord(epoch, step, float(np.mean(epoch_losses)), lr, temp.value, val_r1,
                          time.perf_counter() - t0)
        history.append(rec)
        log.info(rec.line())
        if on_epoch is not None:
            on_epoch(rec)
        # checkpoint selection only once every parameter trains; a tie goes
        # to the later, longer-trained epoch
        if not in_warmup or config.warmup_epochs == config.epochs:
            if val_r1 is None or best_val is None or val_r1 >= best_val:
                best_val = val_r1 if val_r1 is not None else best_val
                best_state = model.state_dict()
                best_epoch = epoch
    for p in params:
        p.requires_grad = True
    model.load_state_dict(best_state)
    return TrainResult(model, temp, history, step_losses, best_epoch, best_val, snapshot)
