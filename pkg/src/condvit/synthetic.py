"""Seeded simple/complex image pairs for desk-scale referred search.

Each category owns a silhouette and a fixed vertical slot (hat on top, shoes
at the bottom).  A product is one item: a category plus an appearance drawn
from 12 hues x 4 patterns x 3 pattern scales.  Its simple image is the item
alone, centred on white; complex images are scenes compositing one item per
present category, so every scene is a valid query for each of its
categories and the co-occurring items are mutual confounders.

Rasterisation is integer-only, so pixels are identical across platforms.
"""

from __future__ import annotations

import hashlib
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from condvit.data import ManifestRecord, write_condition_vectors, write_manifest, write_ppm
from condvit.errors import ConfigError

IMAGE_SIZE = 64
N_HUES = 12
N_PATTERNS = 4
N_SCALES = 3
PATTERN_NAMES = ("solid", "hstripes", "vstripes", "checker")
SCALES = (2, 3, 4)
SOLID_SHADES = 4
WHITE = 255


@dataclass(frozen=True)
class Slot:
    name: str
    width: int
    height: int
    center_y: int


# (width, height, centre row) in a 64x64 scene
DEFAULT_SLOTS = (
    Slot("hat", 22, 10, 8),
    Slot("top", 30, 16, 24),
    Slot("bottom", 24, 16, 42),
    Slot("shoes", 30, 9, 57),
)


@dataclass
class SlotLayout:
    slots: tuple[Slot, ...] = DEFAULT_SLOTS
    size: int = IMAGE_SIZE
    jitter_x: int = 4
    jitter_y: int = 2
    # simple images sit at the category's slot row (centred horizontally);
    # True moves them to the canvas centre instead
    centre_simple: bool = False

    @property
    def num_categories(self) -> int:
        return len(self.slots)


@dataclass(frozen=True)
class Appearance:
    hue: int
    pattern: int
    scale: int

    @property
    def code(self) -> int:
        return (self.hue * N_PATTERNS + self.pattern) * N_SCALES + self.scale

    @classmethod
    def from_code(cls, code: int) -> "Appearance":
        rest, scale = divmod(code, N_SCALES)
        hue, pattern = divmod(rest, N_PATTERNS)
        return cls(hue, pattern, scale)


APPEARANCES_PER_CATEGORY = N_HUES * N_PATTERNS * N_SCALES


@dataclass
class SyntheticProduct:
    product_id: str
    category: int
    appearance: Appearance
    simple: np.ndarray
    complex: list[np.ndarray] = field(default_factory=list)

    @property
    def hue(self) -> int:
        return self.appearance.hue

    @property
    def pattern(self) -> int:
        return self.appearance.pattern

    @property
    def scale(self) -> int:
        return self.appearance.scale


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------


def hue_rgb(hue: int) -> tuple[int, int, int]:
    """Integer HSV -> RGB at 30 degree steps, fixed saturation and value."""
    v, s = 220, 200
    sector, half = divmod(hue % N_HUES, 2)
    f = 128 * half
    p = v * (255 - s) // 255
    q = v * (255 * 256 - s * f) // (255 * 256)
    t = v * (255 * 256 - s * (256 - f)) // (255 * 256)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][sector]


def silhouette(category: int, slot: Slot) -> np.ndarray:
    """Boolean mask of the category's item shape, ``height x width``."""
    h, w = slot.height, slot.width
    yy, xx = np.mgrid[0:h, 0:w]
    kind = category % 4
    if kind == 0:
        # dome with a brim along the bottom two rows
        ry = h - 2
        dome = (2 * xx - (w - 1)) ** 2 * ry**2 + (yy - ry) ** 2 * w**2 <= w**2 * ry**2
        return (dome & (yy < h - 2)) | (yy >= h - 2)
    if kind == 1:
        # torso with sleeves on the upper third
        body = (xx >= w // 4) & (xx < w - w // 4)
        sleeves = yy < h // 3
        return body | sleeves
    if kind == 2:
        # waistband plus two legs
        band = yy < h // 4
        gap = (xx >= w // 2 - 1) & (xx <= w // 2)
        return band | ~gap
    # pair of shoes
    gap = (xx >= w // 2 - 2) & (xx <= w // 2 + 1)
    toe = (yy < h // 3) & ((xx < 3) | (xx >= w - 3))
    return ~gap & ~toe


def render_item(category: int, appearance: Appearance, slot: Slot) -> tuple[np.ndarray, np.ndarray]:
    """Item pixels (``h x w x 3`` uint8) and its mask."""
    mask = silhouette(category, slot)
    h, w = mask.shape
    base = np.array(hue_rgb(appearance.hue), dtype=np.int32)
    alt = base // 3
    period = SCALES[appearance.scale]
    yy, xx = np.mgrid[0:h, 0:w]
    if appearance.pattern == 0:
        # a solid has no period, so its scale slot picks a shade instead
        # (full, 3/4, 1/2 value) and every catalogue entry stays distinct
        shade = base * (SOLID_SHADES - appearance.scale) // SOLID_SHADES
        return np.broadcast_to(shade.astype(np.uint8), (h, w, 3)).copy(), mask
    elif appearance.pattern == 1:
        on = (yy // period) % 2 == 0
    elif appearance.pattern == 2:
        on = (xx // period) % 2 == 0
    else:
        on = ((yy // period) + (xx // period)) % 2 == 0
    pixels = np.where(on[..., None], base, alt).astype(np.uint8)
    return pixels, mask


def paste(canvas: np.ndarray, pixels: np.ndarray, mask: np.ndarray, top: int, left: int) -> None:
    h, w = mask.shape
    region = canvas[top:top + h, left:left + w]
    region[mask] = pixels[mask]


def item_box(slot: Slot, size: int = IMAGE_SIZE, centred: bool = True, dx: int = 0, dy: int = 0):
    """``(top, left, bottom, right)`` of an item, bottom/right exclusive."""
    cy = size // 2 if centred else slot.center_y
    top = cy - slot.height // 2 + dy
    left = size // 2 - slot.width // 2 + dx
    return top, left, top + slot.height, left + slot.width


def render_simple(category: int, appearance: Appearance, layout: SlotLayout) -> np.ndarray:
    slot = layout.slots[category]
    canvas = np.full((layout.size, layout.size, 3), WHITE, dtype=np.uint8)
    pixels, mask = render_item(category, appearance, slot)
    top, left, _, _ = item_box(slot, layout.size, centred=layout.centre_simple)
    paste(canvas, pixels, mask, top, left)
    return canvas


def render_scene(items: list[tuple[int, Appearance]], rng: np.random.Generator, layout: SlotLayout) -> np.ndarray:
    canvas = np.full((layout.size, layout.size, 3), WHITE, dtype=np.uint8)
    for category, appearance in sorted(items, key=lambda it: it[0]):
        slot = layout.slots[category]
        dx = int(rng.integers(-layout.jitter_x, layout.jitter_x + 1))
        dy = int(rng.integers(-layout.jitter_y, layout.jitter_y + 1))
        pixels, mask = render_item(category, appearance, slot)
        top, left, _, _ = item_box(slot, layout.size, centred=False, dx=dx, dy=dy)
        top = min(max(top, 0), layout.size - slot.height)
        left = min(max(left, 0), layout.size - slot.width)
        paste(canvas, pixels, mask, top, left)
    return canvas


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------------------
# products and datasets
# ---------------------------------------------------------------------------


def gen_product(
    rng: np.random.Generator,
    category: int,
    slot_layout: SlotLayout | None = None,
    product_id: str = "p0",
    appearance: Appearance | None = None,
) -> SyntheticProduct:
    layout = slot_layout or SlotLayout()
    if not 0 <= category < layout.num_categories:
        raise ConfigError(f"category {category} outside layout of {layout.num_categories}")
    if appearance is None:
        appearance = Appearance.from_code(int(rng.integers(APPEARANCES_PER_CATEGORY)))
    return SyntheticProduct(product_id, category, appearance, render_simple(category, appearance, layout))


@dataclass
class GeneratedDataset:
    out_dir: Path
    manifest_path: Path
    captions_path: Path | None
    counts: dict[str, int]
    checksum: str


class _AppearancePool:
    """Per-category appearance codes handed out without replacement.

    A ``cycle`` pool reshuffles the full catalogue of a category once it is
    used up, so looks repeat only after every look has been drawn.
    """

    def __init__(self, rng: np.random.Generator, num_categories: int, cycle: bool = False):
        self.rng = rng
        self.cycle = cycle
        self.free = [list(rng.permutation(APPEARANCES_PER_CATEGORY)) for _ in range(num_categories)]

    def take(self, category: int) -> Appearance:
        if not self.free[category] and self.cycle:
            self.free[category] = list(self.rng.permutation(APPEARANCES_PER_CATEGORY))
        if not self.free[category]:
            raise ConfigError(
                f"appearance space of category {category} exhausted "
                f"({APPEARANCES_PER_CATEGORY} items per category)"
            )
        return Appearance.from_code(int(self.free[category].pop()))


def _balanced_categories(rng: np.random.Generator, n: int, num_categories: int) -> list[int]:
    reps = -(-n // num_categories)
    cats = np.tile(np.arange(num_categories), reps)[:n]
    return [int(c) for c in rng.permutation(cats)]


def gen_dataset(
    n_products: int,
    n_distractors: int,
    categories_per_scene: int,
    seed: int,
    out_dir,
    *,
    n_train_products: int | None = None,
    n_val_products: int | None = None,
    n_val_distractors: int | None = None,
    slot_layout: SlotLayout | None = None,
    captions_per_image: int = 2,
    train_scenes_per_product: int = 4,
    disjoint_train_looks: bool = False,
    force: bool = False,
) -> GeneratedDataset:
    """Write a manifest, PPM images and a caption-vector file to ``out_dir``.

    The ``test`` split holds ``n_products`` targets and ``n_distractors``
    distractors with pairwise-distinct appearances.  ``train`` (default
    ``4 * n_products``) and ``val`` (default ``max(k, n_products // 4)``,
    with ``n_distractors // 4`` distractors) are separate products.  Val
    looks are disjoint from the test targets'; train looks come from the
    whole catalogue, cycling through it when ``n_train_products`` exceeds it
    (products and scenes are new, the look space is shared), unless
    ``disjoint_train_looks``.  Every training product appears in
    ``train_scenes_per_product`` scenes; evaluation products in one.
    """
    layout = slot_layout or SlotLayout()
    k = categories_per_scene
    if not 1 <= k <= layout.num_categories:
        raise ConfigError(f"categories_per_scene must be in [1, {layout.num_categories}]")
    if n_products < k:
        raise ConfigError(f"n_products ({n_products}) must be >= categories_per_scene ({k})")
    n_train = 4 * n_products if n_train_products is None else n_train_products
    n_val = max(k, n_products // 4) if n_val_products is None else n_val_products
    n_val_d = n_distractors // 4 if n_val_distractors is None else n_val_distractors

    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty; pass force=True to overwrite")
        shutil.rmtree(out)
    (out / "images").mkdir(parents=True, exist_ok=True)

    rng = make_rng(seed)
    C = layout.num_categories
    held = _AppearancePool(rng, C)
    records: list[ManifestRecord] = []
    caption_ids: list[str] = []
    caption_vecs: list[np.ndarray] = []
    counts = {"simple": 0, "complex": 0, "distractor": 0, "scenes": 0}

    def emit_products(split: str, n: int, pool: _AppearancePool, extra: int = 0) -> list[SyntheticProduct]:
        if n == 0:
            return []
        if n < k:
            raise ConfigError(f"split {split!r} needs at least {k} products, got {n}")
        n_scenes = -(-n // k)
        products: list[SyntheticProduct] = []
        scene_members: list[list[SyntheticProduct]] = []
        for s in range(n_scenes):
            cats = sorted(int(c) for c in rng.choice(C, size=k, replace=False))
            members = []
            for c in cats:
                if len(products) >= n:
                    break
                pid = f"{split}-p{len(products):05d}"
                prod = gen_product(rng, c, layout, pid, pool.take(c))
                products.append(prod)
                members.append(prod)
            scene_members.append(members)
        # an incomplete final scene borrows items from earlier products
        last = scene_members[-1]
        present = {p.category for p in last}
        for c in range(C):
            if len(last) >= k:
                break
            if c in present:
                continue
            donor = next((p for p in products if p.category == c and p not in last), None)
            if donor is not None:
                last.append(donor)
                present.add(c)
        # extra scenes pair each product with fresh confounders
        by_cat = {c: [p for p in products if p.category == c] for c in range(C)}
        for _ in range(extra):
            for prod in products:
                others = [c for c in range(C) if c != prod.category and by_cat[c]]
                picks = rng.choice(len(others), size=min(k - 1, len(others)), replace=False)
                members = [prod] + [
                    by_cat[others[i]][int(rng.integers(len(by_cat[others[i]])))] for i in picks
                ]
                scene_members.append(members)
        for prod in products:
            name = f"{split}-s-{prod.product_id.split('-p')[-1]}"
            rel = f"images/{name}.ppm"
            write_ppm(out / rel, prod.simple)
            records.append(ManifestRecord(name, rel, "simple", prod.product_id, prod.category, split))
            counts["simple"] += 1
        for j, members in enumerate(scene_members):
            scene = render_scene([(p.category, p.appearance) for p in members], rng, layout)
            rel = f"images/{split}-scene-{j:05d}.ppm"
            write_ppm(out / rel, scene)
            counts["scenes"] += 1
            for prod in sorted(members, key=lambda p: p.category):
                prod.complex.append(scene)
                image_id = f"{split}-c-{j:05d}-{prod.product_id.split('-p')[-1]}"
                records.append(ManifestRecord(image_id, rel, "complex", prod.product_id, prod.category, split))
                counts["complex"] += 1
                for _ in range(captions_per_image):
                    vec = np.zeros(C, dtype=np.float32)
                    vec[prod.category] = 1.0
                    vec += rng.normal(0.0, 0.05, size=C).astype(np.float32)
                    caption_ids.append(image_id)
                    caption_vecs.append(vec)
        return products

    def emit_distractors(split: str, n: int, pool: _AppearancePool) -> None:
        for i, c in enumerate(_balanced_categories(rng, n, C)):
            name = f"{split}-d-{i:06d}"
            rel = f"images/{name}.ppm"
            write_ppm(out / rel, render_simple(c, pool.take(c), layout))
            records.append(ManifestRecord(name, rel, "distractor", None, c, split))
            counts["distractor"] += 1

    test_products = emit_products("test", n_products, held)
    emit_distractors("test", n_distractors, held)
    # val never reuses a test target's look; train draws from the whole
    # catalogue unless disjoint_train_looks is set
    val_pool = _AppearancePool(rng, C)
    for prod in test_products:
        val_pool.free[prod.category].remove(prod.appearance.code)
    val_products = emit_products("val", n_val, val_pool)
    emit_distractors("val", n_val_d, val_pool)
    train_pool = _AppearancePool(rng, C, cycle=not disjoint_train_looks)
    if disjoint_train_looks:
        for prod in test_products + val_products:
            train_pool.free[prod.category].remove(prod.appearance.code)
    emit_products("train", n_train, train_pool, extra=train_scenes_per_product - 1)

    manifest_path = out / "manifest.jsonl"
    write_manifest(manifest_path, records)
    captions_path = None
    if caption_ids:
        captions_path = out / "captions.cvf"
        write_condition_vectors(captions_path, caption_ids, np.stack(caption_vecs))
    checksum = hashlib.sha256(manifest_path.read_bytes()).hexdigest()
    return GeneratedDataset(out, manifest_path, captions_path, counts, checksum)
