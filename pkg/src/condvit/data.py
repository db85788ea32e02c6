"""Manifests, raster images and precomputed condition vectors.

Manifest: JSON Lines, one record per line::

    {"image_id": "s0001", "path": "images/s0001.ppm", "type": "simple",
     "product_id": "p0001", "category_id": 2, "split": "test"}

``type`` is one of simple, complex, partial_complex, distractor.  Paths are
relative to the manifest's directory.  ``split`` is optional (default
``"train"``).  A complex image holding several products appears once per
product, with distinct ``image_id`` values sharing one ``path``.

Condition-vector file (little-endian)::

    b"CVEC" | u32 version | u32 count | u32 dim | count*dim f32
    | count * (u16 len, utf-8 image id)

Rows sharing an image id form that image's ordered vector list; the first
row is the evaluation-time vector.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from condvit.errors import DecodeError, ManifestError, StoreError
from condvit.model import normalize_pixels

log = logging.getLogger(__name__)

RECORD_TYPES = ("simple", "complex", "partial_complex", "distractor")
CVEC_MAGIC = b"CVEC"
CVEC_VERSION = 1


# ---------------------------------------------------------------------------
# raster I/O
# ---------------------------------------------------------------------------


def _ppm_tokens(data: bytes, count: int, path) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DecodeError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    """Decode a binary (P6) 8-bit PPM into ``H x W x 3`` uint8."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P6":
        raise DecodeError(f"{path}: unsupported format (expected binary PPM 'P6')")
    tokens, offset = _ppm_tokens(data[2:], 3, path)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DecodeError(f"{path}: malformed PPM header") from None
    if maxval != 255 or width <= 0 or height <= 0:
        raise DecodeError(f"{path}: only 8-bit PPM with positive size is supported")
    raster = data[2 + offset:]
    need = width * height * 3
    if len(raster) < need:
        raise DecodeError(f"{path}: truncated PPM raster ({len(raster)} of {need} bytes)")
    return np.frombuffer(raster[:need], dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm expects H x W x 3, got {img.shape}")
    h, w, _ = img.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())
    os.replace(tmp, path)


def read_raster(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head[:2] == b"P6":
        return read_ppm(path)
    if head.startswith(b"\x89PNG") or head[:3] == b"\xff\xd8\xff":
        try:
            from PIL import Image
        except ImportError:  # pragma: no cover - Pillow is optional
            raise DecodeError(f"{path}: PNG/JPEG support needs Pillow") from None
        try:
            with Image.open(path) as im:
                return np.asarray(im.convert("RGB"), dtype=np.uint8)
        except OSError as exc:
            raise DecodeError(f"{path}: {exc}") from None
    raise DecodeError(f"{path}: unsupported image format")


def pad_to_square(image: np.ndarray, fill: int = 255) -> np.ndarray:
    """Pad symmetrically with ``fill`` so height == width."""
    h, w = image.shape[:2]
    side = max(h, w)
    out = np.full((side, side) + image.shape[2:], fill, dtype=image.dtype)
    top = (side - h) // 2
    left = (side - w) // 2
    out[top:top + h, left:left + w] = image
    return out


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Bilinear resize with half-pixel centres (no antialiasing); returns float32."""
    out_w = out_h if out_w is None else out_w
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(np.float32)

    y0, y1, wy = coords(h, out_h)
    x0, x1, wx = coords(w, out_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def load_image(path, target_size: int) -> np.ndarray:
    """Decode, pad to a white square, resize and normalise to ``[-1, 1]``."""
    img = read_raster(path)
    img = pad_to_square(img, 255)
    img = resize_bilinear(img, target_size)
    return normalize_pixels(img)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    image_id: str
    path: str
    type: str
    product_id: str | None = None
    category_id: int | None = None
    split: str = "train"
    line: int = 0

    def to_json(self) -> dict:
        out = {"image_id": self.image_id, "path": self.path, "type": self.type}
        if self.product_id is not None:
            out["product_id"] = self.product_id
        if self.category_id is not None:
            out["category_id"] = self.category_id
        out["split"] = self.split
        return out


@dataclass
class ProductGroup:
    product_id: str
    category_id: int | None = None
    simple: list[ManifestRecord] = field(default_factory=list)
    complex: list[ManifestRecord] = field(default_factory=list)
    partial_complex: list[ManifestRecord] = field(default_factory=list)
    split: str = "train"

    def queries(self, include_partial: bool = False) -> list[ManifestRecord]:
        return self.complex + (self.partial_complex if include_partial else [])


@dataclass
class Manifest:
    root: Path
    records: list[ManifestRecord]
    products: dict[str, ProductGroup]
    distractors: list[ManifestRecord]
    excluded: dict[str, str]
    warnings: list[str]

    def resolve(self, record: ManifestRecord) -> Path:
        return self.root / record.path

    def split(self, name: str) -> dict[str, ProductGroup]:
        return {k: g for k, g in self.products.items() if g.split == name}

    def split_distractors(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.distractors if r.split == name]

    @property
    def num_products(self) -> int:
        return len(self.products)


def _parse_record(obj, lineno: int) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise ManifestError("record is not a JSON object", lineno)
    unknown = set(obj) - {"image_id", "path", "type", "product_id", "category_id", "split"}
    if unknown:
        raise ManifestError(f"unknown fields {sorted(unknown)}", lineno)
    for key in ("image_id", "path", "type"):
        if not isinstance(obj.get(key), str) or not obj[key]:
            raise ManifestError(f"missing or non-string field {key!r}", lineno)
    if obj["type"] not in RECORD_TYPES:
        raise ManifestError(f"type {obj['type']!r} not in {RECORD_TYPES}", lineno)
    cat = obj.get("category_id")
    if cat is not None and (not isinstance(cat, int) or isinstance(cat, bool) or cat < 0):
        raise ManifestError(f"category_id must be a non-negative integer, got {cat!r}", lineno)
    pid = obj.get("product_id")
    if pid is not None and not isinstance(pid, str):
        raise ManifestError("product_id must be a string", lineno)
    return ManifestRecord(
        image_id=obj["image_id"],
        path=obj["path"],
        type=obj["type"],
        product_id=pid,
        category_id=cat,
        split=obj.get("split", "train"),
        line=lineno,
    )


def load_manifest(path) -> Manifest:
    """Parse and validate a manifest, grouping records by product id.

    Record-level violations raise :class:`ManifestError` listing every
    offending line.  Products without both a simple and a complex image are
    excluded and reported in ``Manifest.excluded`` and ``Manifest.warnings``.
    """
    path = Path(path)
    records: list[ManifestRecord] = []
    problems: list[str] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON ({exc.msg})", lineno) from None
            rec = _parse_record(obj, lineno)
            if rec.image_id in seen:
                problems.append(
                    f"line {lineno}: duplicate image_id {rec.image_id!r} (first at line {seen[rec.image_id]})"
                )
                continue
            seen[rec.image_id] = lineno
            if rec.type != "distractor" and rec.product_id is None:
                problems.append(f"line {lineno}: {rec.type} record {rec.image_id!r} has no product_id")
            if rec.type in ("simple", "distractor") and rec.category_id is None:
                problems.append(f"line {lineno}: {rec.type} record {rec.image_id!r} has no category_id")
            records.append(rec)
    if problems:
        raise ManifestError("manifest validation failed:\n  " + "\n  ".join(problems))

    groups: dict[str, ProductGroup] = {}
    distractors: list[ManifestRecord] = []
    for rec in records:
        if rec.type == "distractor":
            distractors.append(rec)
            continue
        group = groups.setdefault(rec.product_id, ProductGroup(rec.product_id, split=rec.split))
        getattr(group, rec.type).append(rec)
        if rec.type == "simple" and group.category_id is None:
            group.category_id = rec.category_id
            group.split = rec.split

    warnings: list[str] = []
    excluded: dict[str, str] = {}
    products: dict[str, ProductGroup] = {}
    for pid in sorted(groups):
        g = groups[pid]
        missing = [kind for kind in ("simple", "complex") if not getattr(g, kind)]
        if missing:
            reason = f"product {pid!r} has no {' or '.join(missing)} image"
            excluded[pid] = reason
            warnings.append(f"excluded: {reason}")
            log.warning("excluded: %s", reason)
            continue
        products[pid] = g
    return Manifest(path.parent, records, products, distractors, excluded, warnings)


def write_manifest(path, records) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# condition vectors
# ---------------------------------------------------------------------------


def write_condition_vectors(path, ids: list[str], vectors: np.ndarray) -> None:
    vecs = np.asarray(vectors, dtype="<f4")
    if vecs.ndim != 2 or len(ids) != vecs.shape[0]:
        raise ValueError(f"{len(ids)} ids for vectors of shape {vecs.shape}")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CVEC_MAGIC)
        fh.write(struct.pack("<III", CVEC_VERSION, vecs.shape[0], vecs.shape[1]))
        fh.write(vecs.tobytes())
        for image_id in ids:
            raw = image_id.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
    os.replace(tmp, path)


class ConditionVectors:
    """Id-indexed table of external condition vectors."""

    def __init__(self, ids: list[str], vectors: np.ndarray):
        self.ids = list(ids)
        self.vectors = vectors
        self._rows: dict[str, list[int]] = defaultdict(list)
        for row, image_id in enumerate(self.ids):
            self._rows[image_id].append(row)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self._rows)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._rows

    def get(self, image_id: str) -> list[np.ndarray]:
        return [self.vectors[r] for r in self._rows.get(image_id, [])]

    def first(self, image_id: str) -> np.ndarray:
        rows = self._rows.get(image_id)
        if not rows:
            raise KeyError(f"no condition vector for image {image_id!r}")
        return self.vectors[rows[0]]


def load_condition_vectors(path) -> ConditionVectors:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CVEC_MAGIC:
        raise StoreError(f"{path}: not a condition-vector file (bad magic)")
    if len(data) < 16:
        raise StoreError(f"{path}: truncated header")
    version, count, dim = struct.unpack("<III", data[4:16])
    if version != CVEC_VERSION:
        raise StoreError(f"{path}: version {version}, this build reads version {CVEC_VERSION}")
    pos = 16
    nbytes = count * dim * 4
    if len(data) < pos + nbytes:
        raise StoreError(f"{path}: payload holds {len(data) - pos} bytes, header promises {nbytes}")
    vectors = np.frombuffer(data[pos:pos + nbytes], dtype="<f4").reshape(count, dim).copy()
    pos += nbytes
    ids = []
    for _ in range(count):
        if len(data) < pos + 2:
            raise StoreError(f"{path}: truncated id table")
        (n,) = struct.unpack("<H", data[pos:pos + 2])
        pos += 2
        if len(data) < pos + n:
            raise StoreError(f"{path}: truncated id table")
        ids.append(data[pos:pos + n].decode())
        pos += n
    if pos != len(data):
        raise StoreError(f"{path}: {len(data) - pos} trailing bytes")
    return ConditionVectors(ids, vectors)
