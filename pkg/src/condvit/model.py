"""CondViT: a Vision Transformer with a concatenated conditioning token.

The query side is ``phi(x, c)``: patch tokens plus a ``[CLS]`` token, and at
block ``insertion_depth`` one extra token carrying the condition (a learned
category row or a projected external vector) with its own learnable
positional embedding.  The gallery side is ``phi(x)``: the same network with
no extra token, so gallery embeddings depend on no condition parameter.
Only the final ``[CLS]`` state is projected into the metric space.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from condvit import autodiff as ad
from condvit.autodiff import DimensionError, Tensor
from condvit.errors import CheckpointError, ConfigError

CHECKPOINT_MAGIC = b"CONDVIT\x00"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    output_dim: int = 64
    insertion_depth: int = 0
    num_categories: int = 4
    external_cond_dim: int = 0
    empty_token_mode: bool = False
    mlp_ratio: int = 4
    channels: int = 3
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0 <= self.insertion_depth <= self.depth:
            raise ConfigError(
                f"insertion_depth {self.insertion_depth} outside [0, {self.depth}]"
            )
        if self.num_categories < 0 or self.external_cond_dim < 0:
            raise ConfigError("num_categories and external_cond_dim must be non-negative")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def projects_external(self) -> bool:
        return self.external_cond_dim > 0 and self.external_cond_dim != self.embed_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


PRESETS = {
    "tiny": dict(image_size=64, patch_size=8, embed_dim=64, depth=4, heads=4, output_dim=64),
    "b32": dict(
        image_size=224, patch_size=32, embed_dim=768, depth=12, heads=12, output_dim=512,
        num_categories=10,
    ),
    "b16": dict(
        image_size=224, patch_size=16, embed_dim=768, depth=12, heads=12, output_dim=512,
        num_categories=10,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Categorical:
    id: int


@dataclass(frozen=True)
class ExternalVector:
    values: np.ndarray = field(compare=False)


Condition = Union[Categorical, ExternalVector, None]


# ---------------------------------------------------------------------------
# pixels and patches
# ---------------------------------------------------------------------------


def normalize_pixels(image: np.ndarray) -> np.ndarray:
    """uint8 (or [0, 255] float) pixels -> float32 in [-1, 1]."""
    x = np.asarray(image, dtype=np.float32) / 255.0
    return (x - 0.5) / 0.5


def patchify(image: np.ndarray, patch_size: int, image_size: int | None = None) -> np.ndarray:
    """Split ``H x W x C`` (or a batch ``B x H x W x C``) into flattened patches.

    Patches come out in row-major order, each flattened channel-last
    (row, column, channel).
    """
    img = np.asarray(image)
    batched = img.ndim == 4
    if not batched:
        img = img[None]
    if img.ndim != 4:
        raise DimensionError(f"patchify: expected H x W x C image, got shape {np.shape(image)}")
    b, h, w, c = img.shape
    if h != w or (image_size is not None and h != image_size):
        raise DimensionError(
            f"patchify: image is {h}x{w}, expected square {image_size or h}x{image_size or h}"
        )
    if c != 3:
        raise DimensionError(f"patchify: expected 3 channels, got {c}")
    if h % patch_size:
        raise DimensionError(f"patchify: {h} not divisible by patch size {patch_size}")
    g = h // patch_size
    out = img.reshape(b, g, patch_size, g, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(b, g * g, patch_size * patch_size * c)
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter; a pure function of the config."""
    d = cfg.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (1 + cfg.num_patches, d),
        "cond_pos": (d,),
    }
    if cfg.num_categories:
        shapes["cond_table"] = (cfg.num_categories, d)
    if cfg.projects_external:
        shapes["cond_proj.weight"] = (cfg.external_cond_dim, d)
        shapes["cond_proj.bias"] = (d,)
    if cfg.empty_token_mode:
        shapes["empty_token"] = (d,)
    hidden = d * cfg.mlp_ratio
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "attn.qkv.weight"] = (d, 3 * d)
        # query and value biases only: softmax ignores a key bias, whose
        # gradient is identically zero
        shapes[p + "attn.qv.bias"] = (2 * d,)
        shapes[p + "attn.out.weight"] = (d, d)
        shapes[p + "attn.out.bias"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (d, hidden)
        shapes[p + "mlp.fc1.bias"] = (hidden,)
        shapes[p + "mlp.fc2.weight"] = (hidden, d)
        shapes[p + "mlp.fc2.bias"] = (d,)
    shapes["ln_final.gamma"] = (d,)
    shapes["ln_final.beta"] = (d,)
    shapes["proj.weight"] = (d, cfg.output_dim)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in parameter_shapes(cfg).values())


# Parameters trained during the warm-up phase: the final projection and the
# input embeddings that do not exist in a plain ViT.
CONDITION_PARAMS = ("cond_table", "cond_proj.weight", "cond_proj.bias", "cond_pos", "empty_token")
WARMUP_PARAMS = ("proj.weight",) + CONDITION_PARAMS


def _is_norm_or_bias(name: str) -> bool:
    return name.endswith((".bias", ".gamma", ".beta"))


class CondViT:
    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        config.validate()
        self.config = config
        self.metadata: dict = {}
        self.params: dict[str, Tensor] = {}
        shapes = parameter_shapes(config)
        dtype = ad.get_default_dtype()
        if params is None:
            rng = np.random.default_rng(seed)
            for name, shape in shapes.items():
                if name.endswith(".gamma"):
                    value = np.ones(shape)
                elif _is_norm_or_bias(name):
                    value = np.zeros(shape)
                else:
                    value = _trunc_normal(rng, shape, config.init_std)
                self.params[name] = ad.parameter(value.astype(dtype), name=name)
        else:
            missing = set(shapes) - set(params)
            extra = set(params) - set(shapes)
            if missing or extra:
                raise CheckpointError(
                    f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
                )
            for name, shape in shapes.items():
                value = np.asarray(params[name])
                if value.shape != shape:
                    raise CheckpointError(f"{name}: shape {value.shape}, expected {shape}")
                self.params[name] = ad.parameter(value.astype(dtype, copy=True), name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> Iterable[tuple[str, Tensor]]:
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=self.params[k].dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- conditioning --------------------------------------------------------
    def condition_token(self, conds: Condition | Sequence[Condition]) -> Tensor:
        """Token content (before its positional embedding) for each condition.

        A single condition yields shape ``(embed_dim,)``; a sequence of
        conditions of one kind yields ``(len, embed_dim)``.
        """
        single = conds is None or isinstance(conds, (Categorical, ExternalVector))
        items = [conds] if single else list(conds)
        if not items or any(c is None for c in items):
            raise ValueError("condition_token needs a condition; use encode(..., None) for gallery")
        cfg = self.config
        if all(isinstance(c, Categorical) for c in items):
            if not cfg.num_categories:
                raise IndexError("model has no categorical table")
            ids = [int(c.id) for c in items]
            tok = ad.take_rows(self.params["cond_table"], ids)
        elif all(isinstance(c, ExternalVector) for c in items):
            if not cfg.external_cond_dim:
                raise DimensionError("model was built without external conditioning")
            vecs = np.stack([np.asarray(c.values, dtype=np.float64).reshape(-1) for c in items])
            if vecs.shape[1] != cfg.external_cond_dim:
                raise DimensionError(
                    f"condition vector has length {vecs.shape[1]}, model expects {cfg.external_cond_dim}"
                )
            tok = ad.tensor(vecs.astype(ad.get_default_dtype()))
            if cfg.projects_external:
                tok = tok @ self.params["cond_proj.weight"] + self.params["cond_proj.bias"]
        else:
            raise TypeError("a batch must use a single condition kind")
        return tok[0] if single else tok

    def _extra_token(self, conds, batch: int) -> Tensor | None:
        d = self.config.embed_dim
        if conds is None:
            if not self.config.empty_token_mode:
                return None
            tok = ad.expand(self.params["empty_token"], (batch, d))
        else:
            if isinstance(conds, (Categorical, ExternalVector)):
                conds = [conds] * batch
            conds = list(conds)
            if len(conds) != batch:
                raise DimensionError(f"{len(conds)} conditions for a batch of {batch} images")
            if all(c is None for c in conds):
                return self._extra_token(None, batch)
            tok = self.condition_token(conds)
        return (tok + self.params["cond_pos"]).reshape(batch, 1, d)

    # -- forward ---------------------------------------------------------------
    def _block(self, x: Tensor, i: int) -> Tensor:
        cfg = self.config
        P = self.params
        p = f"blocks.{i}."
        b, t, d = x.shape
        h = cfg.heads
        hd = d // h

        y = ad.layer_norm(x, P[p + "ln1.gamma"], P[p + "ln1.beta"], cfg.ln_eps)
        qv = P[p + "attn.qv.bias"]
        bias = ad.concat([ad.slice_(qv, slice(0, d)), ad.tensor(np.zeros(d, qv.dtype)), ad.slice_(qv, slice(d, None))])
        qkv = y @ P[p + "attn.qkv.weight"] + bias
        qkv = qkv.reshape(b, t, 3, h, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(hd))
        att = ad.softmax(att, axis=-1)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        x = x + (y @ P[p + "attn.out.weight"] + P[p + "attn.out.bias"])

        y = ad.layer_norm(x, P[p + "ln2.gamma"], P[p + "ln2.beta"], cfg.ln_eps)
        y = ad.gelu(y @ P[p + "mlp.fc1.weight"] + P[p + "mlp.fc1.bias"])
        return x + (y @ P[p + "mlp.fc2.weight"] + P[p + "mlp.fc2.bias"])

    def tokens(self, images: np.ndarray, conds=None, upto: int | None = None) -> Tensor:
        """Run the trunk and return the full token sequence ``(B, T, D)``.

        ``upto`` stops after that many blocks; the condition token enters in
        front of block ``insertion_depth``, so a shorter run does not carry it.
        """
        cfg = self.config
        P = self.params
        imgs = np.asarray(images)
        if imgs.ndim == 3:
            imgs = imgs[None]
        patches = patchify(imgs, cfg.patch_size, cfg.image_size).astype(ad.get_default_dtype())
        b = patches.shape[0]
        d = cfg.embed_dim
        x = ad.tensor(patches) @ P["patch_embed.weight"] + P["patch_embed.bias"]
        cls = ad.expand(P["cls_token"], (b, 1, d))
        x = ad.concat([cls, x], axis=1) + P["pos_embed"]
        extra = self._extra_token(conds, b)
        depth = cfg.depth if upto is None else upto
        for i in range(depth):
            if extra is not None and i == cfg.insertion_depth:
                x = ad.concat([x, extra], axis=1)
            x = self._block(x, i)
        if extra is not None and cfg.insertion_depth == depth == cfg.depth:
            x = ad.concat([x, extra], axis=1)
        return x

    def encode_batch(self, images: np.ndarray, conds=None) -> Tensor:
        """Embeddings ``(B, output_dim)`` with unit L2 norm.

        ``conds`` is None (gallery mode), one condition applied to every
        image, or a sequence with one condition per image.
        """
        P = self.params
        x = self.tokens(images, conds)
        cls = x[:, 0, :]
        cls = ad.layer_norm(cls, P["ln_final.gamma"], P["ln_final.beta"], self.config.ln_eps)
        return ad.l2_normalize(cls @ P["proj.weight"], axis=-1)

    __call__ = encode_batch

    def embed(self, images: np.ndarray, conds=None, batch_size: int = 64) -> np.ndarray:
        """Inference-only batched encoding to a numpy array."""
        imgs = np.asarray(images)
        if imgs.ndim == 3:
            imgs = imgs[None]
        single = conds is None or isinstance(conds, (Categorical, ExternalVector))
        out = []
        with ad.no_grad():
            for start in range(0, len(imgs), batch_size):
                stop = start + batch_size
                chunk_conds = conds if single else list(conds)[start:stop]
                out.append(self.encode_batch(imgs[start:stop], chunk_conds).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.output_dim))


def encode(model: CondViT, image: np.ndarray, c: Condition = None) -> np.ndarray:
    """Embed one preprocessed image; returns a unit-norm vector."""
    return model.embed(np.asarray(image)[None], c)[0]


def condition_token(model: CondViT, c: Condition) -> np.ndarray:
    with ad.no_grad():
        return model.condition_token(c).data.copy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: CondViT, path, extra: dict | None = None) -> None:
    """Write ``model`` atomically; ``extra`` is stored as JSON metadata."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    header = json.dumps({"config": model.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    payload = buf.getvalue()
    payload += struct.pack("<I", zlib.crc32(payload))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a CondViT checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    if len(data) < r.pos + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated checkpoint)")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen).decode())
    config = ModelConfig.from_dict(header["config"])
    (count,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = math.prod(shape)
        params[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).copy()
    if r.pos != len(data) - 4:
        raise CheckpointError(f"{path}: {len(data) - 4 - r.pos} trailing bytes after parameters")
    return config, params, header.get("extra", {})


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> CondViT:
    config, params, extra = read_checkpoint(path)
    if expected_config is not None and expected_config != config:
        raise CheckpointError(
            f"{path}: checkpoint config {config.to_dict()} does not match expected {expected_config.to_dict()}"
        )
    model = CondViT(config, params=params)
    model.metadata = extra
    return model
