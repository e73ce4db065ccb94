"""Compact pre-norm ViT encoder whose [CLS] state is the re-id embedding.

Token sequence: [CLS] ++ projected patches, plus a learned positional table,
plus the KPE/CKPE table for the configured mode, then ``depth`` pre-norm
blocks (multi-head self-attention, GELU MLP) and a final layer norm.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .embedding import PatchGrid, build_categorical_mask, build_mask, ckpe_embedding, kpe_embedding
from .errors import ContractError, DimensionError, ValidationError
from .featureio import FeatureMap, ImageRecord, KeypointSet

MODES = ("none", "kpe", "ckpe")


@dataclass
class ViTConfig:
    patch_size: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    image_height: int = 32
    image_width: int = 32
    in_channels: int = 8
    n_categories: int = 3
    n_classes: int = 8
    mode: str = "ckpe"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValidationError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "ckpe" and self.n_categories < 1:
            raise ValidationError("mode=ckpe needs at least one keypoint category")
        self.grid  # validates divisibility

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.patch_size, self.image_width, self.image_height)

    @property
    def n_patches(self) -> int:
        return self.grid.n_patches

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ViTConfig":
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ValidationError(f"unknown ViT config keys: {sorted(extra)}")
        return cls(**obj)


def param_shapes(cfg: ViTConfig) -> dict[str, tuple]:
    d, k1 = cfg.dim, cfg.n_patches + 1
    hidden = cfg.dim * cfg.mlp_ratio
    shapes = {
        "patch.w": (cfg.patch_dim, d),
        "patch.b": (d,),
        "cls": (d,),
        "pos": (k1, d),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.qkv.w": (d, 3 * d), p + "attn.qkv.b": (3 * d,),
            p + "attn.proj.w": (d, d), p + "attn.proj.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.fc1.w": (d, hidden), p + "mlp.fc1.b": (hidden,),
            p + "mlp.fc2.w": (hidden, d), p + "mlp.fc2.b": (d,),
        })
    shapes.update({"norm.g": (d,), "norm.b": (d,)})
    if cfg.mode == "kpe":
        shapes["kpe.w"] = (k1, d)
    elif cfg.mode == "ckpe":
        shapes["ckpe.w"] = (cfg.n_categories, d)
    shapes["arcface.w"] = (cfg.n_classes, d)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


class ModelParams:
    """Named learnable tensors for one :class:`ViTConfig`."""

    def __init__(self, config: ViTConfig, tensors: dict[str, T.Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ViTConfig, seed: int = 0, dtype=np.float32) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if name in ("kpe.w", "ckpe.w") or leaf == "b":
                arr = np.zeros(shape)
            elif leaf == "g":
                arr = np.ones(shape)
            else:
                arr = _trunc_normal(rng, shape, 0.02)
            tensors[name] = T.Tensor(arr, requires_grad=True, dtype=dtype, name=name)
        return cls(config, tensors)

    @classmethod
    def from_arrays(cls, config: ViTConfig, arrays: dict[str, np.ndarray], dtype=np.float32) -> "ModelParams":
        from .featureio import check_compatible

        shapes = param_shapes(config)
        check_compatible(arrays, shapes)
        return cls(config, {n: T.Tensor(arrays[n], requires_grad=True, dtype=dtype, name=n) for n in shapes})

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {
            n: T.Tensor(t.data, requires_grad=True, dtype=dtype, name=n) for n, t in self.tensors.items()
        })

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)


def save_config(path, cfg: ViTConfig) -> None:
    from .featureio import atomic_write_json

    atomic_write_json(path, cfg.to_json())


def load_config(path) -> ViTConfig:
    with open(path, encoding="utf-8") as fh:
        return ViTConfig.from_json(json.load(fh))


# ---------------------------------------------------------------- inputs

def upsample_to_pixels(fmap: FeatureMap, image_width: int, image_height: int) -> np.ndarray:
    """Nearest-cell resampling: pixel (x, y) takes the value of the cell covering it."""
    ys = (np.arange(image_height) * fmap.height) // image_height
    xs = (np.arange(image_width) * fmap.width) // image_width
    return fmap.values[:, ys][:, :, xs]


def patchify(x: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a (C, H, W) or (H, W) grid into row-major patches, each flattened as [C][P][P]."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"input {h}x{w} is not divisible into {p}x{p} patches")
    return x.reshape(c, h // p, p, w // p, p).transpose(1, 3, 0, 2, 4).reshape((h // p) * (w // p), c * p * p)


def unpatchify(patches: np.ndarray, channels: int, height: int, width: int, patch_size: int) -> np.ndarray:
    p = patch_size
    return (np.asarray(patches).reshape(height // p, width // p, channels, p, p)
            .transpose(2, 0, 3, 1, 4).reshape(channels, height, width))


def prepare_input(fmap: FeatureMap, rec: ImageRecord, cfg: ViTConfig) -> np.ndarray:
    if fmap.channels != cfg.in_channels:
        raise DimensionError(f"{rec.image_id}: {fmap.channels} channels, model expects {cfg.in_channels}")
    if (rec.image_width, rec.image_height) != (cfg.image_width, cfg.image_height):
        raise DimensionError(
            f"{rec.image_id}: image {rec.image_width}x{rec.image_height}, model expects "
            f"{cfg.image_width}x{cfg.image_height}"
        )
    return patchify(upsample_to_pixels(fmap, rec.image_width, rec.image_height), cfg.patch_size)


def keypoint_mask(kps: KeypointSet | None, cfg: ViTConfig) -> np.ndarray | None:
    """Mask matching ``cfg.mode``: None, a (K+1,) vector, or a (K+1, N_c) matrix."""
    if cfg.mode == "none":
        return None
    if kps is None:
        raise ContractError(f"mode={cfg.mode} needs keypoints")
    if cfg.mode == "kpe":
        return build_mask(kps, cfg.grid)
    return build_categorical_mask(kps, cfg.grid, cfg.n_categories)


# ---------------------------------------------------------------- forward

def _attention(x: T.Tensor, params: ModelParams, prefix: str, heads: int) -> T.Tensor:
    b, t, d = x.shape
    dh = d // heads
    qkv = T.matmul(x, params[prefix + "qkv.w"]) + params[prefix + "qkv.b"]
    qkv = T.transpose(T.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return T.matmul(ctx, params[prefix + "proj.w"]) + params[prefix + "proj.b"]


def _mlp(x: T.Tensor, params: ModelParams, prefix: str) -> T.Tensor:
    h = T.gelu(T.matmul(x, params[prefix + "fc1.w"]) + params[prefix + "fc1.b"])
    return T.matmul(h, params[prefix + "fc2.w"]) + params[prefix + "fc2.b"]


def embed_tokens(params: ModelParams, patches, masks=None) -> T.Tensor:
    """Token sequence entering the first block, shape (B, K+1, d)."""
    cfg = params.config
    patches = np.asarray(patches, dtype=params["patch.w"].dtype)
    if patches.ndim != 3 or patches.shape[1:] != (cfg.n_patches, cfg.patch_dim):
        raise DimensionError(
            f"expected a batch of shape (B, {cfg.n_patches}, {cfg.patch_dim}), got {patches.shape}"
        )
    b = patches.shape[0]
    if cfg.mode != "none" and masks is None:
        raise ContractError(f"mode={cfg.mode} needs keypoint masks")
    proj = T.matmul(T.Tensor._wrap(patches), params["patch.w"]) + params["patch.b"]
    cls = T.expand(T.reshape(params["cls"], (1, cfg.dim)), b)
    x = T.concat([cls, proj], axis=1) + T.expand(params["pos"], b)
    if cfg.mode == "kpe":
        x = x + kpe_embedding(masks, params["kpe.w"])
    elif cfg.mode == "ckpe":
        x = x + ckpe_embedding(masks, params["ckpe.w"])
    return x


def forward_batch(params: ModelParams, patches, masks=None) -> T.Tensor:
    """[CLS] embeddings for a homogeneous batch, shape (B, d)."""
    cfg = params.config
    try:
        patches = np.stack([np.asarray(p) for p in patches]) if not isinstance(patches, np.ndarray) else patches
        if masks is not None and not isinstance(masks, np.ndarray):
            masks = np.stack([np.asarray(m) for m in masks])
    except ValueError as exc:
        raise DimensionError(f"ragged batch: {exc}") from exc
    if masks is not None and masks.shape[0] != patches.shape[0]:
        raise DimensionError(f"batch has {patches.shape[0]} inputs but {masks.shape[0]} masks")
    x = embed_tokens(params, patches, masks)
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        x = x + _attention(T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps),
                           params, p + "attn.", cfg.heads)
        x = x + _mlp(T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps), params, p + "mlp.")
    x = T.layer_norm(x, params["norm.g"], params["norm.b"], cfg.ln_eps)
    return x[:, 0]


def forward(params: ModelParams, patches, mask=None) -> T.Tensor:
    """[CLS] embedding ``z`` of one example, shape (d,)."""
    if params.config.mode != "none" and mask is None:
        raise ContractError(f"mode={params.config.mode} needs keypoints")
    z = forward_batch(params, np.asarray(patches)[None], None if mask is None else np.asarray(mask)[None])
    return z[0]
