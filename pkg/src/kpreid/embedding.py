"""Keypoint masks over ViT tokens and the additive KPE / CKPE embeddings.

Token 0 is [CLS]; patch tokens are numbered 1..K in row-major grid order.
KPE gates row ``k`` of ``W_kp`` by the mask bit of token ``k`` (so unoccupied
tokens get nothing), and CKPE is the product ``CM @ W_ckp``. With a single
category and every ``W_kp`` row equal to that category's row the two coincide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import BoundsError, CategoryError, DimensionError
from .featureio import KeypointSet


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    image_width: int
    image_height: int

    def __post_init__(self):
        p = self.patch_size
        if p < 1 or self.image_width % p or self.image_height % p:
            raise DimensionError(
                f"image {self.image_width}x{self.image_height} is not divisible into {p}x{p} patches"
            )

    @property
    def rows(self) -> int:
        return self.image_height // self.patch_size

    @property
    def cols(self) -> int:
        return self.image_width // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols


def keypoint_to_token(x: int, y: int, grid: PatchGrid) -> int:
    if not (0 <= x < grid.image_width and 0 <= y < grid.image_height):
        raise BoundsError(f"keypoint ({x}, {y}) outside image {grid.image_width}x{grid.image_height}")
    return (y // grid.patch_size) * grid.cols + (x // grid.patch_size) + 1


def build_mask(kps: KeypointSet, grid: PatchGrid) -> np.ndarray:
    mask = np.zeros(grid.n_patches + 1)
    for kp in kps.keypoints:
        mask[keypoint_to_token(kp.x, kp.y, grid)] = 1.0
    return mask


def build_categorical_mask(kps: KeypointSet, grid: PatchGrid, n_categories: int) -> np.ndarray:
    cm = np.zeros((grid.n_patches + 1, n_categories))
    for kp in kps.keypoints:
        if not 0 <= kp.category < n_categories:
            raise CategoryError(f"category {kp.category} out of range for N_c={n_categories}")
        cm[keypoint_to_token(kp.x, kp.y, grid), kp.category] = 1.0
    return cm


def kpe_embedding(mask, w_kp: T.Tensor) -> T.Tensor:
    """Row-gated KPE table: ``out[..., k, :] = mask[..., k] * w_kp[k]``.

    ``mask`` is a (K+1,) vector or a (B, K+1) batch of them.
    """
    m = np.asarray(mask, dtype=w_kp.dtype)
    if m.shape[-1] != w_kp.shape[0] or m.ndim not in (1, 2):
        raise DimensionError(f"kpe_embedding: mask {m.shape} vs W_kp {w_kp.shape}")
    gate = m[..., None]
    out = gate * w_kp.data

    def bw(g):
        gw = g * gate
        return (gw if gw.ndim == 2 else gw.sum(axis=0),)

    return T.apply_op("kpe", out, (w_kp,), bw)


def ckpe_embedding(cmask, w_ckp: T.Tensor) -> T.Tensor:
    """``CM @ W_ckp`` for a (K+1, N_c) mask or a (B, K+1, N_c) batch."""
    cm = np.asarray(cmask, dtype=w_ckp.dtype)
    if cm.ndim not in (2, 3) or cm.shape[-1] != w_ckp.shape[0]:
        raise DimensionError(f"ckpe_embedding: mask {cm.shape} vs W_ckp {w_ckp.shape}")
    return T.matmul(T.Tensor._wrap(cm), w_ckp)
