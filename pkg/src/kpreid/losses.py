"""Re-identification and classification losses.

``L = L_reid + lambda * L_ce``. ``L_reid`` is ArcFace, batch-hard triplet, or
their sum; ``L_ce`` is plain cross-entropy on scaled cosine logits against the
same class-weight matrix that ArcFace uses. Losses are evaluated in float64
whatever the embedding precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import LabelError, NumericError, TripletMiningError, ValidationError

REID_KINDS = ("arcface", "triplet", "arcface+triplet")


@dataclass
class LossConfig:
    lam: float = 0.2
    arcface_s: float = 16.0
    arcface_m: float = 0.3
    triplet_margin: float = 0.3
    reid_kind: str = "arcface"

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.arcface_s <= 0:
            raise ValidationError("arcface scale must be > 0")
        if not 0 <= self.arcface_m < math.pi / 2:
            raise ValidationError("arcface margin must lie in [0, pi/2)")
        if self.reid_kind not in REID_KINDS:
            raise ValidationError(f"reid_kind must be one of {REID_KINDS}")


@dataclass
class LossBreakdown:
    total: T.Tensor
    reid: T.Tensor
    ce: T.Tensor

    def values(self) -> dict[str, float]:
        return {"L": self.total.item(), "L_reid": self.reid.item(), "L_ce": self.ce.item()}


def _labels(labels, n_classes: int, batch: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != batch:
        raise LabelError(f"{lab.shape[0]} labels for a batch of {batch}")
    if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}), got range [{lab.min()}, {lab.max()}]")
    return lab


def cross_entropy(logits: T.Tensor, labels) -> T.Tensor:
    """Mean of -log softmax(logits)[label] over the batch."""
    x = logits.data
    b, n = x.shape
    lab = _labels(labels, n, b)
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - shifted[rows, lab])

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, lab] -= 1
        return (p * (g / b),)

    return T.apply_op("cross_entropy", np.asarray(loss, dtype=x.dtype), (logits,), bw)


def _check_rows(z: T.Tensor) -> None:
    norms = np.sqrt(np.sum(z.data.astype(np.float64) ** 2, axis=1))
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise NumericError(f"embedding row {int(bad[0])} is all zero", index=int(bad[0]))


def cosine_logits(z: T.Tensor, weights: T.Tensor) -> T.Tensor:
    """cos(theta) between every embedding row and every class-weight row."""
    _check_rows(z)
    zn = T.l2_normalize(T.astype(z, np.float64))
    wn = T.l2_normalize(T.astype(weights, np.float64))
    return T.matmul(zn, T.transpose(wn))


def add_angular_margin(cos: T.Tensor, labels, m: float, flat_cap: bool = False) -> T.Tensor:
    """Replace each target logit cos(theta) by cos(theta + m).

    Past theta = pi - m the angle cannot grow further. With ``flat_cap`` the
    logit then sticks at cos(pi) = -1, which has zero gradient; by default it
    continues as cos(theta) - m*sin(m) instead, which stays below the
    unmargined logit, keeps the loss monotone in ``m`` and keeps a gradient.
    """
    c = cos.data
    b = c.shape[0]
    lab = _labels(labels, c.shape[1], b)
    rows = np.arange(b)
    ct = np.clip(c[rows, lab], -1.0, 1.0)
    sin_t = np.sqrt(np.maximum(1.0 - ct * ct, 0.0))
    cos_m, sin_m = math.cos(m), math.sin(m)
    ok = ct >= -cos_m                     # theta + m <= pi
    if flat_cap:
        phi = np.where(ok, ct * cos_m - sin_t * sin_m, -1.0)
        slope = 0.0
    else:
        phi = np.where(ok, ct * cos_m - sin_t * sin_m, ct - m * sin_m)
        slope = 1.0
    out = c.copy()
    out[rows, lab] = phi
    if m:
        dphi = np.where(ok, cos_m + ct * sin_m / np.maximum(sin_t, 1e-12), slope)
    else:
        dphi = np.ones_like(ct)

    def bw(g):
        gc = g.copy()
        gc[rows, lab] = g[rows, lab] * dphi
        return (gc,)

    return T.apply_op("angular_margin", out, (cos,), bw)


def arcface_logits(z: T.Tensor, weights: T.Tensor, labels, s: float, m: float) -> T.Tensor:
    return T.scale(add_angular_margin(cosine_logits(z, weights), labels, m), s)


def arcface_loss(z: T.Tensor, weights: T.Tensor, labels, s: float = 16.0, m: float = 0.3) -> T.Tensor:
    if s <= 0 or not 0 <= m < math.pi / 2:
        raise ValidationError(f"invalid arcface parameters s={s}, m={m}")
    return cross_entropy(arcface_logits(z, weights, labels, s, m), labels)


def triplet_loss(anchor: T.Tensor, positive: T.Tensor, negative: T.Tensor, margin: float = 0.3) -> T.Tensor:
    """Mean over rows of max(0, |a - p| - |a - n| + margin)."""
    if not anchor.shape == positive.shape == negative.shape:
        raise ValidationError(
            f"triplet shapes differ: {anchor.shape}, {positive.shape}, {negative.shape}"
        )
    d_ap = T.row_norm(anchor - positive)
    d_an = T.row_norm(anchor - negative)
    hinge = d_ap - d_an
    hinge = T.relu(T.add(hinge, T.Tensor._wrap(np.full(hinge.shape, margin, dtype=hinge.dtype))))
    return T.mean(hinge)


def mine_batch_hard(z: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per anchor: index of the farthest positive and of the nearest negative."""
    z = np.asarray(z, dtype=np.float64)
    lab = np.asarray(labels).reshape(-1)
    diff = z[:, None, :] - z[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    same = lab[:, None] == lab[None, :]
    n = len(lab)
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    for i in range(n):
        if not pos_mask[i].any():
            raise TripletMiningError(f"anchor {i} (label {lab[i]}) has no positive in the batch")
        if not neg_mask[i].any():
            raise TripletMiningError(f"anchor {i} (label {lab[i]}) has no negative in the batch")
    pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    return pos, neg


def batch_hard_triplet_loss(z: T.Tensor, labels, margin: float = 0.3) -> T.Tensor:
    z64 = T.astype(z, np.float64)
    pos, neg = mine_batch_hard(z64.data, labels)
    return triplet_loss(z64, T.take_rows(z64, pos), T.take_rows(z64, neg), margin)


def total_loss(z: T.Tensor, weights: T.Tensor, labels, cfg: LossConfig) -> LossBreakdown:
    parts = []
    if "arcface" in cfg.reid_kind:
        parts.append(arcface_loss(z, weights, labels, cfg.arcface_s, cfg.arcface_m))
    if "triplet" in cfg.reid_kind:
        parts.append(batch_hard_triplet_loss(z, labels, cfg.triplet_margin))
    reid = parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])
    ce = cross_entropy(T.scale(cosine_logits(z, weights), cfg.arcface_s), labels)
    total = T.add(reid, T.scale(ce, cfg.lam))
    return LossBreakdown(total, reid, ce)
