"""Keypoint propagation by cosine-similarity matching over dense features.

For each reference keypoint the feature vector under it is normalized and
dotted against every (normalized) cell of the target map; the best cell is the
propagated location. Ties go to the first cell in row-major order.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .coords import cell_to_pixel, pixel_to_cell
from .errors import DimensionError, MissingFeatureError
from .featureio import (
    DatasetIndex,
    FeatureMap,
    ImageRecord,
    Keypoint,
    KeypointSet,
    atomic_write_bytes,
    atomic_write_json,
    save_keypoints,
)

__all__ = [
    "PropagatedKeypoint",
    "argmax_cell",
    "cell_to_pixel",
    "export_heatmap",
    "normalize_features",
    "pixel_to_cell",
    "propagate",
    "propagate_pair",
    "similarity_map",
    "write_propagation",
]


def normalize_features(values, eps: float = 1e-8) -> np.ndarray:
    """Scale every cell's channel vector to unit length; near-zero cells become zero."""
    v = np.asarray(values.values if isinstance(values, FeatureMap) else values, dtype=np.float64)
    norm = np.sqrt(np.sum(v * v, axis=0, keepdims=True))
    out = v / np.maximum(norm, eps)
    out[:, (norm <= eps)[0]] = 0.0
    return out


def similarity_map(v_hat: np.ndarray, f_hat: np.ndarray) -> np.ndarray:
    v_hat = np.asarray(v_hat)
    if v_hat.ndim != 1 or f_hat.ndim != 3 or v_hat.shape[0] != f_hat.shape[0]:
        raise DimensionError(f"similarity_map: vector of shape {v_hat.shape} vs feature map {f_hat.shape}")
    return np.tensordot(v_hat, f_hat, axes=(0, 0))


def argmax_cell(sim: np.ndarray) -> tuple[int, int, float]:
    """Returns (x_f, y_f, peak); np.argmax already yields the first row-major maximum."""
    flat = int(np.argmax(sim))
    y, x = divmod(flat, sim.shape[1])
    return x, y, float(sim[y, x])


@dataclass(frozen=True)
class PropagatedKeypoint:
    category: int
    cell: tuple[int, int]
    pixel: tuple[int, int]
    peak_similarity: float


def propagate_pair(ref_map: FeatureMap, ref_rec: ImageRecord, ref_kps: KeypointSet,
                   target_map: FeatureMap, target_rec: ImageRecord) -> list[PropagatedKeypoint]:
    if ref_map.channels != target_map.channels:
        raise DimensionError(
            f"channel mismatch: {ref_rec.image_id} has {ref_map.channels}, {target_rec.image_id} has {target_map.channels}"
        )
    ref_hat = normalize_features(ref_map)
    tgt_hat = normalize_features(target_map)
    out = []
    for kp in ref_kps.keypoints:
        xf, yf = pixel_to_cell(kp.x, kp.y, ref_rec.image_width, ref_rec.image_height, ref_map.width, ref_map.height)
        sim = similarity_map(ref_hat[:, yf, xf], tgt_hat)
        tx, ty, peak = argmax_cell(sim)
        px = cell_to_pixel(tx, ty, target_rec.image_width, target_rec.image_height,
                           target_map.width, target_map.height)
        out.append(PropagatedKeypoint(kp.category, (tx, ty), px, peak))
    return out


def propagate(reference: str, ref_kps: KeypointSet, index: DatasetIndex,
              features: Mapping[str, FeatureMap] | None = None,
              workers: int = 1) -> dict[str, list[PropagatedKeypoint]]:
    """Propagate ``ref_kps`` to every non-reference image, in manifest order."""
    ref_rec = index.record(reference)
    ref_kps.validate(ref_rec, len(index.categories))

    def load(rec: ImageRecord) -> FeatureMap:
        if features is not None:
            if rec.image_id not in features:
                raise MissingFeatureError(f"missing feature map for {rec.image_id}")
            return features[rec.image_id]
        return index.load_features(rec)

    ref_map = load(ref_rec)
    targets = [r for r in index.images if r.image_id != reference]

    def one(rec):
        return propagate_pair(ref_map, ref_rec, ref_kps, load(rec), rec)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, targets))
    else:
        results = [one(r) for r in targets]
    return {rec.image_id: res for rec, res in zip(targets, results)}


def to_keypoint_set(image_id: str, entries: list[PropagatedKeypoint]) -> KeypointSet:
    return KeypointSet(image_id, [Keypoint(e.pixel[0], e.pixel[1], e.category) for e in entries])


def write_propagation(out_dir, result: Mapping[str, list[PropagatedKeypoint]], reference: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"reference": reference, "images": {}}
    for image_id, entries in result.items():
        save_keypoints(out / f"{image_id}.json", to_keypoint_set(image_id, entries))
        summary["images"][image_id] = [
            {"category": e.category, "x_f": e.cell[0], "y_f": e.cell[1], "peak_similarity": e.peak_similarity}
            for e in entries
        ]
    atomic_write_json(out / "summary.json", summary)
    return out


def load_propagated(keypoint_dir, index: DatasetIndex, ref_kps: KeypointSet | None = None) -> dict[str, KeypointSet]:
    """Read one KeypointSet per image from ``keypoint_dir``; the reference comes from ``ref_kps``."""
    kdir = Path(keypoint_dir)
    out = {}
    for rec in index.images:
        if ref_kps is not None and rec.image_id == ref_kps.image_id:
            out[rec.image_id] = ref_kps
            continue
        path = kdir / f"{rec.image_id}.json"
        if not path.exists():
            raise FileNotFoundError(f"missing propagated keypoints for {rec.image_id}: {path}")
        with open(path, encoding="utf-8") as fh:
            out[rec.image_id] = KeypointSet.from_json(json.load(fh))
    return out


def heatmap_bytes(sim: np.ndarray) -> np.ndarray:
    """Linear rescale to 0..255 with half-up rounding; constant maps give 128."""
    s = np.asarray(sim, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.full(s.shape, 128, dtype=np.uint8)
    return np.floor((s - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def export_heatmap(sim: np.ndarray, path) -> None:
    """Write a binary (P5) PGM of size W_f x H_f."""
    pix = heatmap_bytes(sim)
    h, w = pix.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
