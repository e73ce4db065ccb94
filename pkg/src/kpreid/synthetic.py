"""Synthetic feature-map datasets with known keypoint correspondences.

Every image is built from one shared template whose cell vectors are unit
length and pairwise separated by at least ``theta_min`` radians. Per-cell
perturbations (identity code at keypoint cells, clutter elsewhere, plus
jitter) are kept strictly below ``sin(theta_min / 4)`` in L2 norm. Under that
bound a perturbed query is within ``theta_min / 4`` of its template vector, so
the cosine argmax against any perturbed target lands on the true cell and
nowhere else. The image map is then a recorded spatial deformation (flip,
wrapped translation or cell permutation) of the perturbed template.

Identity information lives only at keypoint cells: every image of identity
``i`` carries the same code vector at keypoint ``k``, while the clutter on
other cells is drawn fresh per image from the same distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coords import cell_to_pixel
from .errors import GenerationError
from .featureio import (
    DatasetIndex,
    FeatureMap,
    ImageRecord,
    Keypoint,
    KeypointSet,
    atomic_write_json,
    save_keypoints,
    save_manifest,
    write_feature_map,
)

DEFORMATIONS = ("identity", "flip", "translation", "permutation")


@dataclass
class Deformation:
    """Bijection on grid cells. ``perm[i]`` is the destination of flat cell ``i``."""

    kind: str = "identity"
    dx: int = 0
    dy: int = 0
    perm: list[int] | None = None

    def apply_cell(self, x: int, y: int, height: int, width: int) -> tuple[int, int]:
        if self.kind == "identity":
            return x, y
        if self.kind == "flip":
            return width - 1 - x, y
        if self.kind == "translation":
            return (x + self.dx) % width, (y + self.dy) % height
        if self.kind == "permutation":
            dest = self.perm[y * width + x]
            return dest % width, dest // width
        raise GenerationError(f"unknown deformation {self.kind!r}")

    def apply_map(self, values: np.ndarray) -> np.ndarray:
        c, h, w = values.shape
        if self.kind == "identity":
            return values.copy()
        if self.kind == "flip":
            return values[:, :, ::-1].copy()
        if self.kind == "translation":
            return np.roll(values, shift=(self.dy, self.dx), axis=(1, 2))
        if self.kind == "permutation":
            out = np.empty((c, h * w), dtype=values.dtype)
            out[:, np.asarray(self.perm)] = values.reshape(c, h * w)
            return out.reshape(c, h, w)
        raise GenerationError(f"unknown deformation {self.kind!r}")

    def to_json(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "translation":
            d.update(dx=self.dx, dy=self.dy)
        if self.kind == "permutation":
            d["perm"] = list(self.perm)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Deformation":
        return cls(d["kind"], d.get("dx", 0), d.get("dy", 0), d.get("perm"))


@dataclass
class SynthGroundTruth:
    reference: str
    grid_height: int
    grid_width: int
    reference_cells: list[tuple[int, int, int]]          # (x_f, y_f, category)
    deformations: dict[str, Deformation]
    cells: dict[str, list[tuple[int, int, int]]]
    noise_bound: float
    min_angle: float

    def replay(self, image_id: str) -> list[tuple[int, int, int]]:
        d = self.deformations[image_id]
        return [(*d.apply_cell(x, y, self.grid_height, self.grid_width), c) for x, y, c in self.reference_cells]

    def to_json(self, index: DatasetIndex) -> dict:
        images = {}
        for rec in index.images:
            images[rec.image_id] = {
                "deformation": self.deformations[rec.image_id].to_json(),
                "keypoints": [
                    {
                        "x_f": x, "y_f": y, "category": c,
                        **dict(zip("xy", cell_to_pixel(x, y, rec.image_width, rec.image_height,
                                                        self.grid_width, self.grid_height))),
                    }
                    for x, y, c in self.cells[rec.image_id]
                ],
            }
        return {
            "reference": self.reference,
            "grid": [self.grid_height, self.grid_width],
            "reference_cells": [list(c) for c in self.reference_cells],
            "noise_bound": self.noise_bound,
            "min_angle": self.min_angle,
            "images": images,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthGroundTruth":
        images = obj["images"]
        return cls(
            reference=obj["reference"],
            grid_height=obj["grid"][0],
            grid_width=obj["grid"][1],
            reference_cells=[tuple(c) for c in obj["reference_cells"]],
            deformations={k: Deformation.from_json(v["deformation"]) for k, v in images.items()},
            cells={k: [(kp["x_f"], kp["y_f"], kp["category"]) for kp in v["keypoints"]] for k, v in images.items()},
            noise_bound=obj["noise_bound"],
            min_angle=obj["min_angle"],
        )


@dataclass
class SyntheticDataset:
    index: DatasetIndex
    features: dict[str, FeatureMap]
    reference: KeypointSet
    truth: SynthGroundTruth
    template: np.ndarray = field(repr=False, default=None)
    inputs: dict[str, FeatureMap] = field(repr=False, default_factory=dict)

    def write(self, out_dir) -> Path:
        """Write manifest.json, features/, inputs/, ref_keypoints.json and ground_truth.json."""
        out = Path(out_dir)
        (out / "features").mkdir(parents=True, exist_ok=True)
        (out / "inputs").mkdir(exist_ok=True)
        for rec in self.index.images:
            write_feature_map(out / rec.feature_path, self.features[rec.image_id])
            if rec.input_path:
                write_feature_map(out / rec.input_path, self.inputs[rec.image_id])
        save_keypoints(out / "ref_keypoints.json", self.reference)
        atomic_write_json(out / "ground_truth.json", self.truth.to_json(self.index))
        save_manifest(out / "manifest.json", self.index)
        self.index.root = out
        return out


def min_pairwise_angle(vectors: np.ndarray) -> float:
    """Smallest angle between distinct rows of a unit-row matrix."""
    if len(vectors) < 2:
        return math.pi
    cos = vectors @ vectors.T
    np.fill_diagonal(cos, -1.0)
    return float(np.arccos(np.clip(cos.max(), -1.0, 1.0)))


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    r = radius * rng.random(n) ** (1.0 / dim)
    return _unit_rows(rng, n, dim) * r[:, None]


def generate_synthetic(
    seed: int,
    n_identities: int = 10,
    images_per_identity: int = 20,
    channels: int = 8,
    grid_height: int = 4,
    grid_width: int = 4,
    n_keypoints: int = 3,
    deformation_kinds=("flip", "translation", "permutation"),
    image_size: int = 32,
    patch_size: int = 8,
    signal: float = 0.6,
    clutter: float = 0.6,
    noise: float = 0.3,
    test_fraction: float = 0.2,
    template_candidates: int = 8,
    decoys_per_keypoint: int = 0,
    decoy_angle: float = 0.5,
    code_vocab: int | None = 4,
    code_min_distance: int = 2,
) -> SyntheticDataset:
    """Build a seeded synthetic dataset.

    ``signal``, ``clutter`` and ``noise`` are fractions of the per-cell
    perturbation budget ``sin(theta_min / 4)``; ``max(signal, clutter) + noise``
    must stay below 1.

    ``decoys_per_keypoint`` cells per keypoint get a template vector
    ``decoy_angle`` radians from that keypoint's vector, a harder matching
    problem for propagation.

    With ``code_vocab`` set, each keypoint category has that many candidate
    code vectors and an identity is a distinct combination of one code per
    keypoint, any two identities differing at ``code_min_distance`` or more
    keypoints; clutter cells then draw from the same pooled vocabulary (and
    ``clutter`` is ignored). Identity codes are then indistinguishable from
    clutter by content alone, so only the keypoint locations say which cells
    matter, and test identities are unseen combinations of seen codes.

    Besides the propagation features, every image gets a model-input view
    (``inputs``): its feature map minus the deformed template, divided by
    the bound, i.e. the identity/clutter/noise residual without the part
    layout that propagation matches on.
    """
    if n_keypoints < 1:
        raise GenerationError("keypoints must be >= 1")
    if n_identities < 1 or images_per_identity < 1:
        raise GenerationError("need at least one identity and one image per identity")
    if channels < 1 or grid_height < 1 or grid_width < 1:
        raise GenerationError("channels and grid extents must be positive")
    n_cells = grid_height * grid_width
    if n_keypoints > n_cells:
        raise GenerationError(f"{n_keypoints} keypoints do not fit a {grid_height}x{grid_width} grid")
    if image_size % patch_size:
        raise GenerationError(f"image size {image_size} is not a multiple of patch size {patch_size}")
    unknown = set(deformation_kinds) - set(DEFORMATIONS)
    if unknown or not deformation_kinds:
        raise GenerationError(f"unknown deformation kinds {sorted(unknown)}; choose from {DEFORMATIONS}")
    if min(signal, clutter, noise) < 0 or max(signal, clutter) + noise >= 1:
        raise GenerationError("noise bound nonpositive: need max(signal, clutter) + noise < 1")

    rng = np.random.default_rng(seed)
    best, theta = None, -1.0
    for _ in range(template_candidates):
        cand = _unit_rows(rng, n_cells, channels)
        a = min_pairwise_angle(cand)
        if a > theta:
            best, theta = cand, a
    bound = math.sin(theta / 4)
    if not bound > 1e-6:
        raise GenerationError(
            f"noise bound nonpositive: template cells not separable (min angle {theta:.3g} rad with C={channels})"
        )
    template = best.T.reshape(channels, grid_height, grid_width)

    kp_flat = rng.choice(n_cells, size=n_keypoints, replace=False)
    if decoys_per_keypoint:
        template = _add_decoys(rng, template, kp_flat, decoys_per_keypoint, decoy_angle)
        theta = min_pairwise_angle(template.reshape(channels, n_cells).T)
        bound = math.sin(theta / 4)
        if not bound > 1e-6:
            raise GenerationError("noise bound nonpositive: decoys collapse onto other cells")
    ref_cells = [(int(f % grid_width), int(f // grid_width), k) for k, f in enumerate(kp_flat)]
    other = np.setdiff1d(np.arange(n_cells), kp_flat)
    vocab = None
    if code_vocab:
        vocab = _unit_rows(rng, n_keypoints * code_vocab, channels).reshape(n_keypoints, code_vocab, channels)
        vocab *= signal * bound
        choice = _distinct_combinations(rng, n_identities, n_keypoints, code_vocab,
                                        min(code_min_distance, n_keypoints))
        codes = vocab[np.arange(n_keypoints)[None, :], choice]
    else:
        codes = _unit_rows(rng, n_identities * n_keypoints, channels).reshape(n_identities, n_keypoints, channels)
        codes *= signal * bound

    identities = [f"id{i:02d}" for i in range(n_identities)]
    n_test = 0 if n_identities < 2 else min(n_identities - 1, max(1, round(test_fraction * n_identities)))
    test_ids = set(rng.permutation(n_identities)[:n_test].tolist())

    records, features, inputs, deformations, cells = [], {}, {}, {}, {}
    for i, ident in enumerate(identities):
        for j in range(images_per_identity):
            image_id = f"{ident}_{j:03d}"
            flat = template.reshape(channels, n_cells).copy()
            flat[:, kp_flat] += codes[i].T
            if vocab is not None and len(other):
                flat[:, other] += vocab.reshape(-1, channels)[rng.integers(vocab.shape[0] * vocab.shape[1], size=len(other))].T
            elif clutter > 0 and len(other):
                flat[:, other] += (_unit_rows(rng, len(other), channels) * clutter * bound).T
            if i == 0 and j == 0:
                d = Deformation("identity")
            else:
                d = _random_deformation(rng, deformation_kinds, grid_height, grid_width)
            values = d.apply_map(flat.reshape(channels, grid_height, grid_width))
            if noise > 0:
                values = values + _ball(rng, n_cells, channels, noise * bound).T.reshape(values.shape)
            features[image_id] = FeatureMap(values.astype(np.float32))
            # appearance view: everything except the shared template, in units of the bound
            inputs[image_id] = FeatureMap(((values - d.apply_map(template)) / bound).astype(np.float32))
            deformations[image_id] = d
            cells[image_id] = [(*d.apply_cell(x, y, grid_height, grid_width), c) for x, y, c in ref_cells]
            records.append(ImageRecord(image_id, ident, "test" if i in test_ids else "train",
                                       image_size, image_size, f"features/{image_id}.fmap",
                                       f"inputs/{image_id}.fmap"))

    categories = [f"kp{k}" for k in range(n_keypoints)]
    index = DatasetIndex(patch_size, categories, records)
    ref_id = records[0].image_id
    reference = KeypointSet(ref_id, [
        Keypoint(*cell_to_pixel(x, y, image_size, image_size, grid_width, grid_height), c)
        for x, y, c in ref_cells
    ])
    truth = SynthGroundTruth(ref_id, grid_height, grid_width, ref_cells, deformations, cells, bound, theta)
    return SyntheticDataset(index, features, reference, truth, template, inputs)


def _distinct_combinations(rng, n: int, k: int, v: int, min_distance: int = 1,
                           attempts: int = 200) -> np.ndarray:
    """``n`` rows of ``k`` digits in ``range(v)``, pairwise differing in >= ``min_distance`` places.

    Random greedy construction, restarted up to ``attempts`` times.
    """
    if v ** k < n or min_distance > k:
        raise GenerationError(f"code_vocab={v} with {k} keypoints cannot give {n} identities")
    for _ in range(attempts):
        rows: list[np.ndarray] = []
        for _ in range(50 * n):
            row = rng.integers(v, size=k)
            if all(np.count_nonzero(row != r) >= min_distance for r in rows):
                rows.append(row)
                if len(rows) == n:
                    return np.stack(rows)
    raise GenerationError(
        f"could not draw {n} identities from code_vocab={v} with {k} keypoints "
        f"differing in >= {min_distance} places"
    )


def _add_decoys(rng, template: np.ndarray, kp_flat, per_kp: int, angle: float):
    """Overwrite random non-keypoint cells with unit vectors ``angle`` radians from a keypoint's."""
    c, h, w = template.shape
    flat = template.reshape(c, h * w).copy()
    free = rng.permutation(np.setdiff1d(np.arange(h * w), kp_flat))
    if per_kp * len(kp_flat) > len(free) or per_kp >= c:
        raise GenerationError(f"cannot place {per_kp} decoys per keypoint on this grid/channel count")
    slot = 0
    for k in kp_flat:
        t = flat[:, k]
        basis = [t]
        for _ in range(per_kp):
            u = rng.standard_normal(c)
            for b in basis:
                u -= (u @ b) * b
            u /= np.linalg.norm(u)
            basis.append(u)
            flat[:, free[slot]] = math.cos(angle) * t + math.sin(angle) * u
            slot += 1
    return flat.reshape(c, h, w)


def _random_deformation(rng, kinds, height: int, width: int) -> Deformation:
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "translation":
        return Deformation(kind, dx=int(rng.integers(width)), dy=int(rng.integers(height)))
    if kind == "permutation":
        return Deformation(kind, perm=rng.permutation(height * width).tolist())
    return Deformation(kind)
