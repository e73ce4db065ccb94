"""On-disk formats: feature maps, manifests, keypoint files and checkpoints.

Feature maps and checkpoints are little-endian binary; manifests and keypoint
files are JSON. Every writer goes through a temp file and ``os.replace`` so a
failed write never leaves a half-written target behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    BoundsError,
    CategoryError,
    CheckpointIncompatibleError,
    DuplicateImageError,
    FormatError,
    MissingFeatureError,
    SplitContaminationError,
    UnknownImageError,
    ValidationError,
)

FMAP_MAGIC = b"FMAP"
CKPT_MAGIC = b"CKPT"
FORMAT_VERSION = 1
SPLITS = ("train", "test")


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2) + "\n").encode("utf-8"))


# ---------------------------------------------------------------- feature maps

@dataclass
class FeatureMap:
    """C x H_f x W_f grid of per-cell feature vectors."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise FormatError(f"feature map must be a non-empty C x H x W array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("feature map contains non-finite values")
        self.values = v

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def encode_feature_map(fmap: FeatureMap) -> bytes:
    c, h, w = fmap.values.shape
    header = FMAP_MAGIC + struct.pack("<4I", FORMAT_VERSION, c, h, w)
    return header + np.ascontiguousarray(fmap.values, dtype="<f4").tobytes()


def decode_feature_map(buf: bytes) -> FeatureMap:
    if len(buf) < 20:
        raise FormatError("truncated feature-map header", offset=len(buf))
    if buf[:4] != FMAP_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {FMAP_MAGIC!r}", offset=0)
    version, c, h, w = struct.unpack_from("<4I", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported feature-map version {version}", offset=4)
    if c == 0 or h == 0 or w == 0:
        raise FormatError(f"zero extent in header ({c}, {h}, {w})", offset=8)
    n = c * h * w
    have = (len(buf) - 20) // 4
    if len(buf) - 20 != 4 * n:
        raise FormatError(
            f"header declares {c}x{h}x{w} = {n} floats but payload holds {have}"
            + (" (truncated)" if have < n else " (trailing bytes)"),
            offset=20 + 4 * min(have, n),
        )
    values = np.frombuffer(buf, dtype="<f4", count=n, offset=20).astype(np.float32).reshape(c, h, w)
    return FeatureMap(values)


def write_feature_map(path, fmap: FeatureMap) -> None:
    atomic_write_bytes(path, encode_feature_map(fmap))


def read_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        return decode_feature_map(fh.read())


# ---------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    identity: str
    split: str
    image_width: int
    image_height: int
    feature_path: str
    input_path: str | None = None


@dataclass
class DatasetIndex:
    patch_size: int
    categories: list[str]
    images: list[ImageRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        validate_index(self)

    def record(self, image_id: str) -> ImageRecord:
        for r in self.images:
            if r.image_id == image_id:
                return r
        raise UnknownImageError(f"image {image_id!r} is not in the manifest")

    def split(self, name: str) -> list[ImageRecord]:
        return [r for r in self.images if r.split == name]

    def feature_file(self, rec: ImageRecord) -> Path:
        p = Path(rec.feature_path)
        return p if p.is_absolute() else self.root / p

    def load_features(self, rec: ImageRecord) -> FeatureMap:
        path = self.feature_file(rec)
        if not path.exists():
            raise MissingFeatureError(f"missing feature map for {rec.image_id}: {path}")
        return read_feature_map(path)

    def load_inputs(self, rec: ImageRecord) -> FeatureMap:
        """Model-input grid: ``input_path`` when the record has one, else the feature map."""
        if not rec.input_path:
            return self.load_features(rec)
        path = self.root / rec.input_path if not Path(rec.input_path).is_absolute() else Path(rec.input_path)
        if not path.exists():
            raise MissingFeatureError(f"missing input grid for {rec.image_id}: {path}")
        return read_feature_map(path)

    def to_json(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "categories": list(self.categories),
            "images": [
                {
                    "image_id": r.image_id,
                    "identity": r.identity,
                    "split": r.split,
                    "image_width": r.image_width,
                    "image_height": r.image_height,
                    "feature_path": r.feature_path,
                    **({"input_path": r.input_path} if r.input_path else {}),
                }
                for r in self.images
            ],
        }


def validate_index(index: DatasetIndex) -> None:
    if not index.images:
        raise ValidationError("empty dataset")
    p = index.patch_size
    if not isinstance(p, int) or p < 1:
        raise ValidationError(f"patch_size must be a positive integer, got {p!r}")
    seen: set[str] = set()
    split_of: dict[str, str] = {}
    for r in index.images:
        if r.image_id in seen:
            raise DuplicateImageError(f"duplicate image_id {r.image_id!r}")
        seen.add(r.image_id)
        if r.split not in SPLITS:
            raise ValidationError(f"image {r.image_id!r}: split must be one of {SPLITS}, got {r.split!r}")
        prev = split_of.setdefault(r.identity, r.split)
        if prev != r.split:
            raise SplitContaminationError(f"identity {r.identity!r} appears in both train and test splits")
        if r.image_width < 1 or r.image_height < 1 or r.image_width % p or r.image_height % p:
            raise ValidationError(
                f"image {r.image_id!r}: size {r.image_width}x{r.image_height} is not a multiple of patch size {p}"
            )


def parse_manifest(obj: Mapping, root=".") -> DatasetIndex:
    try:
        images = [
            ImageRecord(
                image_id=str(im["image_id"]),
                identity=str(im["identity"]),
                split=str(im["split"]),
                image_width=int(im["image_width"]),
                image_height=int(im["image_height"]),
                feature_path=str(im["feature_path"]),
                input_path=str(im["input_path"]) if im.get("input_path") else None,
            )
            for im in obj["images"]
        ]
        return DatasetIndex(int(obj["patch_size"]), [str(c) for c in obj["categories"]], images, Path(root))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed manifest: {exc!r}") from exc


def load_manifest(path) -> DatasetIndex:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"manifest {path} is not valid JSON: {exc}") from exc
    return parse_manifest(obj, root=path.parent)


def save_manifest(path, index: DatasetIndex) -> None:
    atomic_write_json(path, index.to_json())


# ---------------------------------------------------------------- keypoints

@dataclass(frozen=True)
class Keypoint:
    x: int
    y: int
    category: int


@dataclass
class KeypointSet:
    image_id: str
    keypoints: list[Keypoint]

    def validate(self, rec: ImageRecord, n_categories: int) -> None:
        for kp in self.keypoints:
            if not (0 <= kp.x < rec.image_width and 0 <= kp.y < rec.image_height):
                raise BoundsError(
                    f"{self.image_id}: keypoint ({kp.x}, {kp.y}) outside {rec.image_width}x{rec.image_height}"
                )
            if not 0 <= kp.category < n_categories:
                raise CategoryError(f"{self.image_id}: category {kp.category} >= N_c={n_categories}")

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "keypoints": [{"x": k.x, "y": k.y, "category": k.category} for k in self.keypoints],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "KeypointSet":
        try:
            kps = [Keypoint(int(k["x"]), int(k["y"]), int(k["category"])) for k in obj["keypoints"]]
            return cls(str(obj["image_id"]), kps)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed keypoint file: {exc!r}") from exc


def load_keypoints(path) -> KeypointSet:
    with open(path, encoding="utf-8") as fh:
        try:
            return KeypointSet.from_json(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"keypoint file {path} is not valid JSON: {exc}") from exc


def save_keypoints(path, kps: KeypointSet) -> None:
    atomic_write_json(path, kps.to_json())


# ---------------------------------------------------------------- checkpoints

@dataclass
class TrainingState:
    step: int = 0
    rng_state: int = 0


def encode_checkpoint(params: Mapping[str, np.ndarray], state: TrainingState) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValidationError(f"tensor {name!r} cannot be stored (name or rank too large)")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(struct.pack("<QQ", state.step, state.rng_state))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], TrainingState]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}", offset=0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        n = int(np.prod(shape, dtype=np.int64))
        payload = take(4 * n, f"payload of {name}")
        params[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    step, rng_state = struct.unpack("<QQ", take(16, "trailer"))
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint trailer", offset=pos)
    return params, TrainingState(step, rng_state)


def save_checkpoint(path, params: Mapping[str, np.ndarray], state: TrainingState) -> None:
    atomic_write_bytes(path, encode_checkpoint(params, state))


def load_checkpoint(path, expected_shapes: Mapping[str, tuple] | None = None):
    """Read a checkpoint; if ``expected_shapes`` is given, refuse mismatches."""
    with open(path, "rb") as fh:
        params, state = decode_checkpoint(fh.read())
    if expected_shapes is not None:
        check_compatible(params, expected_shapes)
    return params, state


def check_compatible(params: Mapping[str, np.ndarray], expected_shapes: Mapping[str, tuple]) -> None:
    problems = []
    for name, shape in expected_shapes.items():
        if name not in params:
            problems.append(f"{name}: missing (expected {tuple(shape)})")
        elif tuple(params[name].shape) != tuple(shape):
            problems.append(f"{name}: stored {tuple(params[name].shape)}, expected {tuple(shape)}")
    if problems:
        raise CheckpointIncompatibleError("checkpoint incompatible with config: " + "; ".join(problems))


def iter_feature_maps(index: DatasetIndex, records: Iterable[ImageRecord] | None = None):
    for rec in records if records is not None else index.images:
        yield rec, index.load_features(rec)
