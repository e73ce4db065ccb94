"""Training loop: identity-balanced batches, composite loss, Adam updates."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .featureio import (
    DatasetIndex,
    FeatureMap,
    KeypointSet,
    TrainingState,
    atomic_write_bytes,
    atomic_write_json,
    check_compatible,
    load_checkpoint,
    save_checkpoint,
)
from .losses import REID_KINDS, LossConfig, total_loss
from .model import MODES, ModelParams, ViTConfig, forward_batch, keypoint_mask, param_shapes, prepare_input

log = logging.getLogger(__name__)

_VIT_OVERRIDES = ("patch_size", "dim", "depth", "heads", "mlp_ratio", "ln_eps")


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 50
    batch_identities: int = 4
    images_per_identity: int = 4
    learning_rate: float = 1e-3
    lam: float = 0.2
    arcface_s: float = 16.0
    arcface_m: float = 0.3
    triplet_margin: float = 0.3
    reid_kind: str = "arcface"
    mode: str = "ckpe"
    vit: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_identities < 2 or self.images_per_identity < 2:
            raise ValidationError("batches need >= 2 identities and >= 2 images per identity")
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be > 0")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.reid_kind not in REID_KINDS:
            raise ValidationError(f"reid_kind must be one of {REID_KINDS}")
        bad = set(self.vit) - set(_VIT_OVERRIDES)
        if bad:
            raise ValidationError(f"unsupported vit keys {sorted(bad)}; allowed: {_VIT_OVERRIDES}")
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lam, self.arcface_s, self.arcface_m, self.triplet_margin, self.reid_kind)

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_json(cls, obj: Mapping) -> "TrainConfig":
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ValidationError(f"unknown training config keys: {sorted(extra)}")
        return cls(**obj)


def load_train_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            return TrainConfig.from_json(json.load(fh))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ValidationError(f"bad training config {path}: {exc}") from exc


def vit_config_for(index: DatasetIndex, inputs: Mapping[str, FeatureMap], cfg: TrainConfig) -> ViTConfig:
    train = index.split("train")
    if not train:
        raise ValidationError("train split is empty")
    first = train[0]
    return ViTConfig(
        image_height=first.image_height,
        image_width=first.image_width,
        in_channels=inputs[first.image_id].channels,
        n_categories=max(1, len(index.categories)),
        n_classes=len({r.identity for r in train}),
        mode=cfg.mode,
        **{"patch_size": index.patch_size, **cfg.vit},
    )


class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, params: ModelParams, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(t.data) for n, t in params.tensors.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.tensors.items()}
        self.step_count = 0

    def step(self, params: ModelParams, grads: Mapping[str, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for name, t in params.tensors.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            t.data -= update.astype(t.data.dtype)


@dataclass
class TrainState:
    params: ModelParams
    optimizer: Adam
    rng_state: int
    history: list[dict] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.optimizer.step_count

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.params.arrays())
        for n in self.params.tensors:
            arrays[f"optim.m.{n}"] = self.optimizer.m[n]
            arrays[f"optim.v.{n}"] = self.optimizer.v[n]
        return arrays


def save_train_checkpoint(path, state: TrainState) -> None:
    save_checkpoint(path, state.checkpoint_arrays(), TrainingState(state.step, state.rng_state))


def load_train_checkpoint(path, vit: ViTConfig, cfg: TrainConfig) -> TrainState:
    arrays, ts = load_checkpoint(path, param_shapes(vit))
    params = ModelParams.from_arrays(vit, arrays)
    opt = Adam(params, lr=cfg.learning_rate)
    for n in params.tensors:
        if f"optim.m.{n}" in arrays:
            opt.m[n] = arrays[f"optim.m.{n}"].copy()
            opt.v[n] = arrays[f"optim.v.{n}"].copy()
    opt.step_count = ts.step
    return TrainState(params, opt, ts.rng_state)


def identity_batches(labels: np.ndarray, n_ids: int, per_id: int, rng: np.random.Generator) -> list[np.ndarray]:
    """P identities x K images per batch, covering every sample once per epoch.

    Each identity's shuffled images are cut into chunks of ``per_id`` (a
    trailing singleton joins the previous chunk); chunks are interleaved
    identity by identity and grouped ``n_ids`` at a time.
    """
    by_id: dict[int, list[np.ndarray]] = {}
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if len(idx) < 2:
            raise ValidationError(f"class {int(c)} has fewer than two training images")
        chunks = [idx[i:i + per_id] for i in range(0, len(idx), per_id)]
        if len(chunks) > 1 and len(chunks[-1]) < 2:
            tail = chunks.pop()
            chunks[-1] = np.concatenate([chunks[-1], tail])
        by_id[int(c)] = chunks
    order = []
    for r in range(max(len(v) for v in by_id.values())):
        for c in rng.permutation(sorted(by_id)):
            if r < len(by_id[int(c)]):
                order.append((int(c), by_id[int(c)][r]))
    groups = [order[i:i + n_ids] for i in range(0, len(order), n_ids)]
    if len(groups) > 1 and len({c for c, _ in groups[-1]}) < 2:
        groups[-2].extend(groups.pop())
    return [np.concatenate([chunk for _, chunk in g]) for g in groups]


@dataclass
class TrainData:
    image_ids: list[str]
    inputs: np.ndarray
    masks: np.ndarray | None
    labels: np.ndarray
    classes: list[str]


def build_train_data(index: DatasetIndex, inputs: Mapping[str, FeatureMap],
                     keypoints: Mapping[str, KeypointSet] | None, vit: ViTConfig) -> TrainData:
    records = sorted(index.split("train"), key=lambda r: r.image_id)
    classes = sorted({r.identity for r in records})
    cls_of = {c: i for i, c in enumerate(classes)}
    inputs = np.stack([prepare_input(inputs[r.image_id], r, vit) for r in records]).astype(np.float32)
    masks = None
    if vit.mode != "none":
        if keypoints is None:
            raise ValidationError(f"mode={vit.mode} needs propagated keypoints")
        missing = [r.image_id for r in records if r.image_id not in keypoints]
        if missing:
            raise ValidationError(f"no keypoints for train images {missing[:5]}")
        masks = np.stack([keypoint_mask(keypoints[r.image_id], vit) for r in records]).astype(np.float32)
    labels = np.array([cls_of[r.identity] for r in records], dtype=np.int64)
    return TrainData([r.image_id for r in records], inputs, masks, labels, classes)


def run_epoch(state: TrainState, data: TrainData, cfg: TrainConfig) -> dict:
    params = state.params
    loss_cfg = cfg.loss_config()
    rng = np.random.default_rng(state.rng_state)
    batches = identity_batches(data.labels, cfg.batch_identities, cfg.images_per_identity, rng)
    state.rng_state = int(rng.integers(0, 2 ** 63))
    sums = {"L": 0.0, "L_reid": 0.0, "L_ce": 0.0}
    correct = 0
    seen = 0
    for idx in batches:
        with T.Tape() as tape:
            z = forward_batch(params, data.inputs[idx], None if data.masks is None else data.masks[idx])
            br = total_loss(z, params["arcface.w"], data.labels[idx], loss_cfg)
        grads = T.backward(tape, br.total, list(params))
        names = list(params.tensors)
        state.optimizer.step(params, dict(zip(names, grads)))
        for k, v in br.values().items():
            sums[k] += v
        w = params["arcface.w"].data.astype(np.float64)
        zz = z.data.astype(np.float64)
        cos = (zz / np.linalg.norm(zz, axis=1, keepdims=True)) @ (w / np.linalg.norm(w, axis=1, keepdims=True)).T
        correct += int(np.sum(np.argmax(cos, axis=1) == data.labels[idx]))
        seen += len(idx)
    n = len(batches)
    metrics = {"epoch": len(state.history) + 1, **{k: v / n for k, v in sums.items()},
               "train_top1": correct / seen}
    state.history.append(metrics)
    return metrics


def train(index: DatasetIndex, inputs: Mapping[str, FeatureMap],
          keypoints: Mapping[str, KeypointSet] | None, cfg: TrainConfig,
          out_dir=None, state: TrainState | None = None) -> TrainState:
    """Train for ``cfg.epochs`` epochs (on top of ``state`` if given).

    ``inputs`` are the grids the ViT reads, keyed by image id. They need not be
    the maps used for keypoint propagation; for synthetic data they are
    ``SyntheticDataset.inputs``, and on disk ``DatasetIndex.load_inputs``.

    With ``out_dir`` set, writes ``config.json`` and ``vit.json`` once, then
    after every epoch rewrites ``checkpoint.ckpt`` and appends to
    ``metrics.jsonl``.
    """
    vit = vit_config_for(index, inputs, cfg)
    data = build_train_data(index, inputs, keypoints, vit)
    if state is None:
        params = ModelParams.init(vit, seed=cfg.seed)
        state = TrainState(params, Adam(params, lr=cfg.learning_rate), rng_state=cfg.seed)
    else:
        check_compatible(state.params.arrays(), param_shapes(vit))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_json(out / "config.json", cfg.to_json())
        atomic_write_json(out / "vit.json", vit.to_json())
        atomic_write_bytes(out / "metrics.jsonl", b"")
        save_train_checkpoint(out / "checkpoint.ckpt", state)
    for _ in range(cfg.epochs):
        metrics = run_epoch(state, data, cfg)
        log.info("epoch %d: L=%.4f L_reid=%.4f L_ce=%.4f top1=%.3f", metrics["epoch"], metrics["L"],
                 metrics["L_reid"], metrics["L_ce"], metrics["train_top1"])
        if out is not None:
            save_train_checkpoint(out / "checkpoint.ckpt", state)
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(metrics) + "\n")
    return state
