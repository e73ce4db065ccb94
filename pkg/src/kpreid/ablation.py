"""Ablation protocols on keypoint-discriminative synthetic data.

Each protocol trains one model per (seed, arm), evaluates test top-1 with the
retrieval protocol and reports per-seed accuracies plus the median and mean
per arm.

* ``mode-compare``: the same data and keypoints under mode none / kpe / ckpe.
* ``random-vs-keypoints``: ckpe with the first ``points`` propagated keypoints
  versus the same number of uniformly random points per image.
* ``num-keypoints``: ckpe with the first N keypoint categories annotated, for
  N in ``counts``, on data that carries ``max(counts)`` keypoints.
"""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ValidationError
from .featureio import Keypoint, KeypointSet, atomic_write_bytes, atomic_write_json
from .propagation import propagate, to_keypoint_set
from .retrieval import evaluate
from .synthetic import SyntheticDataset, generate_synthetic
from .training import TrainConfig, train

log = logging.getLogger(__name__)

PROTOCOLS = ("mode-compare", "random-vs-keypoints", "num-keypoints")
DISCRIMINATIVE_DATA: dict = {}  # generate_synthetic defaults are already keypoint-discriminative
DEFAULT_COUNTS = (1, 3, 6, 10)


@dataclass
class AblationResult:
    protocol: str
    arms: list[str]
    seeds: list[int]
    accuracy: dict[str, list[float]] = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def median(self, arm: str) -> float:
        return statistics.median(self.accuracy[arm])

    def mean(self, arm: str) -> float:
        return statistics.fmean(self.accuracy[arm])

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "seeds": list(self.seeds),
            "arms": list(self.arms),
            "accuracy": {a: list(v) for a, v in self.accuracy.items()},
            "median": {a: self.median(a) for a in self.arms},
            "mean": {a: self.mean(a) for a in self.arms},
            "settings": self.settings,
        }

    def table(self) -> str:
        width = max(len(a) for a in self.arms + ["arm"])
        head = f"{'arm':<{width}}  " + "  ".join(f"s{s:<5}" for s in self.seeds) + "  median  mean"
        lines = [f"protocol: {self.protocol}", head, "-" * len(head)]
        for a in self.arms:
            accs = "  ".join(f"{v:<6.3f}" for v in self.accuracy[a])
            lines.append(f"{a:<{width}}  {accs}  {self.median(a):.3f}   {self.mean(a):.3f}")
        return "\n".join(lines) + "\n"


def propagated_keypoints(ds: SyntheticDataset) -> dict[str, KeypointSet]:
    res = propagate(ds.reference.image_id, ds.reference, ds.index, ds.features)
    out = {k: to_keypoint_set(k, v) for k, v in res.items()}
    out[ds.reference.image_id] = ds.reference
    return out


def first_categories(kps: dict[str, KeypointSet], n: int) -> dict[str, KeypointSet]:
    return {k: KeypointSet(k, [p for p in v.keypoints if p.category < n]) for k, v in kps.items()}


def random_points(ds: SyntheticDataset, n: int, seed: int) -> dict[str, KeypointSet]:
    """``n`` uniformly random pixels per image, labelled with categories 0..n-1."""
    rng = np.random.default_rng([seed, 0x5EED])
    out = {}
    for rec in ds.index.images:
        xs = rng.integers(rec.image_width, size=n)
        ys = rng.integers(rec.image_height, size=n)
        out[rec.image_id] = KeypointSet(rec.image_id, [Keypoint(int(x), int(y), c) for c, (x, y) in enumerate(zip(xs, ys))])
    return out


def _score(ds: SyntheticDataset, kps, cfg: TrainConfig) -> float:
    state = train(ds.index, ds.inputs, kps, cfg)
    return evaluate(state.params, ds.index, ds.inputs, kps).accuracy


def run_protocol(protocol: str, seeds: Sequence[int], points: int = 1, counts: Sequence[int] = DEFAULT_COUNTS,
                 epochs: int = 50, data_kwargs: dict | None = None, train_overrides: dict | None = None,
                 progress: Callable[[str], None] | None = None) -> AblationResult:
    if protocol not in PROTOCOLS:
        raise ValidationError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    if not seeds:
        raise ValidationError("need at least one seed")
    data = {**DISCRIMINATIVE_DATA, **(data_kwargs or {})}
    extra = dict(train_overrides or {})
    if protocol == "num-keypoints":
        counts = sorted(set(int(c) for c in counts))
        if counts[0] < 1:
            raise ValidationError("keypoint counts must be >= 1")
        data["n_keypoints"] = counts[-1]
        arms = [f"n={c}" for c in counts]
    elif protocol == "random-vs-keypoints":
        data.setdefault("n_keypoints", max(3, points))
        if not 1 <= points <= data["n_keypoints"]:
            raise ValidationError(f"--points must lie in [1, {data['n_keypoints']}]")
        arms = [f"keypoints-{points}", f"random-{points}"]
    else:
        arms = ["none", "kpe", "ckpe"]

    result = AblationResult(protocol, arms, [int(s) for s in seeds], {a: [] for a in arms},
                            {"epochs": epochs, "data": data, "train": extra, "points": points})
    for seed in result.seeds:
        ds = generate_synthetic(seed, **data)
        kps = propagated_keypoints(ds)
        for arm in arms:
            if protocol == "mode-compare":
                acc = _score(ds, kps, TrainConfig(seed=seed, epochs=epochs, mode=arm, **extra))
            elif protocol == "random-vs-keypoints":
                chosen = first_categories(kps, points) if arm.startswith("keypoints") else random_points(ds, points, seed)
                acc = _score(ds, chosen, TrainConfig(seed=seed, epochs=epochs, mode="ckpe", **extra))
            else:
                n = int(arm[2:])
                acc = _score(ds, first_categories(kps, n), TrainConfig(seed=seed, epochs=epochs, mode="ckpe", **extra))
            result.accuracy[arm].append(acc)
            msg = f"{protocol} seed={seed} {arm}: top-1 {acc:.3f}"
            log.info(msg)
            if progress:
                progress(msg)
    return result


def write_result(result: AblationResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"ablation_{result.protocol}"
    atomic_write_json(out / f"{stem}.json", result.to_json())
    atomic_write_bytes(out / f"{stem}.txt", result.table().encode("utf-8"))
    return out / f"{stem}.json", out / f"{stem}.txt"
