"""Closed-set query/gallery retrieval on [CLS] embeddings.

Every test image is used once as the query; the gallery is every other test
image. The top-ranked gallery image (cosine similarity, ties by image_id)
counts as a true positive if it shares the query's identity and as a false
negative otherwise. No query can be a negative case under this protocol, so
TN = FP = 0 and accuracy = (TP + TN) / (TP + TN + FP + FN) is the top-1 rate.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ProtocolError
from .featureio import DatasetIndex, FeatureMap, KeypointSet
from .model import ModelParams, forward_batch, keypoint_mask, prepare_input

PROTOCOL_NOTE = "closed-set leave-one-out top-1; TN and FP are structurally zero"


@dataclass(frozen=True)
class EmbeddingEntry:
    image_id: str
    identity: str
    z: np.ndarray


@dataclass
class EvalReport:
    accuracy: float
    counts: dict[str, int]
    per_query: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "counts": dict(self.counts),
            "per_query": list(self.per_query),
            "protocol": PROTOCOL_NOTE,
        }


def _unit(z: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    return np.where(n > eps, z / np.maximum(n, eps), 0.0)


def cosine_similarity(zq, zg, eps: float = 1e-8) -> float:
    """Cosine of the angle between two embeddings; 0 if either is (near) zero."""
    return float(np.dot(_unit(zq, eps), _unit(zg, eps)))


def rank_gallery(query: EmbeddingEntry, gallery: Sequence[EmbeddingEntry]) -> list[tuple[EmbeddingEntry, float]]:
    """Gallery entries (minus the query itself) by descending similarity, ties by image_id."""
    pool = [g for g in gallery if g.image_id != query.image_id]
    if not pool:
        raise ProtocolError(f"empty gallery for query {query.image_id!r}")
    scores = _unit(np.stack([g.z for g in pool])) @ _unit(query.z)
    order = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i].image_id))
    return [(pool[i], float(scores[i])) for i in order]


def evaluate_embeddings(entries: Sequence[EmbeddingEntry]) -> EvalReport:
    entries = sorted(entries, key=lambda e: e.image_id)
    if len(entries) < 2:
        raise ProtocolError("need at least two test images")
    counts = Counter(e.identity for e in entries)
    for ident, n in sorted(counts.items()):
        if n < 2:
            raise ProtocolError(f"identity {ident!r} has a single test image; it cannot be matched")
    unit = _unit(np.stack([e.z for e in entries]))
    ids = [e.image_id for e in entries]
    tp = fn = 0
    per_query = []
    for qi, q in enumerate(entries):
        scores = unit @ unit[qi]
        best = min((j for j in range(len(entries)) if j != qi), key=lambda j: (-scores[j], ids[j]))
        correct = entries[best].identity == q.identity
        tp += correct
        fn += not correct
        per_query.append({"query_id": q.image_id, "top1_id": ids[best], "correct": bool(correct)})
    c = {"TP": tp, "TN": 0, "FP": 0, "FN": fn}
    acc = (c["TP"] + c["TN"]) / (c["TP"] + c["TN"] + c["FP"] + c["FN"])
    return EvalReport(acc, c, per_query)


def embed(params: ModelParams, index: DatasetIndex, records, inputs: Mapping[str, FeatureMap],
          keypoints: Mapping[str, KeypointSet] | None = None, batch_size: int = 64) -> list[EmbeddingEntry]:
    cfg = params.config
    records = list(records)
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        x = np.stack([prepare_input(inputs[r.image_id], r, cfg) for r in chunk])
        masks = None
        if cfg.mode != "none":
            masks = np.stack([keypoint_mask(keypoints.get(r.image_id) if keypoints else None, cfg) for r in chunk])
        z = forward_batch(params, x, masks).data
        out.extend(EmbeddingEntry(r.image_id, r.identity, z[i].copy()) for i, r in enumerate(chunk))
    return out


def evaluate(params: ModelParams, index: DatasetIndex, inputs: Mapping[str, FeatureMap],
             keypoints: Mapping[str, KeypointSet] | None = None, split: str = "test") -> EvalReport:
    records = sorted(index.split(split), key=lambda r: r.image_id)
    return evaluate_embeddings(embed(params, index, records, inputs, keypoints))
