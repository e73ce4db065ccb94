"""Command-line entry point: ``kpreid {synth,propagate,train,eval,heatmap,ablate}``.

Machine-readable JSON goes to stdout, progress and errors to stderr. Exit
status is 0 on success, 1 for invalid input or configuration and 2 for I/O
failures such as missing files.

A data directory holds ``manifest.json``, ``ref_keypoints.json`` and, after
``propagate``, a ``propagated/`` directory with one keypoint file per image.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .ablation import DEFAULT_COUNTS, PROTOCOLS, run_protocol, write_result
from .coords import pixel_to_cell
from .errors import ValidationError
from .featureio import load_keypoints, load_manifest
from .model import load_config
from .propagation import (
    export_heatmap,
    load_propagated,
    normalize_features,
    propagate,
    similarity_map,
    write_propagation,
)
from .retrieval import evaluate
from .synthetic import SynthGroundTruth, generate_synthetic
from .training import TrainConfig, load_train_config, load_train_checkpoint, train

log = logging.getLogger("kpreid")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_inputs(index, records=None):
    return {r.image_id: index.load_inputs(r) for r in (records if records is not None else index.images)}


def _load_keypoints_for(data_dir: Path, index, needed: bool):
    if not needed:
        return None
    prop = data_dir / "propagated"
    if not prop.is_dir():
        raise ValidationError(f"{prop} not found; run `kpreid propagate` first (needed when mode != none)")
    ref = load_keypoints(data_dir / "ref_keypoints.json")
    return load_propagated(prop, index, ref)


def _write_heatmaps(index, ref, target_id: str, out: Path) -> list[Path]:
    """One PGM similarity map per reference keypoint against one target image."""
    ref_rec, tgt_rec = index.record(ref.image_id), index.record(target_id)
    ref_hat = normalize_features(index.load_features(ref_rec))
    tgt_hat = normalize_features(index.load_features(tgt_rec))
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for kp in ref.keypoints:
        xf, yf = pixel_to_cell(kp.x, kp.y, ref_rec.image_width, ref_rec.image_height,
                               ref_hat.shape[2], ref_hat.shape[1])
        path = out / f"{target_id}_kp{kp.category}.pgm"
        export_heatmap(similarity_map(ref_hat[:, yf, xf], tgt_hat), path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    ds = generate_synthetic(
        args.seed,
        n_identities=args.identities,
        images_per_identity=args.images_per_id,
        channels=args.channels,
        grid_height=args.grid,
        grid_width=args.grid,
        n_keypoints=args.keypoints,
        deformation_kinds=tuple(args.deformations.split(",")),
        code_vocab=args.code_vocab or None,
        code_min_distance=args.code_min_distance,
    )
    out = ds.write(args.out_dir)
    _emit({"out_dir": str(out), "images": len(ds.index.images), "noise_bound": ds.truth.noise_bound,
           "reference": ds.reference.image_id})
    return 0


def cmd_propagate(args) -> int:
    index = load_manifest(args.manifest)
    ref = load_keypoints(args.ref_keypoints)
    result = propagate(ref.image_id, ref, index, workers=args.workers)
    out = write_propagation(args.out_dir, result, ref.image_id)
    summary = {"out_dir": str(out), "reference": ref.image_id, "images": len(result)}
    if args.heatmaps:
        summary["heatmaps"] = sum(len(_write_heatmaps(index, ref, image_id, out / "heatmaps")) for image_id in result)
    if args.ground_truth:
        with open(args.ground_truth, encoding="utf-8") as fh:
            truth = SynthGroundTruth.from_json(json.load(fh))
        total = hits = 0
        for image_id, entries in result.items():
            want = truth.cells[image_id]
            got = [(e.cell[0], e.cell[1], e.category) for e in entries]
            total += len(want)
            hits += sum(a == b for a, b in zip(got, want))
        summary["recovery_rate"] = hits / total if total else 1.0
        print(f"cell-exact recovery: {hits}/{total} = {summary['recovery_rate']:.4f}", file=sys.stderr)
    _emit(summary)
    return 0


def _train_config(args) -> TrainConfig:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    obj = cfg.to_json()
    if args.epochs is not None:
        obj["epochs"] = args.epochs
    if args.mode is not None:
        obj["mode"] = args.mode
    if args.seed is not None:
        obj["seed"] = args.seed
    return TrainConfig.from_json(obj)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data_dir = Path(args.data_dir)
    index = load_manifest(data_dir / "manifest.json")
    keypoints = _load_keypoints_for(data_dir, index, cfg.mode != "none")
    inputs = _load_inputs(index, index.split("train"))
    state = train(index, inputs, keypoints, cfg, out_dir=args.out_dir)
    _emit({"out_dir": str(args.out_dir), "epochs": len(state.history), "step": state.step,
           "first": state.history[0] if state.history else None,
           "final": state.history[-1] if state.history else None})
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    vit = load_config(args.config or ckpt.parent / "vit.json")
    cfg_path = ckpt.parent / "config.json"
    cfg = load_train_config(cfg_path) if cfg_path.exists() else TrainConfig(mode=vit.mode)
    state = load_train_checkpoint(ckpt, vit, cfg)
    data_dir = Path(args.data_dir)
    index = load_manifest(data_dir / "manifest.json")
    keypoints = _load_keypoints_for(data_dir, index, vit.mode != "none")
    records = index.split(args.split)
    report = evaluate(state.params, index, _load_inputs(index, records), keypoints, split=args.split)
    _emit(report.to_json())
    return 0


def cmd_heatmap(args) -> int:
    index = load_manifest(args.manifest)
    ref = load_keypoints(args.ref_keypoints)
    _emit({"heatmaps": [str(p) for p in _write_heatmaps(index, ref, args.image_id, Path(args.out_dir))]})
    return 0


def cmd_ablate(args) -> int:
    if args.protocol not in PROTOCOLS:
        raise ValidationError(f"unknown protocol {args.protocol!r}; choose from {', '.join(PROTOCOLS)}")
    if args.seeds < 1:
        raise ValidationError("--seeds must be >= 1")
    counts = [int(c) for c in args.counts.split(",")]
    result = run_protocol(args.protocol, list(range(args.seed_offset, args.seed_offset + args.seeds)),
                          points=args.points, counts=counts, epochs=args.epochs,
                          progress=lambda m: print(m, file=sys.stderr))
    json_path, txt_path = write_result(result, args.out_dir)
    sys.stderr.write(result.table())
    _emit({**result.to_json(), "json": str(json_path), "table": str(txt_path)})
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kpreid", description="Keypoint propagation and keypoint-embedding re-identification.")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset with known keypoint correspondences")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--identities", type=int, default=10)
    s.add_argument("--images-per-id", type=int, default=20)
    s.add_argument("--channels", type=int, default=8)
    s.add_argument("--grid", type=int, default=4, help="feature grid is GRID x GRID cells")
    s.add_argument("--keypoints", type=int, default=3)
    s.add_argument("--code-vocab", type=int, default=4,
                   help="codes per keypoint category; 0 draws an independent code per identity")
    s.add_argument("--code-min-distance", type=int, default=2,
                   help="identities differ in at least this many keypoint codes")
    s.add_argument("--deformations", default="flip,translation,permutation")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("propagate", help="propagate reference keypoints to every image")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ref-keypoints", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--heatmaps", action="store_true", help="also write one PGM similarity map per keypoint and image")
    s.add_argument("--ground-truth", help="ground_truth.json to score cell-exact recovery against")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_propagate)

    s = sub.add_parser("train", help="train a ViT on a data directory")
    s.add_argument("--config", help="training config JSON")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--mode")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="closed-set top-1 retrieval on the test split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--config", help="ViT config JSON (default: vit.json next to the checkpoint)")
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("heatmap", help="export similarity heatmaps for one target image")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ref-keypoints", required=True)
    s.add_argument("--image-id", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("ablate", help="run an ablation protocol over seeds")
    s.add_argument("--protocol", required=True, help=" | ".join(PROTOCOLS))
    s.add_argument("--seeds", type=int, default=5, help="number of seeds (0..N-1 plus --seed-offset)")
    s.add_argument("--seed-offset", type=int, default=0)
    s.add_argument("--points", type=int, default=1, help="points per image for random-vs-keypoints")
    s.add_argument("--counts", default=",".join(map(str, DEFAULT_COUNTS)), help="keypoint counts for num-keypoints")
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
