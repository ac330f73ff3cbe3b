"""Batch command-line entry points.

Every command except ``make-toy-data`` and ``grid`` works inside a run
directory ``<run root>/<timestamp>-<tag>/`` with ``config/``,
``checkpoints/``, ``logs/`` and ``samples/`` subdirectories. The run root is
``./runs`` unless ``SFLOWGAN_RUN_ROOT`` or ``--run-root`` says otherwise;
``--run-dir`` pins the exact directory.

Exit codes: 0 success, 2 usage error, 3 invalid configuration or inputs,
4 runtime failure (including training divergence).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml
from PIL import Image

from .core import TrainingAbort, ValidationError, denormalize_image, normalize_image
from .datakit import (
    DatasetManifest,
    class_colors,
    load_paired_dataset,
    load_sequences,
    synth_toy_dataset,
)
from .dned import sample_ensemble_weights
from .flow import FlowConfig
from .metrics import confusion_matrix, fid, fvd, get_embedder, write_report
from .training import TrainConfig, load_checkpoint, train_cg2real
from .video import VideoConfig, dned_input_for, finetune_video, generate_frame

log = logging.getLogger("sflowgan")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4
RUN_ROOT_ENV = "SFLOWGAN_RUN_ROOT"
RUN_SUBDIRS = ("config", "checkpoints", "logs", "samples")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# helpers


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise ValidationError(f"{p}: config must be a mapping")
    return data


def _overrides(args, mapping: dict[str, str]) -> dict:
    """Flag values the user actually set, keyed by config field."""
    return {field: getattr(args, dest) for dest, field in mapping.items() if getattr(args, dest) is not None}


def _reject_unknown(raw: dict, cls, what: str) -> None:
    unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValidationError(f"unknown {what} config keys: {', '.join(sorted(unknown))}")


def _make_run_dir(args, tag: str) -> Path:
    if args.run_dir:
        run = Path(args.run_dir)
    else:
        root = Path(args.run_root or os.environ.get(RUN_ROOT_ENV, "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run = root / f"{stamp}-{args.tag or tag}"
        n = 1
        while run.exists():
            run = root / f"{stamp}-{args.tag or tag}-{n}"
            n += 1
    for sub in RUN_SUBDIRS:
        (run / sub).mkdir(parents=True, exist_ok=True)
    return run


def _write_resolved(run: Path, command: str, resolved: dict) -> None:
    snapshot = {"command": command, **resolved}
    (run / "config" / "resolved.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True, default=str) + "\n")


def _checkpoint_dir(path: str) -> Path:
    p = Path(path)
    if (p / "manifest.json").exists():
        return p
    if (p / "checkpoints" / "manifest.json").exists():
        return p / "checkpoints"
    raise FileNotFoundError(f"no checkpoint found at {p}")


def _save_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(arr).save(path, optimize=False)


def _edge_png(edge: torch.Tensor) -> np.ndarray:
    return (edge[0].detach().clamp(0, 1).double() * 255).round().to(torch.uint8).numpy()


def _colorize(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return class_colors(n_classes).astype(np.uint8)[labels]


def _manifest(args) -> DatasetManifest:
    return DatasetManifest.load(args.data, args.split)


# --------------------------------------------------------------------------
# commands


def cmd_make_toy_data(args) -> int:
    motion = (args.clips, args.frames) if args.clips else None
    m = synth_toy_dataset(args.out, seed=args.seed, n_samples=args.n, resolution=tuple(args.resolution),
                          n_classes=args.classes, motion=motion, split=args.split)
    print(f"wrote toy dataset to {m.root} ({args.split})")
    return EXIT_OK


TRAIN_FLAGS = {
    "epochs": "epochs", "warmup_epochs": "warmup_epochs", "seed": "seed", "num_scales": "num_scales",
    "lambda1": "lambda1", "lambda2": "lambda2", "lambda3": "lambda3", "batch_size": "batch_size",
    "max_steps": "max_steps", "lr": "lr", "alpha": "alpha", "dned_input": "dned_input",
}


def cmd_train(args) -> int:
    manifest = _manifest(args)
    raw = {**_load_config_file(args.config), **_overrides(args, TRAIN_FLAGS)}
    for key, value in (("n_classes", manifest.n_classes), ("resolution", list(manifest.resolution))):
        if key in raw and list(np.atleast_1d(raw[key])) != list(np.atleast_1d(value)):
            raise ValidationError(f"config {key}={raw[key]} conflicts with dataset {key}={value}")
        raw[key] = value
    cfg = TrainConfig.from_dict(raw)
    dataset = load_paired_dataset(manifest)
    if not dataset:
        raise ValidationError(f"no training samples in {manifest.split_dir}")
    run = _make_run_dir(args, "train")
    _write_resolved(run, "train", {"data": str(manifest.root), "split": manifest.split, "train": cfg.to_dict()})
    log.info("training %d samples into %s", len(dataset), run)
    train_cg2real(cfg, dataset, out_dir=run)
    print(run)
    return EXIT_OK


VIDEO_FLAGS = {"steps": "steps", "flow_weight": "flow_weight", "lr": "lr", "seed": "seed"}
FLOW_FLAGS = {"flow_smoothness": "smoothness", "flow_iterations": "iterations", "flow_levels": "pyramid_levels"}


def cmd_video_finetune(args) -> int:
    ckpt = _checkpoint_dir(args.checkpoint)
    raw = _load_config_file(args.config)
    flow = {**raw.pop("flow", {}), **_overrides(args, FLOW_FLAGS)}
    _reject_unknown(raw, VideoConfig, "video")
    _reject_unknown(flow, FlowConfig, "flow")
    cfg = VideoConfig(**{**raw, **_overrides(args, VIDEO_FLAGS), "flow": FlowConfig(**flow)})
    clips = load_sequences(_manifest(args))
    if not clips:
        raise ValidationError(f"no clips under {args.data}/{args.split}")
    run = _make_run_dir(args, "video")
    _write_resolved(run, "video-finetune", {"checkpoint": str(ckpt), "data": args.data, "split": args.split,
                                             "video": cfg.to_dict()})
    finetune_video(ckpt, clips, cfg, out_dir=run)
    print(run)
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.edge_samples < 1:
        raise ValidationError("--edge-samples must be >= 1")
    if not args.alpha > 0:
        raise ValidationError("--alpha must be > 0")
    ckpt = _checkpoint_dir(args.checkpoint)
    models = load_checkpoint(ckpt)
    models.generator.eval()
    models.dned.eval()
    manifest = _manifest(args)
    edge_source = args.edge_source
    samples = load_paired_dataset(manifest, edge_source=edge_source, laplacian=models.config.laplacian)
    if not samples:
        raise ValidationError(f"no inputs in {manifest.split_dir}")
    if args.edge_samples > 1 and not models.uses_dned:
        log.warning("checkpoint never fed the edge detector to the generator; variants will be identical")
    weights = [None] if args.edge_samples == 1 else [
        sample_ensemble_weights(args.alpha, seed=args.seed * 1000 + k) for k in range(args.edge_samples)
    ]
    run = _make_run_dir(args, "generate")
    _write_resolved(run, "generate", {
        "checkpoint": str(ckpt), "data": str(manifest.root), "split": manifest.split, "seed": args.seed,
        "edge_samples": args.edge_samples, "alpha": args.alpha, "edge_source": edge_source,
        "weights": [None if w is None else w.tolist() for w in weights],
    })
    out = run / "samples"
    for sample in samples:
        dned_in = dned_input_for(models, sample)
        for k, w in enumerate(weights):
            suffix = "" if len(weights) == 1 else f"_k{k}"
            img = generate_frame(models, sample.semantic, sample.source_edge, dned_in, w)
            _save_png(denormalize_image(img), out / f"{sample.name}{suffix}.png")
            if args.dump_edges:
                e = sample.source_edge.unsqueeze(0)
                edges = models.generator_edges(e if dned_in is None else dned_in.unsqueeze(0), e, w)
                _save_png(_edge_png(edges[0]), out / f"{sample.name}{suffix}_edge.png")
    print(run)
    return EXIT_OK


def _read_image_dir(d: Path) -> dict[str, torch.Tensor]:
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png" and p.is_file())
    out = {}
    for p in files:
        with Image.open(p) as im:
            out[p.stem] = normalize_image(np.array(im.convert("RGB")))
    return out


def _read_label_dir(d: Path) -> dict[str, np.ndarray]:
    out = {}
    for p in sorted(q for q in d.iterdir() if q.suffix.lower() == ".png"):
        with Image.open(p) as im:
            if im.mode not in ("P", "L", "I", "I;16"):
                raise ValidationError(f"{p}: label maps must be indexed or single-channel, got mode {im.mode}")
            out[p.stem] = np.array(im).astype(np.int64)
    return out


def _matched(real: dict, fake: dict, what: str):
    if set(real) != set(fake):
        missing = sorted(set(real) ^ set(fake))
        raise ValidationError(f"{what}: real and fake sets differ, unmatched: {', '.join(missing[:5])}")
    names = sorted(real)
    return [real[n] for n in names], [fake[n] for n in names]


def cmd_eval(args) -> int:
    real_dir, fake_dir = Path(args.real), Path(args.fake)
    for d in (real_dir, fake_dir):
        if not d.is_dir():
            raise ValidationError(f"not a directory: {d}")
    emb = get_embedder(args.embedder, **({"weights_path": args.embedder_weights} if args.embedder_weights else {}))
    real, fake = _matched(_read_image_dir(real_dir), _read_image_dir(fake_dir), "images")
    fvd_score = None
    real_clips = sorted(p for p in real_dir.iterdir() if p.is_dir())
    if real_clips:
        fake_clip_dirs = {p.name: p for p in fake_dir.iterdir() if p.is_dir()}
        rc, fc = [], []
        for c in real_clips:
            if c.name not in fake_clip_dirs:
                raise ValidationError(f"clip {c.name} missing from {fake_dir}")
            r, f = _matched(_read_image_dir(c), _read_image_dir(fake_clip_dirs[c.name]), f"clip {c.name}")
            rc.append(torch.stack(r))
            fc.append(torch.stack(f))
            real += r
            fake += f
        if len(rc) >= 2:
            fvd_score = fvd(rc, fc, emb)
    fid_score = fid(real, fake, emb) if real else None
    cm = None
    if args.labels or args.pred:
        if not (args.labels and args.pred and args.n_classes):
            raise ValidationError("--labels, --pred and --n-classes must be given together")
        gt, pred = _matched(_read_label_dir(Path(args.labels)), _read_label_dir(Path(args.pred)), "labels")
        cm = sum(confusion_matrix(g, p, args.n_classes) for g, p in zip(gt, pred))
    run = _make_run_dir(args, "eval")
    _write_resolved(run, "eval", {"real": str(real_dir), "fake": str(fake_dir), "embedder": args.embedder,
                                  "labels": args.labels, "pred": args.pred, "n_classes": args.n_classes})
    out = Path(args.out) if args.out else run / "logs" / "metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, fid_score=fid_score, fvd_score=fvd_score, cm=cm,
                 embedder_name=getattr(emb, "name", args.embedder), n_samples=len(real))
    print(out)
    return EXIT_OK


def cmd_grid(args) -> int:
    ckpt = _checkpoint_dir(args.checkpoint)
    models = load_checkpoint(ckpt)
    models.generator.eval()
    models.dned.eval()
    manifest = _manifest(args)
    samples = load_paired_dataset(manifest, edge_source=args.edge_source, laplacian=models.config.laplacian)
    if not samples:
        raise ValidationError(f"no inputs in {manifest.split_dir}")
    samples = samples[: args.n]
    rows = []
    for s in samples:
        dned_in = dned_input_for(models, s)
        fake = generate_frame(models, s.semantic, s.source_edge, dned_in)
        edge = np.repeat(_edge_png(s.source_edge)[:, :, None], 3, axis=2)
        rows.append(np.concatenate([_colorize(s.semantic, manifest.n_classes), edge,
                                    denormalize_image(fake), denormalize_image(s.image)], axis=1))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _save_png(np.concatenate(rows, axis=0), out)
    print(out)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_run_args(p):
    p.add_argument("--run-root", help=f"directory holding run directories (default ${RUN_ROOT_ENV} or ./runs)")
    p.add_argument("--run-dir", help="exact run directory to use")
    p.add_argument("--tag", help="suffix for the run directory name")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sflowgan", description="Semantic-map-to-image synthesis with edge and flow guidance.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-toy-data", help="write a procedural paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=8, help="number of still pairs")
    p.add_argument("--resolution", type=int, nargs=2, default=(64, 128), metavar=("H", "W"))
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--clips", type=int, default=0, help="number of motion clips")
    p.add_argument("--frames", type=int, default=4, help="frames per clip")
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_make_toy_data)

    p = sub.add_parser("train", help="train the image model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--config", help="YAML or JSON file of training settings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-scales", "--lm", type=int, dest="num_scales", help="discriminator scales")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--dned-input", choices=("edge", "image"))
    _add_run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("video-finetune", help="fine-tune a trained model with the flow loss")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory or train run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--config", help="YAML or JSON file of video settings")
    p.add_argument("--steps", type=int)
    p.add_argument("--flow-weight", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--flow-smoothness", type=float)
    p.add_argument("--flow-iterations", type=int)
    p.add_argument("--flow-levels", type=int)
    _add_run_args(p)
    p.set_defaults(func=cmd_video_finetune)

    p = sub.add_parser("generate", help="generate images for every input of a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--edge-source", default="cg", choices=("cg", "image"))
    p.add_argument("--edge-samples", type=int, default=1, help="variants per input (Dirichlet edge weights)")
    p.add_argument("--alpha", type=float, default=3.0, help="Dirichlet concentration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-edges", action="store_true", help="also write the generator's edge maps")
    _add_run_args(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="FID / FVD / segmentation scores as a JSON report")
    p.add_argument("--real", required=True, help="directory of real images (clip subdirectories enable FVD)")
    p.add_argument("--fake", required=True, help="directory of generated images with matching names")
    p.add_argument("--embedder", default="random_conv")
    p.add_argument("--embedder-weights")
    p.add_argument("--labels", help="ground-truth label maps")
    p.add_argument("--pred", help="label maps predicted by an external segmenter on the fake images")
    p.add_argument("--n-classes", type=int)
    p.add_argument("--out", help="report path (default <run>/logs/metrics.json)")
    _add_run_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="label | edge | generated | real montage")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--edge-source", default="cg", choices=("cg", "image"))
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)
    return parser


def run_cli(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())
