"""Temporally coherent video synthesis.

Each frame is generated independently by the same image generator; the only
temporal coupling is the flow loss, which compares the optical flow of a
generated frame pair with the flow of the corresponding real pair.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core import TrainingAbort, ValidationError, one_hot_semantic
from .datakit import PairedSample, collate
from .dned import dned_forward, dned_loss, ensemble_edges, uniform_weights
from .edges import laplacian_edge_map, to_grayscale
from .flow import FlowConfig, get_flow_backend
from .synthesis import RandomFeatureExtractor, cg2real_objective
from .training import (
    TrainedModels,
    _adam,
    discriminator_step,
    generator_parts,
    load_checkpoint,
    save_checkpoint,
    write_loss_log,
)

log = logging.getLogger(__name__)


def flow_loss(x_t: torch.Tensor, x_t1: torch.Tensor, f_t: torch.Tensor, f_t1: torch.Tensor,
              cfg: FlowConfig | None = None, backend: str = "horn_schunck") -> torch.Tensor:
    """Per-pixel L1 norm of the real-pair minus fake-pair flow, averaged over pixels.

    The real flow is a constant; gradients reach ``f_t`` and ``f_t1``
    through the unrolled flow solver.
    """
    shapes = {tuple(t.shape) for t in (x_t, x_t1, f_t, f_t1)}
    if len(shapes) != 1:
        raise ValidationError(f"frames differ in shape: {sorted(shapes)}")
    estimate = get_flow_backend(backend)
    cfg = cfg or FlowConfig()
    with torch.no_grad():
        f_real = estimate(x_t, x_t1, cfg)
    f_fake = estimate(f_t, f_t1, cfg)
    return (f_real.detach() - f_fake).abs().sum(dim=-3).mean()


def video_objective(cg2real_total, flow, flow_weight: float = 1.0):
    """``cg2real_total + flow_weight * flow``."""
    if not (np.isfinite(float(torch.as_tensor(cg2real_total).detach()))
            and np.isfinite(float(torch.as_tensor(flow).detach()))):
        raise TrainingAbort("video objective has a non-finite part")
    return cg2real_total + flow_weight * flow


@dataclass
class VideoConfig:
    steps: int = 100
    flow_weight: float = 1.0
    lr: float = 2e-4
    seed: int = 0
    freeze_dned: bool = False
    flow: FlowConfig = field(default_factory=FlowConfig)
    flow_backend: str = "horn_schunck"

    def __post_init__(self):
        if isinstance(self.flow, dict):
            self.flow = FlowConfig(**self.flow)
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.flow_weight < 0:
            raise ValidationError("flow_weight must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _frame_inputs(models: TrainedModels, samples: Sequence[PairedSample]):
    labels, x_real, _ = collate(samples)
    s = one_hot_semantic(labels, models.config.n_classes)
    e_lap = laplacian_edge_map(x_real, models.config.laplacian)
    return s, x_real, e_lap


def _generate(models: TrainedModels, s, x_real, e_lap, weights=None):
    """Generator output plus the edge-detector loss for each frame in the batch."""
    dned_in = models.edge_input(x_real, e_lap)
    if models.uses_dned:
        sides = dned_forward(models.dned, dned_in)
        loss_e = dned_loss(sides, e_lap, uniform_weights(), balanced=models.config.dned_balanced)
        e_gen = ensemble_edges(sides, uniform_weights() if weights is None else weights).float()
    else:
        loss_e = torch.zeros(())
        e_gen = e_lap
    return models.generator(s, e_gen), loss_e


def pair_flow_loss(models: TrainedModels, pair: Sequence[PairedSample], cfg: VideoConfig) -> float:
    """Flow loss of one consecutive real pair against its generated pair."""
    with torch.no_grad():
        s, x_real, e_lap = _frame_inputs(models, pair)
        fake, _ = _generate(models, s, x_real, e_lap)
        return float(flow_loss(x_real[0], x_real[1], fake[0], fake[1], cfg.flow, cfg.flow_backend))


def mean_flow_loss(models: TrainedModels, sequences, cfg: VideoConfig) -> float:
    losses = [pair_flow_loss(models, clip[t : t + 2], cfg) for clip in sequences for t in range(len(clip) - 1)]
    return float(np.mean(losses))


def finetune_video(models: TrainedModels | str | Path, sequences: Sequence[Sequence[PairedSample]],
                   cfg: VideoConfig | None = None, seed: int | None = None,
                   out_dir: str | Path | None = None):
    """Fine-tune a pretrained CG2real model with the added flow loss.

    Per step one consecutive pair is drawn uniformly from ``sequences``; both
    frames go through the same generator independently (stacked as a batch
    of two, which is equivalent because normalisation is per sample).
    Returns ``(models, log_rows)``.
    """
    cfg = cfg or VideoConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if not isinstance(models, TrainedModels):
        path = Path(models)
        if not (path / "manifest.json").exists():
            raise FileNotFoundError(f"pretrained CG2real checkpoint not found at {path}")
        models = load_checkpoint(path)
    pairs = [(ci, t) for ci, clip in enumerate(sequences) for t in range(len(clip) - 1)]
    if not pairs:
        raise ValidationError("need at least one sequence with two or more frames")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    mcfg = models.config
    g, d, net = models.generator, models.discriminator, models.dned
    for m in (g, d, net):
        m.train()
    perceptual = RandomFeatureExtractor()
    opt_g = _adam(g.parameters(), cfg.lr, mcfg)
    opt_d = _adam(d.parameters(), cfg.lr, mcfg)
    opt_e = _adam(net.parameters(), mcfg.dned_lr, mcfg)
    train_dned = models.uses_dned and not cfg.freeze_dned

    rows = []
    for step in range(1, cfg.steps + 1):
        ci, t = pairs[int(rng.integers(len(pairs)))]
        s, x_real, e_lap = _frame_inputs(models, sequences[ci][t : t + 2])
        fake, loss_e = _generate(models, s, x_real, e_lap)
        if not train_dned:
            loss_e = loss_e.detach()

        loss_d, real_outs = discriminator_step(d, opt_d, s, x_real, fake, step)
        parts = generator_parts(d, perceptual, s, x_real, fake, real_outs, loss_e)
        cg2real = cg2real_objective(parts, mcfg.loss_weights)
        l_flow = flow_loss(x_real[0], x_real[1], fake[0], fake[1], cfg.flow, cfg.flow_backend)
        total = video_objective(cg2real, l_flow, cfg.flow_weight)

        opt_g.zero_grad(set_to_none=True)
        opt_e.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()
        if train_dned:
            opt_e.step()
        rows.append(
            {
                "step": step,
                "clip": ci,
                "frame": t,
                "loss_D": float(loss_d),
                "loss_G_adv": float(parts["loss_G_adv"].detach()),
                "fm": float(parts["fm"].detach()),
                "percep": float(parts["percep"].detach()),
                "dned": float(loss_e.detach()),
                "cg2real": float(cg2real.detach()),
                "flow": float(l_flow.detach()),
                "total": float(total.detach()),
            }
        )
    models.step += cfg.steps
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "logs").mkdir(parents=True, exist_ok=True)
        write_loss_log(rows, out_dir / "logs" / "video_loss.csv")
        save_checkpoint(models, out_dir / "checkpoints", extra={"video": cfg.to_dict()})
    return models, rows


@torch.no_grad()
def generate_frame(models: TrainedModels, semantic, source_edge: torch.Tensor, dned_input: torch.Tensor | None = None,
                   weights=None) -> torch.Tensor:
    """Generate one ``3 x H x W`` frame from its label map and source edge map.

    ``dned_input`` defaults to ``source_edge`` (the edge detector's input in
    ``dned_input='edge'`` mode).
    """
    s = one_hot_semantic(torch.as_tensor(np.asarray(semantic)), models.config.n_classes).unsqueeze(0)
    e = source_edge.unsqueeze(0).float()
    dned_in = e if dned_input is None else dned_input.unsqueeze(0).float()
    edges = models.generator_edges(dned_in, e, weights)
    return models.generator(s, edges)[0]


def generate_sequence(models: TrainedModels, frames: Sequence[PairedSample], weights=None) -> list[torch.Tensor]:
    """Generate every frame independently; no state is carried between frames."""
    return [generate_frame(models, f.semantic, f.source_edge, dned_input_for(models, f), weights) for f in frames]


def dned_input_for(models: TrainedModels, sample: PairedSample) -> torch.Tensor | None:
    """Test-time edge-detector input: ``None`` (reuse the source edge map) in
    ``dned_input='edge'`` mode, else the gray CG render (or image)."""
    if models.config.dned_input == "edge":
        return None
    return to_grayscale(sample.cg if sample.cg is not None else sample.image)
