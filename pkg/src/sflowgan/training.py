"""Two-phase CG2real training loop, checkpoints and loss logs.

Phase A (``epoch < warmup_epochs``) feeds the generator Laplacian edge maps
of the real image while the edge detector trains on its own loss. Phase B
feeds it the blended edge-detector output and optimises generator and edge
detector jointly on the combined objective.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import TrainingAbort, ValidationError, one_hot_semantic
from .datakit import PairedSample, augment, collate
from .dned import DnedNetwork, dned_forward, dned_loss, ensemble_edges, uniform_weights
from .edges import LaplacianConfig, laplacian_edge_map, to_grayscale
from .synthesis import (
    Discriminator,
    Generator,
    LossWeights,
    RandomFeatureExtractor,
    cg2real_objective,
    d_loss_from_outputs,
    fm_loss_from_outputs,
    g_adv_loss_from_outputs,
    perceptual_loss,
)

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "phase", "loss_D", "loss_G_adv", "fm", "percep", "dned", "total", "pixel_l1")


@dataclass
class TrainConfig:
    n_classes: int = 6
    resolution: tuple[int, int] = (64, 128)
    num_scales: int = 1
    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda3: float = 1.0
    warmup_epochs: int = 1
    epochs: int = 2
    batch_size: int = 1
    max_steps: int | None = None
    lr: float = 2e-4
    dned_lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    alpha: float = 3.0
    dned_input: str = "edge"
    dned_balanced: bool = False
    freeze_dned: bool = False
    laplacian_kernel: str = "four_neighbor"
    laplacian_threshold: float = 0.2
    gen_base: int = 32
    gen_down: int = 3
    gen_res: int = 4
    disc_base: int = 32
    dned_widths: tuple[int, ...] = (16, 32, 64, 128, 256, 256)
    flip: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        self.resolution = tuple(self.resolution)
        self.dned_widths = tuple(self.dned_widths)
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValidationError(f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}")
        if self.num_scales < 1:
            raise ValidationError("num_scales must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.dned_input not in ("edge", "image"):
            raise ValidationError(f"dned_input must be 'edge' or 'image', got {self.dned_input!r}")
        if not self.alpha > 0:
            raise ValidationError("alpha must be > 0")
        if self.lr <= 0 or self.dned_lr <= 0:
            raise ValidationError("learning rates must be > 0")
        self.loss_weights  # validates the lambdas
        self.laplacian

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    @property
    def laplacian(self) -> LaplacianConfig:
        return LaplacianConfig(self.laplacian_kernel, self.laplacian_threshold)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["resolution"] = list(self.resolution)
        d["dned_widths"] = list(self.dned_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class TrainedModels:
    generator: Generator
    discriminator: Discriminator
    dned: DnedNetwork
    config: TrainConfig
    step: int = 0
    epoch: int = 0
    uses_dned: bool = False

    def edge_input(self, x: torch.Tensor, edge: torch.Tensor) -> torch.Tensor:
        """What the edge detector sees for a real image ``x`` with Laplacian map ``edge``."""
        return edge if self.config.dned_input == "edge" else to_grayscale(x)

    def generator_edges(self, dned_in: torch.Tensor, laplacian: torch.Tensor, weights=None) -> torch.Tensor:
        if not self.uses_dned:
            return laplacian
        sides = dned_forward(self.dned, dned_in)
        return ensemble_edges(sides, uniform_weights() if weights is None else weights).float()


def build_models(cfg: TrainConfig) -> TrainedModels:
    torch.manual_seed(cfg.seed)
    g = Generator(cfg.n_classes, cfg.gen_base, cfg.gen_down, cfg.gen_res)
    d = Discriminator(cfg.n_classes, cfg.num_scales, cfg.disc_base)
    net = DnedNetwork(1, cfg.dned_widths)
    return TrainedModels(g, d, net, cfg)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(models: TrainedModels, directory: str | Path, extra: dict | None = None) -> Path:
    """Write parameter blobs plus ``manifest.json``; replaces ``directory`` atomically."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    torch.save(models.generator.state_dict(), tmp / "generator.pt")
    torch.save(models.discriminator.state_dict(), tmp / "discriminator.pt")
    torch.save(models.dned.state_dict(), tmp / "dned.pt")
    manifest = {
        "config": models.config.to_dict(),
        "step": models.step,
        "epoch": models.epoch,
        "uses_dned": models.uses_dned,
        "dned_widths": list(models.dned.widths),
        "input_size": list(models.config.resolution),
    }
    manifest.update(extra or {})
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    old = directory.with_name(directory.name + ".old")
    if directory.exists():
        directory.rename(old)
    tmp.rename(directory)
    if old.exists():
        shutil.rmtree(old)
    return directory


def load_checkpoint(directory: str | Path) -> TrainedModels:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    cfg = TrainConfig.from_dict(manifest["config"])
    models = build_models(cfg)
    models.generator.load_state_dict(torch.load(directory / "generator.pt", map_location="cpu"))
    models.discriminator.load_state_dict(torch.load(directory / "discriminator.pt", map_location="cpu"))
    models.dned.load_state_dict(torch.load(directory / "dned.pt", map_location="cpu"))
    models.step, models.epoch = manifest["step"], manifest["epoch"]
    models.uses_dned = manifest["uses_dned"]
    return models


def write_loss_log(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else list(LOG_FIELDS))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# --------------------------------------------------------------------------
# training


def _adam(params, lr, cfg):
    return torch.optim.Adam(params, lr=lr, betas=(cfg.beta1, cfg.beta2))


def _finite(name: str, value: torch.Tensor, step: int) -> None:
    if not math.isfinite(float(value.detach())):
        raise TrainingAbort(f"{name} is not finite at step {step}", part=name, step=step)


def discriminator_step(d, opt_d, s, x_real, x_fake, step: int = 0):
    """One discriminator update on ``x_fake.detach()``.

    Returns ``loss_D`` and the real-branch outputs, detached, for reuse as
    feature-matching targets.
    """
    real_outs = d(s, x_real)
    loss_d = d_loss_from_outputs(real_outs, d(s, x_fake.detach()))
    _finite("loss_D", loss_d, step)
    opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    opt_d.step()
    real_outs = [([f.detach() for f in feats], logit.detach()) for feats, logit in real_outs]
    return loss_d.detach(), real_outs


def generator_parts(d, perceptual, s, x_real, x_fake, real_outs, loss_e) -> dict:
    fake_outs = d(s, x_fake)
    return {
        "loss_G_adv": g_adv_loss_from_outputs(fake_outs),
        "fm": fm_loss_from_outputs(real_outs, fake_outs),
        "percep": perceptual_loss(perceptual, x_real, x_fake),
        "dned_loss": loss_e,
    }


def train_cg2real(cfg: TrainConfig, dataset: Sequence[PairedSample], seed: int | None = None,
                  out_dir: str | Path | None = None, models: TrainedModels | None = None,
                  perceptual: torch.nn.Module | None = None, callback=None):
    """Train generator, discriminator and edge detector; return ``(models, log_rows)``.

    With ``out_dir`` a checkpoint is written to ``out_dir/checkpoints`` at every
    epoch end (and every ``checkpoint_every`` steps) and the per-step loss log
    to ``out_dir/logs/loss.csv``. A non-finite loss raises
    :class:`TrainingAbort`; the last checkpoint written before it is kept.
    ``callback(step, models)`` runs after every generator step.
    """
    if not dataset:
        raise ValidationError("training dataset is empty")
    if seed is not None and seed != cfg.seed:
        cfg = dataclasses.replace(cfg, seed=seed)
    models = models or build_models(cfg)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    g, d, net = models.generator, models.discriminator, models.dned
    for m in (g, d, net):
        m.train()
    perceptual = perceptual or RandomFeatureExtractor()
    opt_g = _adam(g.parameters(), cfg.lr, cfg)
    opt_d = _adam(d.parameters(), cfg.lr, cfg)
    opt_e = _adam(net.parameters(), cfg.dned_lr, cfg)
    weights = cfg.loss_weights
    lap = cfg.laplacian
    a_train = uniform_weights()

    ckpt_dir = log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        (out_dir / "logs").mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "logs" / "loss.csv"

    rows: list[dict] = []
    step = 0
    n = len(dataset)
    try:
        for epoch in range(cfg.epochs):
            phase = "A" if epoch < cfg.warmup_epochs else "B"
            models.uses_dned = phase == "B"
            models.epoch = epoch
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
                if cfg.flip:
                    batch = [augment(s, rng) for s in batch]
                labels, x_real, _ = collate(batch)
                s = one_hot_semantic(labels, cfg.n_classes)
                e_lap = laplacian_edge_map(x_real, lap)
                dned_in = models.edge_input(x_real, e_lap)

                sides = dned_forward(net, dned_in)
                loss_e = dned_loss(sides, e_lap, a_train, balanced=cfg.dned_balanced)
                if phase == "A":
                    _finite("dned", loss_e, step)
                    opt_e.zero_grad(set_to_none=True)
                    loss_e.backward()
                    opt_e.step()
                    e_gen = e_lap
                    loss_e = loss_e.detach()
                else:
                    e_gen = ensemble_edges(sides, a_train).float()
                    if cfg.freeze_dned:
                        e_gen, loss_e = e_gen.detach(), loss_e.detach()

                x_fake = g(s, e_gen)

                loss_d, real_outs = discriminator_step(d, opt_d, s, x_real, x_fake, step)
                parts = generator_parts(d, perceptual, s, x_real, x_fake, real_outs, loss_e)
                try:
                    total = cg2real_objective(parts, weights)
                except TrainingAbort as exc:
                    exc.step = step
                    raise
                opt_g.zero_grad(set_to_none=True)
                opt_e.zero_grad(set_to_none=True)
                total.backward()
                opt_g.step()
                if phase == "B" and not cfg.freeze_dned:
                    opt_e.step()

                step += 1
                models.step = step
                rows.append(
                    {
                        "step": step,
                        "epoch": epoch,
                        "phase": phase,
                        "loss_D": float(loss_d),
                        "loss_G_adv": float(parts["loss_G_adv"].detach()),
                        "fm": float(parts["fm"].detach()),
                        "percep": float(parts["percep"].detach()),
                        "dned": float(loss_e.detach()),
                        "total": float(total.detach()),
                        "pixel_l1": float(F.l1_loss(x_fake.detach(), x_real)),
                    }
                )
                if callback is not None:
                    callback(step, models)
                if ckpt_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(models, ckpt_dir)
            if ckpt_dir:
                save_checkpoint(models, ckpt_dir)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    except TrainingAbort as exc:
        log.error("training aborted: %s", exc)
        if log_path:
            write_loss_log(rows, log_path)
        raise
    if log_path:
        write_loss_log(rows, log_path)
    return models, rows
