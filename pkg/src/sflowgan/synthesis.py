"""Conditional GAN core: generator, multi-scale patch discriminator, the
perceptual feature extractor and every image-domain loss term."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import TrainingAbort, ValidationError, batched, check_aligned

LOSS_PARTS = ("loss_G_adv", "fm", "percep", "dned_loss")


class ResnetBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Encoder / residual trunk / decoder mapping ``[one-hot s, e]`` to RGB.

    Input has ``n_classes + 1`` channels; output is a tanh image of the same
    spatial size. ``H`` and ``W`` must be divisible by ``2 ** n_down``.
    """

    def __init__(self, n_classes: int, base: int = 32, n_down: int = 3, n_res: int = 4):
        super().__init__()
        self.n_classes = n_classes
        self.base, self.n_down, self.n_res = base, n_down, n_res
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(n_classes + 1, base, 7), nn.InstanceNorm2d(base), nn.ReLU(True)]
        ch = base
        for _ in range(n_down):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(ch * 2), nn.ReLU(True)]
            ch *= 2
        layers += [ResnetBlock(ch) for _ in range(n_res)]
        for _ in range(n_down):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, 3, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, s: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        return self.model(torch.cat([s, e], dim=1))


def generator_forward(g: Generator, s: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """Generate an image from a one-hot semantic tensor and an edge map."""
    s_b, squeeze = batched(s)
    e_b, _ = batched(e)
    if s_b.shape[1] != g.n_classes:
        raise ValidationError(f"generator expects {g.n_classes} semantic channels, got {s_b.shape[1]}")
    if e_b.shape[1] != 1:
        raise ValidationError(f"edge map must have one channel, got {e_b.shape[1]}")
    check_aligned(s_b, e_b)
    if s_b.shape[0] != e_b.shape[0]:
        raise ValidationError("semantic and edge batches differ in size")
    factor = 2 ** g.n_down
    if s_b.shape[-2] % factor or s_b.shape[-1] % factor:
        raise ValidationError(f"spatial size must be divisible by {factor}")
    out = g(s_b, e_b)
    return out[0] if squeeze else out


class PatchDiscriminator(nn.Module):
    """Four conv blocks (the feature taps) followed by a 1-channel logit conv."""

    def __init__(self, in_channels: int, base: int = 32, n_layers: int = 4):
        super().__init__()
        kw, pad = 4, 2
        blocks = [nn.Sequential(nn.Conv2d(in_channels, base, kw, stride=2, padding=pad), nn.LeakyReLU(0.2, True))]
        ch = base
        for i in range(1, n_layers):
            stride = 2 if i < n_layers - 1 else 1
            nxt = min(ch * 2, 512)
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(ch, nxt, kw, stride=stride, padding=pad),
                    nn.InstanceNorm2d(nxt),
                    nn.LeakyReLU(0.2, True),
                )
            )
            ch = nxt
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(ch, 1, kw, stride=1, padding=pad)

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats, self.head(x)


class Discriminator(nn.Module):
    """``num_scales`` patch discriminators on a 2x average-pool pyramid.

    ``forward(s, x)`` returns one ``(features, logits)`` pair per scale,
    finest first.
    """

    def __init__(self, n_classes: int, num_scales: int = 1, base: int = 32, n_layers: int = 4):
        super().__init__()
        if num_scales < 1 or n_layers < 1:
            raise ValidationError("discriminator needs at least one scale and one layer")
        self.n_classes = n_classes
        self.num_scales = num_scales
        self.base, self.n_layers = base, n_layers
        self.scales = nn.ModuleList(PatchDiscriminator(n_classes + 3, base, n_layers) for _ in range(num_scales))
        self.downsample = nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)

    def forward(self, s: torch.Tensor, x: torch.Tensor):
        inp = torch.cat([s, x], dim=1)
        outs = []
        for i, d in enumerate(self.scales):
            if i:
                inp = self.downsample(inp)
            outs.append(d(inp))
        return outs


# --------------------------------------------------------------------------
# perceptual feature extractors


class RandomFeatureExtractor(nn.Module):
    """Frozen random-weight conv net with one feature tap per block."""

    def __init__(self, n_blocks: int = 5, base: int = 16, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        blocks = []
        cin = 3
        for i in range(n_blocks):
            cout = min(base * 2**i, 128)
            conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            blocks.append(nn.Sequential(conv, nn.LeakyReLU(0.2)))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class IdentityExtractor(nn.Module):
    """Single tap returning the input; reduces the perceptual loss to pixel L1."""

    def forward(self, x):
        return [x]


class VGGExtractor(nn.Module):
    """VGG19 relu1_1 ... relu5_1 taps from a local torchvision state dict."""

    _CUTS = (2, 7, 12, 21, 30)

    def __init__(self, weights_path: str | Path):
        super().__init__()
        from torchvision.models import vgg19

        net = vgg19(weights=None)
        net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        feats = net.features
        bounds = (0,) + self._CUTS
        self.slices = nn.ModuleList(feats[a:b] for a, b in zip(bounds[:-1], bounds[1:]))
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        x = ((x + 1.0) / 2.0 - self.mean) / self.std
        feats = []
        for sl in self.slices:
            x = sl(x)
            feats.append(x)
        return feats


# --------------------------------------------------------------------------
# losses


def _bce_logits(logits: torch.Tensor, target: float) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def d_loss_from_outputs(real_outs, fake_outs) -> torch.Tensor:
    terms = [_bce_logits(r[1], 1.0) + _bce_logits(f[1], 0.0) for r, f in zip(real_outs, fake_outs)]
    return sum(terms) / len(terms)


def g_adv_loss_from_outputs(fake_outs) -> torch.Tensor:
    terms = [_bce_logits(f[1], 1.0) for f in fake_outs]
    return sum(terms) / len(terms)


def fm_loss_from_outputs(real_outs, fake_outs) -> torch.Tensor:
    per_scale = []
    for (real_feats, _), (fake_feats, _) in zip(real_outs, fake_outs):
        per_scale.append(sum(F.l1_loss(f, r.detach()) for r, f in zip(real_feats, fake_feats)))
    return sum(per_scale) / len(per_scale)


def _check_pair(s, x_real, x_fake):
    if x_real.shape != x_fake.shape:
        raise ValidationError(f"real {tuple(x_real.shape)} and fake {tuple(x_fake.shape)} differ in shape")
    check_aligned(s, x_real)


def gan_losses(d, s: torch.Tensor, x_real: torch.Tensor, x_fake: torch.Tensor):
    """Return ``(loss_D, loss_G_adv)``.

    ``loss_D = -E log D(s, x_real) - E log(1 - D(s, x_fake))`` and the
    non-saturating ``loss_G_adv = -E log D(s, x_fake)``, each averaged over
    patch logits and discriminator scales. Detach ``x_fake`` before calling
    if only the discriminator should receive gradients.
    """
    _check_pair(s, x_real, x_fake)
    real_outs = d(s, x_real)
    fake_outs = d(s, x_fake)
    return d_loss_from_outputs(real_outs, fake_outs), g_adv_loss_from_outputs(fake_outs)


def feature_matching_loss(d, s: torch.Tensor, x_real: torch.Tensor, x_fake: torch.Tensor) -> torch.Tensor:
    """Per scale, sum over taps of the mean absolute feature difference;
    averaged over scales. Real-branch features are treated as constants."""
    _check_pair(s, x_real, x_fake)
    return fm_loss_from_outputs(d(s, x_real), d(s, x_fake))


def perceptual_loss(p: nn.Module, x_real: torch.Tensor, x_fake: torch.Tensor) -> torch.Tensor:
    """Mean over taps of the mean absolute difference of extractor features."""
    if x_real.shape != x_fake.shape:
        raise ValidationError(f"real {tuple(x_real.shape)} and fake {tuple(x_fake.shape)} differ in shape")
    if any(prm.requires_grad for prm in p.parameters()):
        raise ValidationError("perceptual extractor must be frozen")
    real_feats = p(x_real)
    fake_feats = p(x_fake)
    return sum(F.l1_loss(f, r.detach()) for r, f in zip(real_feats, fake_feats)) / len(real_feats)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda3: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")


def cg2real_objective(parts: Mapping[str, torch.Tensor | float], w: LossWeights | None = None):
    """``loss_G_adv + lambda1 * fm + lambda2 * percep + lambda3 * dned_loss``.

    Raises :class:`TrainingAbort` naming the first non-finite part.
    """
    w = w or LossWeights()
    for name in LOSS_PARTS:
        if name not in parts:
            raise ValidationError(f"missing loss part {name!r}")
        value = float(torch.as_tensor(parts[name]).detach())
        if not math.isfinite(value):
            raise TrainingAbort(f"loss part {name!r} is not finite ({value})", part=name)
    return (
        parts["loss_G_adv"]
        + w.lambda1 * parts["fm"]
        + w.lambda2 * parts["percep"]
        + w.lambda3 * parts["dned_loss"]
    )
