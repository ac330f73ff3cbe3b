"""Deep neural edge detector: a six-stage side-output network trained on
Laplacian edge maps, whose side outputs are blended into soft edge maps.

Re-weighting the blend is what produces diverse edge maps for the same scene.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ValidationError, batched

N_SIDES = 6
BCE_EPS = 1e-7


class DnedNetwork(nn.Module):
    """Conv pyramid with one 1x1 side head per stage.

    Stage 0 runs at full resolution; each of the remaining five halves it.
    Every side logit map is bilinearly upsampled back to the input size.
    """

    def __init__(self, in_channels: int = 1, widths: Sequence[int] = (16, 32, 64, 128, 256, 256)):
        super().__init__()
        if len(widths) != N_SIDES:
            raise ValidationError(f"need exactly {N_SIDES} stage widths, got {len(widths)}")
        self.in_channels = in_channels
        self.widths = tuple(widths)
        stages = []
        cin = in_channels
        for i, cout in enumerate(widths):
            stride = 1 if i == 0 else 2
            stages.append(
                nn.Sequential(
                    nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(cout, cout, 3, padding=1),
                    nn.ReLU(inplace=True),
                )
            )
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.side_heads = nn.ModuleList(nn.Conv2d(w, 1, 1) for w in widths)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Return the six side-output *logit* maps, each ``N x 1 x H x W``."""
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValidationError(f"input size {h}x{w} must be divisible by 32")
        logits = []
        for stage, head in zip(self.stages, self.side_heads):
            x = stage(x)
            side = head(x)
            if side.shape[-2:] != (h, w):
                side = F.interpolate(side, size=(h, w), mode="bilinear", align_corners=False)
            logits.append(side)
        return logits


def dned_forward(net: DnedNetwork, img: torch.Tensor) -> list[torch.Tensor]:
    """Six soft edge maps in (0, 1), same rank as ``img``."""
    x, squeeze = batched(img)
    sides = [torch.sigmoid(s) for s in net(x)]
    return [s[0] for s in sides] if squeeze else sides


def _check_weights(w) -> torch.Tensor:
    w = torch.as_tensor(w, dtype=torch.float64)
    if w.shape != (N_SIDES,):
        raise ValidationError(f"ensemble weights must have {N_SIDES} entries, got shape {tuple(w.shape)}")
    if (w < 0).any() or abs(float(w.sum()) - 1.0) > 1e-6:
        raise ValidationError("ensemble weights must be non-negative and sum to 1")
    return w


def uniform_weights() -> torch.Tensor:
    return torch.full((N_SIDES,), 1.0 / N_SIDES, dtype=torch.float64)


def _check_sides(sides: Sequence[torch.Tensor], *others: torch.Tensor) -> None:
    if len(sides) != N_SIDES:
        raise ValidationError(f"expected {N_SIDES} side outputs, got {len(sides)}")
    shapes = {tuple(s.shape) for s in list(sides) + list(others)}
    if len(shapes) != 1:
        raise ValidationError(f"side outputs and target differ in shape: {sorted(shapes)}")


def bce(prob: torch.Tensor, target: torch.Tensor, balanced: bool = False) -> torch.Tensor:
    """Pixel-averaged binary cross entropy with probabilities clamped to [eps, 1-eps].

    With ``balanced`` the positive and negative terms are re-weighted by the
    opposite class frequency, as in HED.
    """
    p = prob.clamp(BCE_EPS, 1.0 - BCE_EPS)
    pos = target * torch.log(p)
    neg = (1.0 - target) * torch.log1p(-p)
    if balanced:
        frac_pos = target.mean()
        return -((1.0 - frac_pos) * pos + frac_pos * neg).mean() * 2.0
    return -(pos + neg).mean()


def dned_loss(sides: Sequence[torch.Tensor], target: torch.Tensor, w=None, balanced: bool = False) -> torch.Tensor:
    """``sum_i a_i * BCE(side_i, target)`` over the six side outputs."""
    _check_sides(sides, target)
    w = uniform_weights() if w is None else _check_weights(w)
    w = w.to(dtype=sides[0].dtype, device=sides[0].device)
    return sum(w[i] * bce(s, target, balanced) for i, s in enumerate(sides))


def ensemble_edges(sides: Sequence[torch.Tensor], w=None) -> torch.Tensor:
    """Pixelwise convex combination of the side outputs."""
    _check_sides(sides)
    w = uniform_weights() if w is None else _check_weights(w)
    w = w.to(dtype=sides[0].dtype, device=sides[0].device)
    out = sum(w[i] * s for i, s in enumerate(sides))
    return out.clamp(0.0, 1.0)


def sample_ensemble_weights(alpha: float = 3.0, seed: int | None = None) -> torch.Tensor:
    """Draw ensemble weights from a symmetric Dirichlet(alpha) over the six sides."""
    if not alpha > 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.dirichlet([alpha] * N_SIDES))


def save_dned(net: DnedNetwork, directory: str | Path, *, input_size=None, step: int = 0) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), directory / "dned.pt")
    manifest = {
        "widths": list(net.widths),
        "in_channels": net.in_channels,
        "input_size": list(input_size) if input_size else None,
        "step": step,
    }
    (directory / "dned.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dned(directory: str | Path) -> tuple[DnedNetwork, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "dned.json").read_text())
    net = DnedNetwork(manifest["in_channels"], manifest["widths"])
    net.load_state_dict(torch.load(directory / "dned.pt", map_location="cpu"))
    return net, manifest
