"""Fréchet distances (FID / FVD) and segmentation-consistency scores."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .core import ValidationError


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if mu.ndim != 1 or sigma.shape != (mu.size, mu.size):
            raise ValidationError(f"inconsistent stats shapes: mu {mu.shape}, sigma {sigma.shape}")
        if not (np.isfinite(mu).all() and np.isfinite(sigma).all()):
            raise ValidationError("Gaussian stats contain non-finite values")
        if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-8):
            raise ValidationError("covariance is not symmetric")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.size


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased covariance of an ``N x D`` feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValidationError(f"features must be N x D, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValidationError(f"need at least 2 samples, got {x.shape[0]}")
    # two-pass with sorted rows so the result does not depend on row order
    x = x[np.lexsort(x.T[::-1])]
    mu = np.array([math.fsum(col) for col in x.T]) / x.shape[0]
    centred = x - mu
    sigma = centred.T @ centred / (x.shape[0] - 1)
    sigma = 0.5 * (sigma + sigma.T)
    return GaussianStats(mu, sigma)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the cross term is taken from the eigenvalues of the symmetric
    product ``sqrt(S_a) S_b sqrt(S_a)``, which has the same spectrum as
    ``S_a S_b``; negative eigenvalues from round-off are clipped to zero.
    """
    if a.dim != b.dim:
        raise ValidationError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mu - b.mu
    root_a = _psd_sqrt(a.sigma)
    cross = root_a @ b.sigma @ root_a
    eig = np.linalg.eigvalsh(0.5 * (cross + cross.T))
    tr_covmean = np.sqrt(np.clip(eig, 0.0, None)).sum()
    d = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_covmean)
    return max(d, 0.0)


# --------------------------------------------------------------------------
# embedders

Embedder = Callable[[torch.Tensor], np.ndarray]
"""Maps an ``N x C x H x W`` image batch to an ``N x D`` float64 array."""


class IdentityEmbedder:
    name = "identity"

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        return images.detach().reshape(images.shape[0], -1).double().cpu().numpy()


class FrameStatsEmbedder:
    """Per-channel mean and standard deviation of each frame."""

    name = "frame_stats"

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        x = images.detach().double()
        feats = torch.cat([x.mean(dim=(2, 3)), x.std(dim=(2, 3), unbiased=False)], dim=1)
        return feats.cpu().numpy()


class RandomConvEmbedder(nn.Module):
    """Fixed random-weight conv net with global average pooling.

    The weights depend only on ``seed``, so scores computed with the same seed
    are comparable across runs. Scores from different embedders are not.
    """

    def __init__(self, dim: int = 64, seed: int = 0, in_channels: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = [in_channels, 16, 32, dim]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            layers += [conv, nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers[:-1])
        self.name = f"random_conv{dim}_s{seed}"
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> np.ndarray:
        x = images.detach().float()
        if x.shape[1] == 1 and self.net[0].in_channels == 3:
            x = x.expand(-1, 3, -1, -1)
        return self.net(x).mean(dim=(2, 3)).double().cpu().numpy()


class TorchvisionInceptionEmbedder(nn.Module):
    """Inception-v3 pool3 (2048-d) activations from a local weights file.

    Nothing is downloaded; ``weights_path`` must hold a torchvision
    ``inception_v3`` state dict.
    """

    name = "inception_v3_pool3"

    def __init__(self, weights_path: str | Path):
        super().__init__()
        from torchvision.models import inception_v3

        net = inception_v3(weights=None, aux_logits=True, init_weights=False)
        net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        net.fc = nn.Identity()
        self.net = net.eval().requires_grad_(False)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> np.ndarray:
        x = images.float()
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        x = torch.nn.functional.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        return self.net(x).double().cpu().numpy()


EMBEDDERS: dict[str, Callable[..., Embedder]] = {
    "identity": IdentityEmbedder,
    "frame_stats": FrameStatsEmbedder,
    "random_conv": RandomConvEmbedder,
    "inception_v3": TorchvisionInceptionEmbedder,
}


def get_embedder(name: str = "random_conv", **kwargs) -> Embedder:
    try:
        return EMBEDDERS[name](**kwargs)
    except KeyError:
        raise ValidationError(f"unknown embedder {name!r}; registered: {sorted(EMBEDDERS)}") from None


def _stack(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images.unsqueeze(0)
    return torch.stack(list(images))


def embed(images, emb: Embedder, batch_size: int = 64) -> np.ndarray:
    x = _stack(images)
    return np.concatenate([np.asarray(emb(x[i : i + batch_size])) for i in range(0, x.shape[0], batch_size)])


def fid(real_images, fake_images, emb: Embedder) -> float:
    """Fréchet distance between Gaussian fits of embedded real and fake images."""
    return frechet_distance(gaussian_stats(embed(real_images, emb)), gaussian_stats(embed(fake_images, emb)))


def clip_embedding(clip: torch.Tensor, emb: Embedder) -> np.ndarray:
    """Concatenate the mean frame embedding with the mean absolute change
    between consecutive frame embeddings (zero for single-frame clips)."""
    e = np.asarray(emb(clip))
    motion = np.abs(np.diff(e, axis=0)).mean(axis=0) if e.shape[0] > 1 else np.zeros(e.shape[1])
    return np.concatenate([e.mean(axis=0), motion])


def _clip_features(clips, emb: Embedder) -> np.ndarray:
    clips = [c if isinstance(c, torch.Tensor) else torch.stack(list(c)) for c in clips]
    lengths = {c.shape[0] for c in clips}
    if len(lengths) != 1:
        raise ValidationError(f"clips must all have the same length, got {sorted(lengths)}")
    return np.stack([clip_embedding(c, emb) for c in clips])


def fvd(real_clips, fake_clips, emb: Embedder) -> float:
    """Fréchet distance over clip-level embeddings (see :func:`clip_embedding`).

    Each clip is a ``T x C x H x W`` tensor or a sequence of ``C x H x W`` frames.
    """
    real = _clip_features(real_clips, emb)
    fake = _clip_features(fake_clips, emb)
    if real.shape[1] != fake.shape[1]:
        raise ValidationError("real and fake clips embed to different sizes")
    return frechet_distance(gaussian_stats(real), gaussian_stats(fake))


# --------------------------------------------------------------------------
# segmentation consistency


def confusion_matrix(gt, pred, n_classes: int) -> np.ndarray:
    gt = np.asarray(gt).ravel().astype(np.int64)
    pred = np.asarray(pred).ravel().astype(np.int64)
    if gt.shape != pred.shape:
        raise ValidationError(f"label maps differ in size: {gt.shape} vs {pred.shape}")
    valid = (gt >= 0) & (gt < n_classes) & (pred >= 0) & (pred < n_classes)
    idx = n_classes * gt[valid] + pred[valid]
    return np.bincount(idx, minlength=n_classes**2).reshape(n_classes, n_classes)


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN for classes absent from the ground truth."""
    cm = np.asarray(cm, dtype=np.float64)
    inter = np.diag(cm)
    union = cm.sum(axis=1) + cm.sum(axis=0) - inter
    present = cm.sum(axis=1) > 0
    iou = np.full(cm.shape[0], np.nan)
    iou[present] = inter[present] / union[present]
    return iou


def segmentation_scores(cm) -> dict[str, float]:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValidationError(f"confusion matrix must be square, got shape {cm.shape}")
    if (cm < 0).any():
        raise ValidationError("confusion matrix has negative counts")
    total = cm.sum()
    if total <= 0:
        raise ValidationError("confusion matrix is empty")
    return {
        "pixel_accuracy": float(np.trace(cm) / total),
        "mean_iou": float(np.nanmean(per_class_iou(cm))),
    }


def write_report(path: str | Path, *, fid_score=None, fvd_score=None, cm=None,
                 embedder_name: str = "", n_samples: int = 0) -> dict:
    """Write the metrics JSON report and return it as a dict."""
    report = {
        "fid": fid_score,
        "fvd": fvd_score,
        "pixel_accuracy": None,
        "mean_iou": None,
        "per_class_iou": [],
        "embedder_name": embedder_name,
        "n_samples": n_samples,
    }
    if cm is not None:
        report.update(segmentation_scores(cm))
        report["per_class_iou"] = [None if np.isnan(v) else float(v) for v in per_class_iou(cm)]
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
