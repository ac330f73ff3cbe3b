"""Tensor-level domain types shared by every stage of the pipeline.

Images are channel-first float tensors in [-1, 1]. Semantic maps are integer
``H x W`` label arrays, one-hot encoded to ``C_classes x H x W`` before they
reach a network. Edge maps are ``1 x H x W`` floats in [0, 1].

Most functions accept either a single ``C x H x W`` tensor or a batched
``N x C x H x W`` one and return the same rank they were given.
"""
from __future__ import annotations

import numpy as np
import torch

# ITU-R BT.601 luma
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class ValidationError(ValueError):
    """Input violates a documented shape, range or value contract."""


class EncodingError(ValidationError):
    """Raw pixel data cannot be encoded into an image tensor."""


class TrainingAbort(RuntimeError):
    """Training stopped because a loss became non-finite."""

    def __init__(self, message: str, part: str | None = None, step: int | None = None):
        super().__init__(message)
        self.part = part
        self.step = step


def normalize_image(raw: np.ndarray) -> torch.Tensor:
    """Map an ``H x W x C`` uint8 array to a ``C x H x W`` float tensor in [-1, 1]."""
    raw = np.asarray(raw)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    if raw.ndim != 3 or raw.shape[2] not in (1, 3):
        raise EncodingError(f"expected H x W x C with C in {{1, 3}}, got shape {raw.shape}")
    if raw.dtype != np.uint8:
        raise EncodingError(f"expected uint8 pixels, got {raw.dtype}")
    data = torch.from_numpy(np.ascontiguousarray(raw.transpose(2, 0, 1))).float()
    return data / 127.5 - 1.0


def denormalize_image(img: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`normalize_image`, rounding to the nearest uint8 level."""
    check_image(img)
    arr = ((img.detach().cpu().double() + 1.0) * 127.5).round().clamp(0, 255)
    return arr.to(torch.uint8).permute(1, 2, 0).numpy()


def check_image(img: torch.Tensor, channels: tuple[int, ...] = (1, 3)) -> None:
    if not isinstance(img, torch.Tensor):
        raise ValidationError(f"expected a tensor, got {type(img).__name__}")
    if img.dim() not in (3, 4):
        raise ValidationError(f"expected C x H x W or N x C x H x W, got shape {tuple(img.shape)}")
    if img.shape[-3] not in channels:
        raise ValidationError(f"expected channels in {channels}, got {img.shape[-3]}")
    if not torch.isfinite(img).all():
        raise ValidationError("image contains non-finite values")
    if img.numel() and (img.min() < -1.0 or img.max() > 1.0):
        raise ValidationError("image values must lie in [-1, 1]")


def check_semantic_map(labels: np.ndarray | torch.Tensor, n_classes: int) -> None:
    labels = torch.as_tensor(labels)
    if labels.dtype.is_floating_point or labels.dtype == torch.bool:
        raise ValidationError(f"semantic labels must be integers, got {labels.dtype}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError(
            f"semantic labels must lie in [0, {n_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )


def one_hot_semantic(labels: np.ndarray | torch.Tensor, n_classes: int) -> torch.Tensor:
    """One-hot encode ``H x W`` (or ``N x H x W``) labels to ``C x H x W`` floats."""
    if n_classes < 1:
        raise ValidationError("n_classes must be >= 1")
    labels = torch.as_tensor(labels)
    check_semantic_map(labels, n_classes)
    onehot = torch.nn.functional.one_hot(labels.long(), n_classes).float()
    return onehot.movedim(-1, -3).contiguous()


def check_edge_map(edge: torch.Tensor, binary: bool = False) -> None:
    if edge.dim() not in (3, 4) or edge.shape[-3] != 1:
        raise ValidationError(f"edge map must be 1 x H x W, got shape {tuple(edge.shape)}")
    if edge.numel() and (edge.min() < 0.0 or edge.max() > 1.0):
        raise ValidationError("edge map values must lie in [0, 1]")
    if binary and not ((edge == 0) | (edge == 1)).all():
        raise ValidationError("binary edge map must contain only 0 and 1")


def batched(t: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Return ``t`` with a leading batch axis and whether one was added."""
    if t.dim() == 3:
        return t.unsqueeze(0), True
    return t, False


def check_aligned(*tensors: torch.Tensor) -> None:
    sizes = {tuple(t.shape[-2:]) for t in tensors}
    if len(sizes) > 1:
        raise ValidationError(f"spatial shapes differ: {sorted(sizes)}")
