"""Thresholded spatial Laplacian edge maps."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import LUMA_WEIGHTS, ValidationError, batched, check_image

KERNELS = {
    "four_neighbor": ((0.0, 1.0, 0.0), (1.0, -4.0, 1.0), (0.0, 1.0, 0.0)),
    "eight_neighbor": ((1.0, 1.0, 1.0), (1.0, -8.0, 1.0), (1.0, 1.0, 1.0)),
}

# responses are rescaled so every kernel has centre weight -4, which keeps a
# single threshold meaningful across kernels
_RESPONSE_SCALE = {"four_neighbor": 1.0, "eight_neighbor": 0.5}


@dataclass(frozen=True)
class LaplacianConfig:
    kernel: str = "four_neighbor"
    threshold: float = 0.2
    border: str = "replicate"

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValidationError(f"unknown Laplacian kernel {self.kernel!r}; choose from {sorted(KERNELS)}")
        if not self.threshold >= 0:
            raise ValidationError(f"threshold must be >= 0, got {self.threshold}")
        if self.border != "replicate":
            raise ValidationError(f"only replicate borders are supported, got {self.border!r}")


def kernel_tensor(name: str, dtype=torch.float64) -> torch.Tensor:
    return torch.tensor(KERNELS[name], dtype=dtype) * _RESPONSE_SCALE[name]


def to_grayscale(img: torch.Tensor) -> torch.Tensor:
    """Luma-weighted mix of an RGB image; single-channel input passes through."""
    check_image(img)
    if img.shape[-3] == 1:
        return img
    w = torch.tensor(LUMA_WEIGHTS, dtype=img.dtype, device=img.device).view(3, 1, 1)
    return (img * w).sum(dim=-3, keepdim=True)


def laplacian_response(img: torch.Tensor, kernel: str = "four_neighbor") -> torch.Tensor:
    """Laplacian filter response of a gray image with replicate borders (float64)."""
    x, squeeze = batched(img)
    if x.shape[-3] != 1:
        raise ValidationError("Laplacian expects a single-channel image")
    if x.shape[-1] < 3 or x.shape[-2] < 3:
        raise ValidationError(f"image must be at least 3x3, got {tuple(x.shape[-2:])}")
    x = F.pad(x.double(), (1, 1, 1, 1), mode="replicate")
    k = kernel_tensor(kernel).to(x.device).view(1, 1, 3, 3)
    out = F.conv2d(x, k)
    return out[0] if squeeze else out


def laplacian_edge_map(img: torch.Tensor, cfg: LaplacianConfig | None = None) -> torch.Tensor:
    """Binary edge map: 1 where ``|Laplacian(img)| > threshold``.

    RGB input is converted to gray first. Output is float32 with the same rank
    as the input.
    """
    cfg = cfg or LaplacianConfig()
    check_image(img)
    gray = to_grayscale(img)
    resp = laplacian_response(gray, cfg.kernel)
    return (resp.abs() > cfg.threshold).float()
