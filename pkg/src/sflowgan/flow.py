"""Dense optical flow by coarse-to-fine Horn-Schunck, plus bilinear warping.

Everything is written with differentiable torch ops so the estimator can sit
inside a training loss: gradients reach the input frames through a fixed
number of Jacobi iterations and warps.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .core import ValidationError, batched
from .edges import to_grayscale

FLO_MAGIC = 202021.25

# Horn & Schunck's neighbourhood average
_AVG_KERNEL = torch.tensor(
    [[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]]
).view(1, 1, 3, 3)


@dataclass(frozen=True)
class FlowConfig:
    """Solver settings.

    ``smoothness`` is the weight of the squared flow-gradient penalty relative
    to the brightness-constancy term, for intensities in [-1, 1].
    ``warps`` is the number of re-linearisations per pyramid level; the
    ``iterations`` Jacobi sweeps are split evenly between them.
    """

    smoothness: float = 0.1
    iterations: int = 100
    pyramid_levels: int = 3
    warps: int = 1

    def __post_init__(self):
        if not self.smoothness > 0:
            raise ValidationError(f"smoothness must be > 0, got {self.smoothness}")
        if self.iterations < 1:
            raise ValidationError(f"iterations must be >= 1, got {self.iterations}")
        if self.pyramid_levels < 1:
            raise ValidationError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if not 1 <= self.warps <= self.iterations:
            raise ValidationError(f"warps must lie in [1, iterations], got {self.warps}")


def _filter(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    # depthwise, replicate border
    c = x.shape[1]
    k = kernel.to(dtype=x.dtype, device=x.device).expand(c, 1, *kernel.shape[-2:])
    ph, pw = kernel.shape[-2] // 2, kernel.shape[-1] // 2
    return F.conv2d(F.pad(x, (pw, pw, ph, ph), mode="replicate"), k, groups=c)


def _gradients(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    kx = torch.tensor([[-0.5, 0.0, 0.5]]).view(1, 1, 1, 3)
    ky = kx.view(1, 1, 3, 1)
    return _filter(x, kx), _filter(x, ky)


def warp(img: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``img`` by ``flow``: ``out(p) = img(p + flow(p))``.

    Bilinear sampling; samples outside the frame clamp to the border.
    """
    x, squeeze = batched(img)
    f, _ = batched(flow)
    if f.shape[1] != 2:
        raise ValidationError(f"flow must have 2 channels, got {f.shape[1]}")
    if x.shape[-2:] != f.shape[-2:]:
        raise ValidationError(f"image {tuple(x.shape[-2:])} and flow {tuple(f.shape[-2:])} differ in size")
    n, c, h, w = x.shape
    if f.shape[0] != n:
        f = f.expand(n, -1, -1, -1)
    ys = torch.arange(h, dtype=x.dtype, device=x.device).view(1, h, 1)
    xs = torch.arange(w, dtype=x.dtype, device=x.device).view(1, 1, w)
    px = (xs + f[:, 0].to(x.dtype)).clamp(0, w - 1)
    py = (ys + f[:, 1].to(x.dtype)).clamp(0, h - 1)
    x0 = px.detach().floor()
    y0 = py.detach().floor()
    tx, ty = (px - x0).unsqueeze(1), (py - y0).unsqueeze(1)
    x0, y0 = x0.long(), y0.long()
    x1, y1 = (x0 + 1).clamp(max=w - 1), (y0 + 1).clamp(max=h - 1)
    flat = x.reshape(n, c, h * w)

    def tap(yy, xx):
        idx = (yy * w + xx).view(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).view(n, c, h, w)

    # lerp form a + t * (b - a) is exact for constant regions and integer shifts
    top = tap(y0, x0) + tx * (tap(y0, x1) - tap(y0, x0))
    bottom = tap(y1, x0) + tx * (tap(y1, x1) - tap(y1, x0))
    out = top + ty * (bottom - top)
    return out[0] if squeeze else out


def _downsample(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(x, 2)


def _upsample_flow(flow: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    up = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    scale = torch.tensor(
        [size[1] / flow.shape[-1], size[0] / flow.shape[-2]], dtype=flow.dtype, device=flow.device
    ).view(1, 2, 1, 1)
    return up * scale


def _solve_level(a, b, flow, smoothness, iterations, warps):
    u, v = flow[:, :1], flow[:, 1:]
    sweeps = [iterations // warps + (1 if i < iterations % warps else 0) for i in range(warps)]
    for n_sweeps in sweeps:
        u0, v0 = u, v
        bw = warp(b, torch.cat([u0, v0], dim=1))
        ax, ay = _gradients(a)
        bx, by = _gradients(bw)
        ix, iy = 0.5 * (ax + bx), 0.5 * (ay + by)
        it = bw - a
        denom = smoothness + ix * ix + iy * iy
        for _ in range(n_sweeps):
            ubar = _filter(u, _AVG_KERNEL)
            vbar = _filter(v, _AVG_KERNEL)
            resid = ix * (ubar - u0) + iy * (vbar - v0) + it
            u = ubar - ix * resid / denom
            v = vbar - iy * resid / denom
    return torch.cat([u, v], dim=1)


def estimate_flow(a: torch.Tensor, b: torch.Tensor, cfg: FlowConfig | None = None) -> torch.Tensor:
    """Dense flow (dx, dy) in pixels such that ``b(p + flow(p)) ~= a(p)``.

    Accepts ``C x H x W`` or ``N x C x H x W`` frames; RGB is converted to
    gray. Returns ``2 x H x W`` (or ``N x 2 x H x W``) in the input's dtype.
    """
    cfg = cfg or FlowConfig()
    if a.shape != b.shape:
        raise ValidationError(f"frame shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    x, squeeze = batched(a)
    y, _ = batched(b)
    if x.shape[1] == 3:
        x, y = to_grayscale(x), to_grayscale(y)
    elif x.shape[1] != 1:
        raise ValidationError(f"frames must have 1 or 3 channels, got {x.shape[1]}")
    h, w = x.shape[-2:]
    min_side = 2 ** cfg.pyramid_levels
    if h < min_side or w < min_side:
        raise ValidationError(f"{h}x{w} frames are too small for {cfg.pyramid_levels} pyramid levels")

    pyr = [(x, y)]
    for _ in range(cfg.pyramid_levels - 1):
        pa, pb = pyr[-1]
        pyr.append((_downsample(pa), _downsample(pb)))

    flow = torch.zeros(x.shape[0], 2, *pyr[-1][0].shape[-2:], dtype=x.dtype, device=x.device)
    for level, (pa, pb) in enumerate(reversed(pyr)):
        if level:
            flow = _upsample_flow(flow, tuple(pa.shape[-2:]))
        flow = _solve_level(pa, pb, flow, cfg.smoothness, cfg.iterations, cfg.warps)
    return flow[0] if squeeze else flow


FlowBackend = Callable[[torch.Tensor, torch.Tensor, FlowConfig], torch.Tensor]

_BACKENDS: dict[str, FlowBackend] = {"horn_schunck": estimate_flow}


def register_flow_backend(name: str, fn: FlowBackend) -> None:
    _BACKENDS[name] = fn


def get_flow_backend(name: str) -> FlowBackend:
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValidationError(f"unknown flow backend {name!r}; registered: {sorted(_BACKENDS)}") from None


def write_flo(path: str | Path, flow: torch.Tensor | np.ndarray) -> None:
    """Write a ``2 x H x W`` flow field in the Middlebury ``.flo`` layout."""
    arr = np.asarray(flow.detach().cpu() if isinstance(flow, torch.Tensor) else flow, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValidationError(f"flow must be 2 x H x W, got {arr.shape}")
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(np.ascontiguousarray(arr.transpose(1, 2, 0)).astype("<f4").tobytes())


def read_flo(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h = struct.unpack("<fii", fh.read(12))
        if magic != FLO_MAGIC:
            raise ValidationError(f"{path}: bad .flo magic {magic}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != 2 * w * h:
        raise ValidationError(f"{path}: expected {2 * w * h} floats, found {data.size}")
    return data.reshape(h, w, 2).transpose(2, 0, 1).astype(np.float32)
