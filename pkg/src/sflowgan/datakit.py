"""Paired label/image datasets on disk and a procedural toy-scene generator.

Layout::

    <root>/manifest.json
    <root>/<split>/labels/0000.png      indexed-colour class ids
    <root>/<split>/images/0000.png      8-bit RGB "real" image
    <root>/<split>/cg/0000.png          optional flat-shaded render
    <root>/<split>/clips/clip_000/{labels,images,cg}/00000.png
    <root>/<split>/clips/clip_000/frames.json
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .core import ValidationError, normalize_image
from .edges import LaplacianConfig, laplacian_edge_map
from .flow import write_flo

log = logging.getLogger(__name__)

# mean colours of the toy classes; also used as the label palette
CLASS_COLORS = [
    (110, 160, 230),  # sky
    (90, 90, 90),  # road
    (200, 40, 40),
    (40, 170, 60),
    (225, 205, 50),
    (150, 60, 190),
    (40, 190, 200),
    (235, 130, 40),
]
TEXTURE_AMPLITUDE = 48.0  # in 8-bit levels
IMAGE_EXTS = (".png",)


class DatasetError(ValidationError):
    """A dataset on disk is missing files or is internally inconsistent."""


def class_colors(n_classes: int) -> np.ndarray:
    cols = list(CLASS_COLORS[:n_classes])
    rng = np.random.default_rng(9)
    while len(cols) < n_classes:
        cols.append(tuple(int(c) for c in rng.integers(30, 226, size=3)))
    return np.array(cols, dtype=np.float64)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    split: str = "train"
    n_classes: int = 6
    resolution: tuple[int, int] = (64, 128)
    palette: tuple[tuple[int, int, int], ...] = ()

    @classmethod
    def load(cls, root: str | Path, split: str = "train") -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise DatasetError(f"no manifest.json in {root}")
        meta = json.loads(path.read_text())
        if split not in ("train", "val", "test"):
            raise DatasetError(f"unknown split {split!r}")
        return cls(
            root=root,
            split=split,
            n_classes=int(meta["n_classes"]),
            resolution=tuple(meta["resolution"]),
            palette=tuple(tuple(c) for c in meta.get("palette", [])),
        )

    @property
    def split_dir(self) -> Path:
        return self.root / self.split


@dataclass
class PairedSample:
    semantic: np.ndarray  # H x W int64
    image: torch.Tensor  # 3 x H x W in [-1, 1]
    source_edge: torch.Tensor  # 1 x H x W binary
    cg: torch.Tensor | None = None
    name: str = ""
    clip_id: str | None = None
    frame_idx: int | None = None

    def __post_init__(self):
        hw = tuple(self.semantic.shape)
        if tuple(self.image.shape[-2:]) != hw or tuple(self.source_edge.shape[-2:]) != hw:
            raise ValidationError(f"sample {self.name!r}: label, image and edge sizes differ")
        if self.cg is not None and tuple(self.cg.shape[-2:]) != hw:
            raise ValidationError(f"sample {self.name!r}: cg image size differs")


# --------------------------------------------------------------------------
# reading


def _read_labels(path: Path, palette: np.ndarray | None, resolution) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "RGB" and palette is None:
            raise DatasetError(f"{path}: RGB label image but the manifest has no palette")
        if im.mode not in ("P", "L", "I", "I;16", "RGB"):
            raise DatasetError(f"{path}: unsupported label image mode {im.mode}")
        img = im
        if resolution and img.size != (resolution[1], resolution[0]):
            img = img.resize((resolution[1], resolution[0]), Image.NEAREST)
        arr = np.array(img)
    if arr.ndim == 3:
        match = (arr[:, :, None, :] == palette[None, None, :, :].astype(arr.dtype)).all(-1)
        if not match.any(-1).all():
            raise DatasetError(f"{path}: colour not in palette")
        arr = match.argmax(-1)
    return arr.astype(np.int64)


def _read_rgb(path: Path, resolution) -> torch.Tensor:
    with Image.open(path) as im:
        img = im.convert("RGB")
        if resolution and img.size != (resolution[1], resolution[0]):
            img = img.resize((resolution[1], resolution[0]), Image.BOX)
        return normalize_image(np.array(img))


def _list_images(d: Path) -> list[Path]:
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def _load_dir(base: Path, manifest: DatasetManifest, edge_source: str, lap: LaplacianConfig,
              clip_id: str | None = None) -> list[PairedSample]:
    labels = _list_images(base / "labels")
    images = _list_images(base / "images")
    cgs = _list_images(base / "cg")
    label_names = {p.stem for p in labels}
    image_names = {p.stem for p in images}
    if len(labels) != len(images) or label_names != image_names:
        missing = sorted(label_names ^ image_names)
        raise DatasetError(
            f"{base}: {len(labels)} label files vs {len(images)} image files; "
            f"unpaired: {', '.join(missing[:5])}"
        )
    if edge_source == "cg" and len(cgs) != len(labels):
        raise DatasetError(f"{base}: edge_source='cg' but {len(cgs)} cg files for {len(labels)} labels")
    palette = np.array(manifest.palette) if manifest.palette else None
    cg_by_name = {p.stem: p for p in cgs}
    samples = []
    for idx, (lp, ip) in enumerate(zip(labels, images)):
        sem = _read_labels(lp, palette, manifest.resolution)
        if sem.max(initial=0) >= manifest.n_classes:
            raise DatasetError(f"{lp}: label {sem.max()} >= n_classes {manifest.n_classes}")
        img = _read_rgb(ip, manifest.resolution)
        cg = _read_rgb(cg_by_name[lp.stem], manifest.resolution) if lp.stem in cg_by_name else None
        edge_img = cg if edge_source == "cg" else img
        samples.append(
            PairedSample(
                semantic=sem,
                image=img,
                source_edge=laplacian_edge_map(edge_img, lap),
                cg=cg,
                name=lp.stem if clip_id is None else f"{clip_id}/{lp.stem}",
                clip_id=clip_id,
                frame_idx=idx if clip_id is not None else None,
            )
        )
    return samples


def load_paired_dataset(manifest: DatasetManifest, seed: int | None = None, edge_source: str = "image",
                        laplacian: LaplacianConfig | None = None) -> list[PairedSample]:
    """Load the still pairs of one split.

    ``edge_source`` picks the image the source edge map is computed from:
    the real image (training) or the flat ``cg`` render (test time). Files
    are read in name order; with ``seed`` the order is then shuffled
    deterministically.
    """
    if edge_source not in ("image", "cg"):
        raise ValidationError(f"edge_source must be 'image' or 'cg', got {edge_source!r}")
    samples = _load_dir(manifest.split_dir, manifest, edge_source, laplacian or LaplacianConfig())
    if not samples:
        warnings.warn(f"no samples found under {manifest.split_dir}", stacklevel=2)
        return []
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(samples))
        samples = [samples[i] for i in order]
    return samples


def load_sequences(manifest: DatasetManifest, edge_source: str = "image",
                   laplacian: LaplacianConfig | None = None) -> list[list[PairedSample]]:
    """Load every clip of a split as a time-ordered list of samples."""
    clip_root = manifest.split_dir / "clips"
    if not clip_root.is_dir():
        warnings.warn(f"no clips directory under {manifest.split_dir}", stacklevel=2)
        return []
    clips = []
    for d in sorted(p for p in clip_root.iterdir() if p.is_dir()):
        frames = _load_dir(d, manifest, edge_source, laplacian or LaplacianConfig(), clip_id=d.name)
        if len(frames) < 2:
            raise DatasetError(f"{d}: clips need at least 2 frames, found {len(frames)}")
        clips.append(frames)
    return clips


def augment(sample: PairedSample, rng: np.random.Generator, crop: tuple[int, int] | None = None,
            flip: bool = True) -> PairedSample:
    """Random horizontal flip and crop, applied identically to every field."""
    sem, img, edge, cg = sample.semantic, sample.image, sample.source_edge, sample.cg
    if flip and rng.random() < 0.5:
        sem = sem[:, ::-1].copy()
        img, edge = img.flip(-1), edge.flip(-1)
        cg = cg.flip(-1) if cg is not None else None
    if crop is not None:
        h, w = sem.shape
        ch, cw = crop
        if ch > h or cw > w:
            raise ValidationError(f"crop {crop} larger than sample {h}x{w}")
        y = int(rng.integers(0, h - ch + 1))
        x = int(rng.integers(0, w - cw + 1))
        sem = sem[y : y + ch, x : x + cw].copy()
        img, edge = img[:, y : y + ch, x : x + cw], edge[:, y : y + ch, x : x + cw]
        cg = cg[:, y : y + ch, x : x + cw] if cg is not None else None
    return replace(sample, semantic=sem, image=img.contiguous(), source_edge=edge.contiguous(),
                   cg=None if cg is None else cg.contiguous())


# --------------------------------------------------------------------------
# procedural toy scenes


@dataclass
class _Object:
    cls: int
    shape: str
    y: int
    x: int
    h: int
    w: int
    vy: int = 0
    vx: int = 0
    texture: np.ndarray = field(default=None, repr=False)


def _smooth_noise(rng, shape, sigma):
    z = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return z / (np.abs(z).max() + 1e-12)


def _object_mask(obj: _Object, y0: int, x0: int, hw) -> tuple[np.ndarray, np.ndarray]:
    """Full-frame mask of ``obj`` placed at (y0, x0) and local texture coords."""
    H, W = hw
    yy, xx = np.mgrid[0:H, 0:W]
    ly, lx = yy - y0, xx - x0
    inside = (ly >= 0) & (ly < obj.h) & (lx >= 0) & (lx < obj.w)
    if obj.shape == "ellipse":
        cy, cx = (obj.h - 1) / 2, (obj.w - 1) / 2
        inside &= ((ly - cy) / (obj.h / 2)) ** 2 + ((lx - cx) / (obj.w / 2)) ** 2 <= 1.0
    return inside, np.clip(ly, 0, obj.h - 1), np.clip(lx, 0, obj.w - 1)


class _Scene:
    def __init__(self, rng: np.random.Generator, hw, n_classes: int, moving: bool):
        H, W = hw
        self.hw = hw
        self.n_classes = n_classes
        self.colors = class_colors(n_classes)
        self.horizon = int(rng.integers(int(0.35 * H), int(0.6 * H)))
        self.bg_texture = _smooth_noise(rng, hw, 1.5)
        self.objects: list[_Object] = []
        if n_classes > 2:
            for _ in range(int(rng.integers(2, 5))):
                h = int(rng.integers(H // 5, H // 2))
                w = int(rng.integers(W // 10, W // 4))
                obj = _Object(
                    cls=int(rng.integers(2, n_classes)),
                    shape="ellipse" if rng.random() < 0.5 else "rect",
                    y=int(rng.integers(0, H - h)),
                    x=int(rng.integers(0, W - w)),
                    h=h,
                    w=w,
                )
                if moving:
                    while obj.vy == 0 and obj.vx == 0:
                        obj.vy, obj.vx = (int(v) for v in rng.integers(-1, 2, size=2))
                obj.texture = _smooth_noise(rng, (h, w), 1.5)
                self.objects.append(obj)

    def render(self, t: int = 0):
        H, W = self.hw
        labels = np.zeros(self.hw, dtype=np.int64)
        labels[self.horizon :] = 1 if self.n_classes > 1 else 0
        texture = self.bg_texture.copy()
        # road carries stronger texture than sky
        texture[: self.horizon] *= 0.5
        shade = np.zeros(self.hw)
        flows = np.zeros((2, H, W), dtype=np.float32)
        for obj in self.objects:
            y0, x0 = obj.y + obj.vy * t, obj.x + obj.vx * t
            inside, ly, lx = _object_mask(obj, y0, x0, self.hw)
            labels[inside] = obj.cls
            texture[inside] = obj.texture[ly, lx][inside]
            shade[inside] = (ly[inside] / max(obj.h - 1, 1) - 0.5) * 30.0
            flows[0][inside] = obj.vx
            flows[1][inside] = obj.vy
        base = self.colors[labels]
        real = base + TEXTURE_AMPLITUDE * texture[:, :, None]
        cg = base + shade[:, :, None]
        to_u8 = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)
        return labels, to_u8(real), to_u8(cg), flows


def _palette_bytes(colors: np.ndarray) -> list[int]:
    flat = [int(c) for row in colors.astype(np.uint8) for c in row]
    return flat + [0] * (768 - len(flat))


def _write_frame(base: Path, name: str, labels, real, cg, palette) -> None:
    lab = Image.fromarray(labels.astype(np.uint8), mode="P")
    lab.putpalette(palette)
    lab.save(base / "labels" / f"{name}.png")
    Image.fromarray(real, mode="RGB").save(base / "images" / f"{name}.png")
    Image.fromarray(cg, mode="RGB").save(base / "cg" / f"{name}.png")


def _make_dirs(base: Path) -> None:
    for sub in ("labels", "images", "cg"):
        (base / sub).mkdir(parents=True, exist_ok=True)


def synth_toy_dataset(root: str | Path, seed: int = 0, n_samples: int = 8, resolution=(64, 128),
                      n_classes: int = 6, motion: tuple[int, int] | None = None,
                      split: str = "train") -> DatasetManifest:
    """Write a procedural paired dataset and return its manifest.

    Scenes are a sky band over a road band plus labelled rectangles and
    ellipses, each class with its own mean colour and a smooth texture.
    ``motion=(n_clips, n_frames)`` additionally writes clips in which every
    object moves with a constant integer velocity; ground-truth flow between
    consecutive frames is stored as ``.flo`` files.
    """
    H, W = resolution
    if H % 32 or W % 32:
        raise ValidationError(f"resolution {H}x{W} must be divisible by 32")
    if n_classes < 1 or n_classes > 256:
        raise ValidationError("n_classes must lie in [1, 256]")
    root = Path(root)
    rng = np.random.default_rng(seed)
    colors = class_colors(n_classes)
    palette = _palette_bytes(colors)
    split_dir = root / split
    if n_samples:
        _make_dirs(split_dir)
    for i in range(n_samples):
        labels, real, cg, _ = _Scene(rng, (H, W), n_classes, moving=False).render()
        _write_frame(split_dir, f"{i:04d}", labels, real, cg, palette)
    if motion is not None:
        n_clips, n_frames = motion
        if n_frames < 2:
            raise ValidationError("clips need at least 2 frames")
        for c in range(n_clips):
            clip_dir = split_dir / "clips" / f"clip_{c:03d}"
            _make_dirs(clip_dir)
            (clip_dir / "flow").mkdir(exist_ok=True)
            scene = _Scene(rng, (H, W), n_classes, moving=True)
            frames = []
            for t in range(n_frames):
                labels, real, cg, flows = scene.render(t)
                name = f"{t:05d}"
                _write_frame(clip_dir, name, labels, real, cg, palette)
                if t + 1 < n_frames:
                    write_flo(clip_dir / "flow" / f"{name}.flo", flows)
                frames.append(name)
            velocities = [[o.vx, o.vy] for o in scene.objects]
            (clip_dir / "frames.json").write_text(
                json.dumps({"frames": frames, "object_velocities": velocities}, indent=2) + "\n"
            )
    manifest_path = root / "manifest.json"
    meta = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    meta.update(
        {
            "n_classes": n_classes,
            "resolution": [H, W],
            "palette": colors.astype(int).tolist(),
            "class_names": ["sky", "road"][:n_classes] + [f"object_{k}" for k in range(2, n_classes)],
        }
    )
    meta.setdefault("splits", {})[split] = {"seed": seed, "n_samples": n_samples,
                                            "clips": list(motion) if motion else None}
    root.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return DatasetManifest.load(root, split)


def decode_toy_classes(img: torch.Tensor, n_classes: int) -> np.ndarray:
    """Nearest-mean-colour classifier for toy images (a trivial segmenter)."""
    x = ((img.detach().double().cpu() + 1.0) * 127.5).permute(1, 2, 0).numpy()
    d = ((x[:, :, None, :] - class_colors(n_classes)[None, None]) ** 2).sum(-1)
    return d.argmin(-1)


def collate(samples: Sequence[PairedSample]):
    """Stack samples into ``(labels N x H x W, images N x 3 x H x W, edges N x 1 x H x W)``."""
    labels = torch.from_numpy(np.stack([s.semantic for s in samples]))
    images = torch.stack([s.image for s in samples])
    edges = torch.stack([s.source_edge for s in samples])
    return labels, images, edges
