"""Dataset ingestion, the synthetic scene generator, and augmentations.

On-disk layout (all PNG):
    root/rgb/<id>.png      8-bit, 3 channels
    root/depth/<id>.png    16-bit, single channel; value v means relative depth v/65535
    root/labels/<id>.png   8-bit, single channel class ids; 255 = ignore
    root/splits/<split>.txt one id per line

The synthetic generator renders a handful of axis-aligned rectangles and
ellipses over a background. Each class present in a scene gets one depth
plane, nearer regions occlude farther ones, and the depth raster is the
min-max normalized depth of the visible region, so labels and depth stay
consistent by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


@dataclass
class RGBDSample:
    """One training/eval instance; all rasters share (H, W)."""

    rgb: np.ndarray      # (H, W, 3) float32 in [0, 1]
    depth3: np.ndarray   # (H, W, 3) float32 in [0, 1], channels identical
    labels: np.ndarray   # (H, W) int64, class ids or ignore_index

    def __post_init__(self) -> None:
        if self.rgb.shape[:2] != self.depth3.shape[:2] or self.rgb.shape[:2] != self.labels.shape:
            raise ValueError(
                f"raster sizes disagree: rgb {self.rgb.shape[:2]}, "
                f"depth {self.depth3.shape[:2]}, labels {self.labels.shape}"
            )

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class DatasetManifest:
    root: Path
    split: str
    triples: list[tuple[Path, Path, Path]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.triples)


@dataclass
class AugmentConfig:
    enabled: bool = True
    crop_size: int = 448
    scale_min: float = 0.75
    scale_max: float = 1.25
    hflip_prob: float = 0.5
    brightness: float = 0.25
    contrast: float = 0.25
    saturation: float = 0.2
    ignore_index: int = 255


def normalize_depth(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize a single-channel raster and replicate to 3 channels.

    A constant raster maps to all zeros rather than erroring.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError(f"expected (H, W) raster, got shape {raw.shape}")
    if not np.isfinite(raw).all():
        raise ValueError("depth raster contains non-finite values")
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        scaled = (raw - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(raw)
    return np.repeat(scaled.astype(np.float32)[:, :, None], 3, axis=2)


def synth_scene(seed: int, height: int = 64, width: int = 64, classes: int = 6,
                num_regions: int | None = None,
                region_range: tuple[int, int] = (3, 8),
                rgb_noise: float = 0.02) -> RGBDSample:
    """Deterministic synthetic RGB-D scene with occlusion-consistent labels."""
    if height % 32 != 0 or width % 32 != 0:
        raise ValueError(f"scene size {height}x{width} must be divisible by 32")
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)

    bg_class = int(rng.integers(0, classes))
    n = int(rng.integers(region_range[0], region_range[1] + 1)) if num_regions is None else num_regions

    # one depth plane and one albedo per class so labels and depth stay consistent
    # even when regions repeat a class (the background's included)
    class_depth = rng.permutation(np.linspace(0.08, 0.92, classes))
    albedo = rng.uniform(0.12, 0.95, size=(classes, 3))

    labels = np.full((height, width), bg_class, dtype=np.int64)
    depth = np.full((height, width), class_depth[bg_class], dtype=np.float64)
    rgb = np.broadcast_to(albedo[bg_class], (height, width, 3)).astype(np.float64).copy()

    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    regions = []
    for _ in range(n):
        cls = int(rng.integers(0, classes))
        cy = rng.uniform(0.15 * height, 0.85 * height)
        cx = rng.uniform(0.15 * width, 0.85 * width)
        ry = rng.uniform(height / 8, height / 3)
        rx = rng.uniform(width / 8, width / 3)
        shape = "ellipse" if rng.random() < 0.5 else "rect"
        regions.append((float(class_depth[cls]), cls, cy, cx, ry, rx, shape))
    # paint far to near so nearer regions occlude farther ones
    for d, cls, cy, cx, ry, rx, shape in sorted(regions, key=lambda r: -r[0]):
        if shape == "rect":
            mask = (np.abs(ys - cy) <= ry) & (np.abs(xs - cx) <= rx)
        else:
            mask = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
        labels[mask] = cls
        depth[mask] = d
        rgb[mask] = albedo[cls]

    if rgb_noise > 0:
        rgb = rgb + rng.normal(0.0, rgb_noise, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)
    return RGBDSample(rgb=rgb, depth3=normalize_depth(depth), labels=labels)


def _resize_float(array: np.ndarray, out_h: int, out_w: int, mode: str) -> np.ndarray:
    x = torch.from_numpy(array.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    if mode == "bilinear":
        y = F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)
    else:
        y = F.interpolate(x, size=(out_h, out_w), mode="nearest")
    return y.squeeze(0).permute(1, 2, 0).numpy()


def _resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    x = torch.from_numpy(labels.astype(np.float64)[None, None])
    y = F.interpolate(x, size=(out_h, out_w), mode="nearest")
    return y[0, 0].numpy().astype(np.int64)


def augment(sample: RGBDSample, rng: np.random.Generator,
            config: AugmentConfig) -> RGBDSample:
    """Shared geometric transform on all rasters; photometric on RGB only."""
    rgb, depth3, labels = sample.rgb, sample.depth3, sample.labels
    crop = config.crop_size

    if config.enabled and rng.random() < config.hflip_prob:
        rgb = rgb[:, ::-1].copy()
        depth3 = depth3[:, ::-1].copy()
        labels = labels[:, ::-1].copy()

    if config.enabled and (config.scale_min, config.scale_max) != (1.0, 1.0):
        scale = rng.uniform(config.scale_min, config.scale_max)
        out_h = max(1, int(round(sample.height * scale)))
        out_w = max(1, int(round(sample.width * scale)))
        rgb = _resize_float(rgb, out_h, out_w, "bilinear")
        depth3 = _resize_float(depth3, out_h, out_w, "bilinear")
        labels = _resize_labels(labels, out_h, out_w)

    if config.enabled:
        rgb = rgb.astype(np.float32)
        if config.brightness > 0:
            rgb = rgb * (1.0 + rng.uniform(-config.brightness, config.brightness))
        if config.contrast > 0:
            mean = rgb.mean()
            rgb = mean + (rgb - mean) * (1.0 + rng.uniform(-config.contrast, config.contrast))
        if config.saturation > 0:
            gray = rgb.mean(axis=2, keepdims=True)
            rgb = gray + (rgb - gray) * (1.0 + rng.uniform(-config.saturation, config.saturation))
        rgb = np.clip(rgb, 0.0, 1.0)

    h, w = labels.shape
    if h < crop or w < crop:
        pad_h, pad_w = max(0, crop - h), max(0, crop - w)
        rgb = np.pad(rgb, ((0, pad_h), (0, pad_w), (0, 0)))
        depth3 = np.pad(depth3, ((0, pad_h), (0, pad_w), (0, 0)))
        labels = np.pad(labels, ((0, pad_h), (0, pad_w)),
                        constant_values=config.ignore_index)
        h, w = labels.shape
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    return RGBDSample(
        rgb=np.ascontiguousarray(rgb[y0:y0 + crop, x0:x0 + crop]).astype(np.float32),
        depth3=np.ascontiguousarray(depth3[y0:y0 + crop, x0:x0 + crop]).astype(np.float32),
        labels=np.ascontiguousarray(labels[y0:y0 + crop, x0:x0 + crop]),
    )


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise ValueError(f"{path} must be an 8-bit 3-channel PNG, got mode {img.mode!r}")
        return np.asarray(img, dtype=np.float32) / 255.0


def _read_depth16(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("I", "I;16", "I;16B", "I;16L"):
            raise ValueError(f"{path} must be a 16-bit single-channel PNG, got mode {img.mode!r}")
        raw = np.asarray(img, dtype=np.float32)
    if raw.ndim != 2:
        raise ValueError(f"{path} must be single-channel")
    depth = raw / 65535.0
    return np.repeat(depth[:, :, None], 3, axis=2).astype(np.float32)


def _read_labels(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "L":
            raise ValueError(f"{path} must be an 8-bit single-channel PNG, got mode {img.mode!r}")
        return np.asarray(img, dtype=np.int64)


def build_manifest(root, split: str) -> DatasetManifest:
    root = Path(root)
    split_file = root / "splits" / f"{split}.txt"
    if not split_file.is_file():
        raise FileNotFoundError(f"split file not found: {split_file}")
    ids = [line.strip() for line in split_file.read_text(encoding="utf-8").splitlines()
           if line.strip()]
    triples = []
    for sample_id in ids:
        triple = (
            root / "rgb" / f"{sample_id}.png",
            root / "depth" / f"{sample_id}.png",
            root / "labels" / f"{sample_id}.png",
        )
        for path in triple:
            if not path.is_file():
                raise FileNotFoundError(f"missing file for sample {sample_id!r}: {path}")
        triples.append(triple)
    return DatasetManifest(root=root, split=split, triples=triples)


def load_sample(triple: tuple[Path, Path, Path]) -> RGBDSample:
    rgb_path, depth_path, label_path = triple
    rgb = _read_rgb(rgb_path)
    depth3 = _read_depth16(depth_path)
    labels = _read_labels(label_path)
    if rgb.shape[:2] != depth3.shape[:2] or rgb.shape[:2] != labels.shape:
        raise ValueError(
            f"size mismatch within triple ({rgb_path}, {depth_path}, {label_path}): "
            f"rgb {rgb.shape[:2]}, depth {depth3.shape[:2]}, labels {labels.shape}"
        )
    return RGBDSample(rgb=rgb, depth3=depth3, labels=labels)


def load_dataset(root, split: str) -> Iterator[RGBDSample]:
    """Yield decoded samples in split-file order."""
    manifest = build_manifest(root, split)
    for triple in manifest.triples:
        yield load_sample(triple)


def write_sample(root, sample_id: str, sample: RGBDSample) -> None:
    """Write one sample in the dataset layout (test/demo helper)."""
    root = Path(root)
    for sub in ("rgb", "depth", "labels", "splits"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    Image.fromarray((sample.rgb * 255.0).round().astype(np.uint8)).save(
        root / "rgb" / f"{sample_id}.png"
    )
    depth16 = (sample.depth3[:, :, 0] * 65535.0).round().astype(np.uint16)
    Image.fromarray(depth16).save(root / "depth" / f"{sample_id}.png")
    Image.fromarray(sample.labels.astype(np.uint8)).save(
        root / "labels" / f"{sample_id}.png"
    )


def append_split(root, split: str, sample_ids: list[str]) -> None:
    split_dir = Path(root) / "splits"
    split_dir.mkdir(parents=True, exist_ok=True)
    with open(split_dir / f"{split}.txt", "a", encoding="utf-8", newline="\n") as fh:
        for sample_id in sample_ids:
            fh.write(f"{sample_id}\n")
