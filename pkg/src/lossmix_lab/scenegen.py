"""Deterministic synthetic detection scenes in two visual domains.

Geometry (how many shapes, which class, where, how big) is drawn from one RNG
stream and appearance (colors, noise) from another, so the same seed gives the
same layout in the ``source`` and ``target`` domains; the domains differ only
in palette, background and a stripe texture.
"""
from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .boxes import iou

DOMAINS = ("source", "target")
GEOMETRY_STREAM = 0
APPEARANCE_STREAM = 1
MAX_PLACEMENT_TRIES = 20


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for (seed, stream-id...)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, k: int) -> int:
    """64-bit seed for the k-th child of ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(k),))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class Instance:
    class_id: int
    box: tuple
    mix_weight: float = 1.0

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not (0.0 < self.mix_weight <= 1.0):
            raise ValueError(f"mix_weight must be in (0, 1], got {self.mix_weight}")
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))

    def with_weight(self, w: float) -> "Instance":
        return replace(self, mix_weight=float(w))


@dataclass
class ImageSample:
    image: np.ndarray  # (H, W, channels) in [0, 1]
    instances: list
    domain: str
    seed: int

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def _palette(n: int, hue_shift: float, sat: float, val: float) -> tuple:
    return tuple(
        tuple(round(c, 6) for c in colorsys.hsv_to_rgb((k / n + hue_shift) % 1.0, sat, val))
        for k in range(n)
    )


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    channels: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 12
    max_size: int = 26
    max_iou: float = 0.2
    source_background: tuple = (0.12, 0.12, 0.14)
    target_background: tuple = (0.22, 0.20, 0.16)
    source_palette: tuple = ()
    target_palette: tuple = ()
    pixel_noise: float = 0.04
    stripe_period: int = 4

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("scene.height and scene.width must be >= 32")
        if self.num_classes < 2:
            raise ValueError("scene.num_classes must be >= 2")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValueError("scene.min_objects/max_objects: need 1 <= min <= max")
        if not (2 <= self.min_size <= self.max_size <= min(self.height, self.width)):
            raise ValueError("scene.min_size/max_size out of range")
        if not (0.0 <= self.max_iou <= 1.0):
            raise ValueError("scene.max_iou must lie in [0, 1]")
        if not self.source_palette:
            object.__setattr__(self, "source_palette", _palette(self.num_classes, 0.0, 0.85, 0.95))
        if not self.target_palette:
            # fixed hue rotation of the source palette, darker
            object.__setattr__(self, "target_palette", _palette(self.num_classes, 0.2, 0.7, 0.55))
        for name in ("source_palette", "target_palette"):
            pal = getattr(self, name)
            if len(pal) != self.num_classes:
                raise ValueError(f"scene.{name} needs {self.num_classes} colors")
            object.__setattr__(self, name, tuple(tuple(float(c) for c in col) for col in pal))
        for name in ("source_background", "target_background"):
            object.__setattr__(self, name, tuple(float(c) for c in getattr(self, name)))


def sample_layout(rng: np.random.Generator, cfg: SceneConfig) -> list:
    """Draw non-overlapping (IoU <= cap) instances; failed placements are skipped."""
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed: list = []
    for _ in range(n):
        cls = int(rng.integers(0, cfg.num_classes))
        for _try in range(MAX_PLACEMENT_TRIES):
            w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            h = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            x1 = int(rng.integers(0, cfg.width - w + 1))
            y1 = int(rng.integers(0, cfg.height - h + 1))
            box = (x1, y1, x1 + w, y1 + h)
            if all(iou(box, other.box) <= cfg.max_iou for other in placed):
                placed.append(Instance(cls, box))
                break
    return placed


def shape_mask(kind: int, box, height: int, width: int) -> np.ndarray:
    """Boolean raster of shape ``kind`` (0 rect, 1 ellipse, 2 triangle) inscribed in ``box``.

    Pixel (r, c) is tested at its center (c + 0.5, r + 0.5); the max edge is open.
    """
    x1, y1, x2, y2 = box
    yc = np.arange(height)[:, None] + 0.5
    xc = np.arange(width)[None, :] + 0.5
    inside = (xc >= x1) & (xc < x2) & (yc >= y1) & (yc < y2)
    if kind == 0:
        return inside
    cx, cy = 0.5 * (x1 + x2), 0.5 * (y1 + y2)
    hw, hh = 0.5 * (x2 - x1), 0.5 * (y2 - y1)
    if kind == 1:
        return inside & (((xc - cx) / hw) ** 2 + ((yc - cy) / hh) ** 2 <= 1.0)
    half = (yc - y1) / (y2 - y1) * hw
    return inside & (np.abs(xc - cx) <= half)


def render(instances: Sequence[Instance], cfg: SceneConfig, domain: str,
           rng: np.random.Generator) -> np.ndarray:
    H, W, ch = cfg.height, cfg.width, cfg.channels
    if domain == "source":
        bg, palette = cfg.source_background, cfg.source_palette
    else:
        bg, palette = cfg.target_background, cfg.target_palette
    img = np.empty((H, W, ch))
    img[:] = np.resize(np.asarray(bg), ch)
    stripes = ((np.arange(H) // max(cfg.stripe_period // 2, 1)) % 2 == 1)[:, None]
    for inst in instances:
        mask = shape_mask(inst.class_id % 3, inst.box, H, W)
        color = np.resize(np.asarray(palette[inst.class_id]), ch)
        img[mask] = color
        if domain == "target":
            img[mask & stripes] *= 0.6
    img += rng.uniform(-cfg.pixel_noise, cfg.pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_scene(seed: int, cfg: SceneConfig, domain: str = "source") -> ImageSample:
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    instances = sample_layout(make_rng(seed, GEOMETRY_STREAM), cfg)
    image = render(instances, cfg, domain, make_rng(seed, APPEARANCE_STREAM))
    return ImageSample(image, instances, domain, int(seed))


def generate_dataset(seed: int, n: int, cfg: SceneConfig, domain: str = "source") -> list:
    if n < 1:
        raise ValueError("generate_dataset: n must be >= 1")
    return [generate_scene(child_seed(seed, k), cfg, domain) for k in range(n)]


# ---------------------------------------------------------------------------
# COCO-style interop


def to_coco(dataset: Sequence[ImageSample], num_classes: int | None = None) -> dict:
    if num_classes is None:
        num_classes = 1 + max((i.class_id for s in dataset for i in s.instances), default=-1)
    images, annotations = [], []
    ann_id = 1
    for img_id, sample in enumerate(dataset, start=1):
        images.append({
            "id": img_id,
            "width": sample.width,
            "height": sample.height,
            "file_name": f"{sample.domain}_{img_id:06d}.ppm",
            "seed": sample.seed,
            "domain": sample.domain,
        })
        for inst in sample.instances:
            x1, y1, x2, y2 = inst.box
            w, h = x2 - x1, y2 - y1
            annotations.append({
                "id": ann_id,
                "image_id": img_id,
                "category_id": inst.class_id,
                "bbox": [x1, y1, w, h],
                "area": w * h,
                "iscrowd": 0,
            })
            ann_id += 1
    categories = [{"id": c, "name": f"class_{c}"} for c in range(num_classes)]
    return {"images": images, "annotations": annotations, "categories": categories}


def export_coco_json(dataset: Sequence[ImageSample], path, num_classes: int | None = None) -> str:
    path = os.fspath(path)
    payload = to_coco(dataset, num_classes)
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)
    except OSError as exc:
        raise OSError(f"cannot write COCO export to {path}: {exc}") from exc
    return path


def load_coco_json(path) -> list:
    """Read an exported file back as ``[(image_record, [Instance, ...]), ...]``."""
    with open(os.fspath(path)) as fh:
        payload = json.load(fh)
    by_image = {img["id"]: (img, []) for img in payload["images"]}
    for ann in payload["annotations"]:
        x, y, w, h = ann["bbox"]
        by_image[ann["image_id"]][1].append(Instance(ann["category_id"], (x, y, x + w, y + h)))
    return [by_image[k] for k in sorted(by_image)]


def save_ppm(image: np.ndarray, path) -> None:
    """Binary PPM dump for quick visual inspection."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    h, w = arr.shape[:2]
    with open(os.fspath(path), "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr[:, :, :3].tobytes())
