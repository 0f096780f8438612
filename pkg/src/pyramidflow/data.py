"""Synthetic multi-scale shapes scenes for toy detection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("square", "disk", "triangle")
_CLASS_COLORS = np.array([[0.9, 0.3, 0.2], [0.2, 0.8, 0.3], [0.25, 0.35, 0.95]])


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 4
    small: tuple = (5, 8)  # inclusive side ranges in pixels
    medium: tuple = (9, 32)
    large: tuple = (33, 56)
    color_jitter: float = 0.15
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        for name in ("small", "medium", "large"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"bad {name} size range {(lo, hi)}")
            if hi > self.image_size:
                raise ValueError(f"{name} objects up to {hi}px do not fit a {self.image_size}px image")

    def bins(self) -> dict:
        """Evaluation size bins by max side: (lo, hi]."""
        return {"small": (0.0, 8.0), "medium": (8.0, 32.0), "large": (32.0, float(self.image_size))}


def _box_iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _shape_mask(cls: int, x1: int, y1: int, side: int, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] + 0.5  # pixel centres
    x2, y2 = x1 + side, y1 + side
    inbox = (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)
    if CLASS_NAMES[cls] == "square":
        return inbox
    if CLASS_NAMES[cls] == "disk":
        cx, cy, r = x1 + side / 2.0, y1 + side / 2.0, side / 2.0
        return inbox & ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r)
    # apex at top centre, base along the bottom edge
    cx = x1 + side / 2.0
    half_width = (yy - y1) / 2.0
    return inbox & (np.abs(xx - cx) <= half_width)


def generate_scene(spec: SceneSpec, index: int):
    """Deterministic (image C x H x W, [((x1, y1, x2, y2), class), ...]) for ``index``."""
    if index < 0:
        raise ValueError("scene index must be nonnegative")
    rng = np.random.default_rng([spec.seed, index])
    n = spec.image_size
    image = np.full((3, n, n), 0.1) + rng.normal(0.0, spec.noise, size=(3, n, n))
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    ranges = (spec.small, spec.medium, spec.large)
    objects = []
    for _ in range(count):
        lo, hi = ranges[int(rng.integers(3))]
        side = int(rng.integers(lo, hi + 1))
        cls = int(rng.integers(spec.num_classes))
        for _attempt in range(30):
            x1 = int(rng.integers(0, n - side + 1))
            y1 = int(rng.integers(0, n - side + 1))
            box = (float(x1), float(y1), float(x1 + side), float(y1 + side))
            if all(_box_iou(box, b) <= 0.2 for b, _ in objects):
                break
        color = np.clip(_CLASS_COLORS[cls] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
        mask = _shape_mask(cls, x1, y1, side, n)
        image[:, mask] = color[:, None]
        objects.append((box, cls))
    return image, objects


def flip_horizontal(image: np.ndarray, objects, width: int):
    flipped = image[..., ::-1].copy()
    objs = [((width - b[2], b[1], width - b[0], b[3]), c) for b, c in objects]
    return flipped, objs


def make_split(spec: SceneSpec, count: int):
    scenes = [generate_scene(spec, i) for i in range(count)]
    return np.stack([s[0] for s in scenes]), [s[1] for s in scenes]
