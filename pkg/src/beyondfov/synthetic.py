"""Procedural toy scenes: flat-colored geometric shapes with one class per
shape kind, used for overfit experiments and pipeline tests. Color follows
class identity exactly, so a model that learns the semantics can also predict
the pixels (and vice versa)."""

from __future__ import annotations

import numpy as np

from .geometry import circular_mask
from .model import Sample

NUM_CLASSES = 6

# class id -> (name, rgb in [0, 1])
PALETTE = (
    ("sky", (0.53, 0.81, 0.92)),
    ("ground", (0.35, 0.30, 0.25)),
    ("disc", (0.99, 0.85, 0.21)),
    ("building", (0.75, 0.25, 0.20)),
    ("pole", (0.15, 0.15, 0.18)),
    ("bush", (0.20, 0.55, 0.25)),
)


def make_scene(height: int, width: int, rng: np.random.Generator):
    """One scene as (image float32 (H, W, 3), labels uint8 (H, W))."""
    ys, xs = np.mgrid[0:height, 0:width]
    labels = np.zeros((height, width), np.uint8)

    horizon = int(rng.uniform(0.45, 0.65) * height)
    labels[horizon:] = 1

    bx = int(rng.uniform(0.05, 0.6) * width)
    bw = int(rng.uniform(0.15, 0.3) * width)
    btop = int(rng.uniform(0.15, 0.45) * height)
    labels[btop:horizon, bx:bx + bw] = 3

    cx = rng.uniform(0.15, 0.85) * width
    cy = rng.uniform(0.3, 0.9) * height
    r = rng.uniform(0.08, 0.16) * width
    labels[(xs - cx) ** 2 + (ys - cy) ** 2 <= r * r] = 5

    px = int(rng.uniform(0.1, 0.9) * width)
    pw = max(2, width // 24)
    ptop = int(rng.uniform(0.1, 0.4) * height)
    labels[ptop:, px:px + pw] = 4

    sx = rng.uniform(0.1, 0.9) * width
    sy = rng.uniform(0.05, 0.3) * height
    sr = rng.uniform(0.06, 0.12) * width
    labels[(xs - sx) ** 2 + (ys - sy) ** 2 <= sr * sr] = 2

    colors = np.array([c for _, c in PALETTE], np.float32)
    image = colors[labels]
    return image, labels


def toy_dataset(count: int, height: int = 64, width: int = 64, seed: int = 0,
                fov_radius: float | None = None) -> list[Sample]:
    """``count`` scenes sharing one centered FoV mask (default radius 0.47
    of the short side, leaving the corners blind)."""
    rng = np.random.default_rng(seed)
    if fov_radius is None:
        fov_radius = 0.47 * min(height, width)
    mask = circular_mask(width, height, ((width - 1) / 2, (height - 1) / 2),
                         fov_radius)
    return [Sample(image=img, mask=mask, labels=lab)
            for img, lab in (make_scene(height, width, rng) for _ in range(count))]
