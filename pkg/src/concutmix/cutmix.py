"""CutMix: paste a rectangular foreground patch onto a background image."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MixBox:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)`` on the (W, H) grid."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass(frozen=True, eq=False)
class SyntheticSample:
    image: np.ndarray
    area_label: np.ndarray
    fg_class: int
    bg_class: int
    lambda_eff: float
    box: MixBox


def draw_lambda(rng) -> float:
    """Uniform area ratio on the open interval (0, 1)."""
    lam = rng.random()
    while lam == 0.0:
        lam = rng.random()
    return lam


def sample_box(width: int, height: int, lambda_raw: float, rng, center=None) -> MixBox:
    """Box with side lengths ``W*sqrt(lam)`` x ``H*sqrt(lam)`` around a uniform
    pixel center, clipped to the image. Clipping can shrink the effective area."""
    cut_w = max(1, int(width * math.sqrt(lambda_raw)))
    cut_h = max(1, int(height * math.sqrt(lambda_raw)))
    if center is None:
        cx = int(rng.integers(width))
        cy = int(rng.integers(height))
    else:
        cx, cy = center
    x0 = cx - cut_w // 2
    y0 = cy - cut_h // 2
    return MixBox(
        max(x0, 0), max(y0, 0), min(x0 + cut_w, width), min(y0 + cut_h, height)
    )


def area_label(fg_class: int, bg_class: int, lam: float, num_classes: int) -> np.ndarray:
    label = np.zeros(num_classes)
    if fg_class == bg_class:
        label[fg_class] = 1.0
        return label
    label[fg_class] += lam
    label[bg_class] += 1.0 - lam
    return label


def mix(foreground, background, box: MixBox, num_classes: int) -> SyntheticSample:
    """Copy ``box`` from the foreground into the background.

    ``foreground`` and ``background`` are ``(image, class_id)`` pairs with
    images of shape (W, H, C).
    """
    fg_img, fg_class = foreground
    bg_img, bg_class = background
    if fg_img.shape != bg_img.shape:
        raise ValueError(f"shape mismatch: {fg_img.shape} vs {bg_img.shape}")
    w, h = fg_img.shape[:2]
    if not (0 <= box.x0 < box.x1 <= w and 0 <= box.y0 < box.y1 <= h):
        raise ValueError(f"{box} does not fit a {w}x{h} image")
    image = np.array(bg_img, copy=True)
    image[box.x0:box.x1, box.y0:box.y1] = fg_img[box.x0:box.x1, box.y0:box.y1]
    lam = box.area / (w * h)
    return SyntheticSample(
        image=image,
        area_label=area_label(fg_class, bg_class, lam, num_classes),
        fg_class=int(fg_class),
        bg_class=int(bg_class),
        lambda_eff=lam,
        box=box,
    )
