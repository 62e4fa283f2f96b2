"""Seeded stochastic augmentation for normalized image buffers.

All geometric pieces (translation, rotation, horizontal flip, center zoom)
are composed into a single affine map and applied in one bilinear resampling
pass, so repeated augmentation does not accumulate interpolation blur.
Regions mapped from outside the source are zero-filled. The intensity shift
is additive with the result clamped back to [0, 1].

Parameter draws always happen in a fixed order (translate x, translate y,
rotation, flip, zoom, intensity) regardless of which pieces are enabled, so
two configurations that share a seed stay aligned draw-for-draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    """Ranges for each augmentation piece; a range of 0 disables the piece."""

    translate_frac: float = 0.10
    rotate_deg: float = 10.0
    hflip: bool = True
    zoom_frac: float = 0.15
    intensity_frac: float = 0.10
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("translate_frac", "zoom_frac", "intensity_frac"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {value}")
        if not 0.0 <= self.rotate_deg < 180.0:
            raise ValueError(f"rotate_deg must be in [0, 180), got {self.rotate_deg}")


def image_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for one image, keyed by (seed, *keys)."""
    return np.random.default_rng((seed, *keys))


def _draw_params(cfg: AugmentConfig, rng: np.random.Generator) -> tuple[float, float, float, bool, float, float]:
    dx = rng.uniform(-cfg.translate_frac, cfg.translate_frac)
    dy = rng.uniform(-cfg.translate_frac, cfg.translate_frac)
    theta = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
    flip = bool(rng.random() < 0.5) and cfg.hflip
    zoom = 1.0 + rng.uniform(-cfg.zoom_frac, cfg.zoom_frac)
    shift = rng.uniform(-cfg.intensity_frac, cfg.intensity_frac)
    return dx, dy, theta, flip, zoom, shift


def _affine_matrix(
    h: int, w: int, dx: float, dy: float, theta_deg: float, flip: bool, zoom: float
) -> np.ndarray:
    """Forward source->output map: translate o rotate o flip o zoom, about center."""
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0
    theta = math.radians(theta_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rot = np.array([[cos_t, -sin_t, 0.0], [sin_t, cos_t, 0.0], [0.0, 0.0, 1.0]])
    flp = np.array([[-1.0 if flip else 1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    scl = np.array([[zoom, 0.0, 0.0], [0.0, zoom, 0.0], [0.0, 0.0, 1.0]])
    to_center = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    from_center = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    shift = np.array([[1.0, 0.0, dx * w], [0.0, 1.0, dy * h], [0.0, 0.0, 1.0]])
    return shift @ to_center @ rot @ flp @ scl @ from_center


def _resample_affine(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Bilinear sample of img at matrix^-1 applied to the output grid."""
    h, w = img.shape
    inv = np.linalg.inv(matrix)
    ys, xs = np.mgrid[0:h, 0:w]
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]

    inside = (src_x >= 0.0) & (src_x <= w - 1.0) & (src_y >= 0.0) & (src_y <= h - 1.0)
    sx = np.clip(src_x, 0.0, w - 1.0)
    sy = np.clip(src_y, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = sx - x0
    wy = sy - y0

    top = img[y0, x0] + wx * (img[y0, x1] - img[y0, x0])
    bottom = img[y1, x0] + wx * (img[y1, x1] - img[y1, x0])
    out = top + wy * (bottom - top)
    out[~inside] = 0.0
    return out


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply one seeded draw of the full augmentation chain to a [0, 1] image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("augment expects a normalized image in [0, 1]")
    h, w = img.shape
    dx, dy, theta, flip, zoom, shift = _draw_params(cfg, rng)
    matrix = _affine_matrix(h, w, dx, dy, theta, flip, zoom)
    out = _resample_affine(img, matrix)
    if shift != 0.0:
        out = out + shift
    return np.clip(out, 0.0, 1.0)


def augment_indexed(img: np.ndarray, cfg: AugmentConfig, *keys: int) -> np.ndarray:
    """Augment with a generator derived from (cfg.seed, *keys).

    Keying by image index (and epoch, during training) makes the output
    independent of batch composition and worker scheduling.
    """
    return augment(img, cfg, image_rng(cfg.seed, *keys))
