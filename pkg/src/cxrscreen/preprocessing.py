"""Deterministic pixel operations: crop, bilinear resize, normalize, flip.

Every image is a 2-D float array ("image buffer"): row-major intensities,
[0, 255] before normalization and [0, 1] after. Resampling is bilinear with
half-pixel-center coordinates and no anti-aliasing, so results are exactly
reproducible. Preprocessed stacks can be persisted in a small binary tensor
container (see ``write_tensor``).
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
from PIL import Image

TENSOR_MAGIC = b"CXRT"


def as_image(img: np.ndarray) -> np.ndarray:
    """Validate and return a 2-D float64 image buffer."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("image must be non-empty")
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    return arr


def to_grayscale(arr: np.ndarray) -> np.ndarray:
    """Reduce an (H, W, 3+) color array to grayscale by channel mean."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] >= 3:
        return arr[:, :, :3].mean(axis=2)
    raise ValueError(f"cannot interpret shape {arr.shape} as an image")


def load_image(path: Path | str) -> np.ndarray:
    """Read an 8-bit PNG/JPEG as a 2-D array of intensities in [0, 255]."""
    with Image.open(path) as img:
        if img.mode == "L":
            arr = np.asarray(img, dtype=np.float64)
        else:
            arr = to_grayscale(np.asarray(img.convert("RGB"), dtype=np.float64))
    return arr


def crop_top(img: np.ndarray, fraction: float = 0.08) -> np.ndarray:
    """Remove the top floor(fraction * height) rows (embedded-text band)."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    img = as_image(img)
    rows = math.floor(fraction * img.shape[0])
    return img[rows:, :].copy()


def resize(img: np.ndarray, side: int = 480) -> np.ndarray:
    """Bilinear resample to a square side x side buffer."""
    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    img = as_image(img)
    return _bilinear(img, side, side)


def _bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resample, clamped at the borders.

    Uses the lerp form v0 + w*(v1 - v0) so constant inputs map to the same
    constant exactly.
    """
    in_h, in_w = img.shape
    src_y = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    src_x = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    src_y = np.clip(src_y, 0.0, in_h - 1.0)
    src_x = np.clip(src_x, 0.0, in_w - 1.0)
    y0 = np.floor(src_y).astype(np.intp)
    x0 = np.floor(src_x).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (src_y - y0)[:, None]
    wx = (src_x - x0)[None, :]

    v00 = img[np.ix_(y0, x0)]
    v01 = img[np.ix_(y0, x1)]
    v10 = img[np.ix_(y1, x0)]
    v11 = img[np.ix_(y1, x1)]
    top = v00 + wx * (v01 - v00)
    bottom = v10 + wx * (v11 - v10)
    return top + wy * (bottom - top)


def normalize(img: np.ndarray) -> np.ndarray:
    """Map 8-bit-range intensities [0, 255] to [0, 1] by dividing by 255."""
    img = as_image(img)
    if img.min() < 0.0 or img.max() > 255.0:
        raise ValueError(
            f"intensities outside [0, 255] (min {img.min():.3f}, max {img.max():.3f}); corrupt input?"
        )
    return img / 255.0


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    return as_image(img)[:, ::-1].copy()


def preprocess(img: np.ndarray, crop_fraction: float = 0.08, side: int = 480) -> np.ndarray:
    """Full deterministic pipeline: grayscale -> crop -> resize -> normalize."""
    img = to_grayscale(np.asarray(img, dtype=np.float64))
    img = crop_top(img, crop_fraction)
    img = resize(img, side)
    out = normalize(img)
    assert out.shape == (side, side)
    return out


def preprocess_files(
    paths: list[Path | str], crop_fraction: float = 0.08, side: int = 480
) -> np.ndarray:
    """Load and preprocess a list of image files into an (N, side, side) stack."""
    stack = np.empty((len(paths), side, side), dtype=np.float32)
    for i, path in enumerate(paths):
        stack[i] = preprocess(load_image(path), crop_fraction, side)
    return stack


# ---------------------------------------------------------------------------
# Binary tensor container
#
# Layout (little-endian):
#   bytes 0-3   magic b"CXRT"
#   bytes 4-7   uint32 ndim
#   next        ndim * uint32 dims
#   rest        float32 values, row-major


def write_tensor(path: Path | str, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with Path(path).open("wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path: Path | str) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic {raw[:4]!r})")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    expected = offset + 4 * count
    if len(raw) != expected:
        raise ValueError(f"{path}: payload size {len(raw)} does not match dims {dims}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return data.reshape(dims).copy()
