"""Occlusion-based critical-factor maps for screening decisions.

The image is divided into a cells_per_side x cells_per_side grid. Each cell
is occluded in turn (filled with the image mean by default) and the drop in
the model's positive-class score is that cell's impact. Cells are then
re-occluded greedily, highest impact first, accumulating a mask until the
predicted class flips or the score falls to drop_threshold times the
original. The survivors are the critical factors: the regions the model is
actually leaning on.

This is a model-agnostic search: it only needs forward evaluations, so it
works on any scorer that maps an image batch to probabilities.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .architecture import ConvNet, forward


@dataclass(frozen=True)
class CriticalFactorMask:
    cells_per_side: int
    critical: np.ndarray  # bool (cells, cells); True = part of the mask
    impact: np.ndarray  # float (cells, cells); per-cell solo score drop
    selection_order: tuple[tuple[int, int], ...]
    cumulative_drops: tuple[float, ...]
    baseline_score: float
    masked_score: float
    decision_flipped: bool


def _cell_bounds(size: int, cells: int, index: int) -> tuple[int, int]:
    return size * index // cells, size * (index + 1) // cells


def _occlude(img: np.ndarray, cells: int, row: int, col: int, fill: float) -> np.ndarray:
    h, w = img.shape
    r0, r1 = _cell_bounds(h, cells, row)
    c0, c1 = _cell_bounds(w, cells, col)
    out = img.copy()
    out[r0:r1, c0:c1] = fill
    return out


def occlude_cells(
    img: np.ndarray, cells: int, which: np.ndarray | list[tuple[int, int]], fill: float
) -> np.ndarray:
    """Occlude a set of grid cells (boolean grid or coordinate list) at once."""
    if isinstance(which, np.ndarray) and which.dtype == bool:
        coords = [(int(r), int(c)) for r, c in zip(*np.nonzero(which))]
    else:
        coords = [(int(r), int(c)) for r, c in which]
    out = np.asarray(img, dtype=np.float64).copy()
    h, w = out.shape
    for row, col in coords:
        r0, r1 = _cell_bounds(h, cells, row)
        c0, c1 = _cell_bounds(w, cells, col)
        out[r0:r1, c0:c1] = fill
    return out


def identify_critical_factors(
    model: ConvNet,
    img: np.ndarray,
    cells_per_side: int = 12,
    drop_threshold: float = 0.5,
    fill: float | None = None,
    decision_threshold: float = 0.5,
) -> CriticalFactorMask:
    """Greedy occlusion search for the regions driving the model's score."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    cells = cells_per_side
    if cells < 1 or cells > min(img.shape):
        raise ValueError(f"cells_per_side must be in [1, {min(img.shape)}], got {cells}")
    if not 0.0 <= drop_threshold < 1.0:
        raise ValueError(f"drop_threshold must be in [0, 1), got {drop_threshold}")
    fill_value = float(img.mean()) if fill is None else float(fill)

    baseline = float(forward(model, img[None])[0])
    baseline_positive = baseline >= decision_threshold

    # one batched pass scores every single-cell occlusion
    probes = np.stack(
        [
            _occlude(img, cells, row, col, fill_value)
            for row in range(cells)
            for col in range(cells)
        ]
    ).astype(np.float32)
    scores = forward(model, probes)
    if not np.isfinite(scores).all() or not np.isfinite(baseline):
        raise RuntimeError("model produced non-finite scores during occlusion search")
    impact = (baseline - scores).reshape(cells, cells)

    order = np.argsort(-impact.ravel(), kind="stable")  # ties resolve row-major
    critical = np.zeros((cells, cells), dtype=bool)
    selection: list[tuple[int, int]] = []
    drops: list[float] = []
    current = img.copy()
    masked_score = baseline
    flipped = False
    for flat in order:
        row, col = divmod(int(flat), cells)
        if impact[row, col] <= 0.0:
            break
        current = _occlude(current, cells, row, col, fill_value)
        masked_score = float(forward(model, current[None].astype(np.float32))[0])
        critical[row, col] = True
        selection.append((row, col))
        drops.append(baseline - masked_score)
        flipped = (masked_score >= decision_threshold) != baseline_positive
        if flipped or masked_score <= drop_threshold * baseline:
            break

    return CriticalFactorMask(
        cells_per_side=cells,
        critical=critical,
        impact=impact,
        selection_order=tuple(selection),
        cumulative_drops=tuple(drops),
        baseline_score=baseline,
        masked_score=masked_score,
        decision_flipped=flipped,
    )


def render_overlay(
    img: np.ndarray, mask: CriticalFactorMask, path: Path | str, alpha: float = 0.45
) -> None:
    """Write a lossless PNG with the critical cells tinted red."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    img = np.asarray(img, dtype=np.float64)
    gray = np.clip(img * 255.0 if img.max() <= 1.0 else img, 0.0, 255.0)
    h, w = gray.shape
    rgb = np.stack([gray, gray, gray], axis=2)
    cells = mask.cells_per_side
    for row, col in zip(*np.nonzero(mask.critical)):
        r0, r1 = _cell_bounds(h, cells, int(row))
        c0, c1 = _cell_bounds(w, cells, int(col))
        patch = rgb[r0:r1, c0:c1]
        patch[:, :, 0] = (1.0 - alpha) * patch[:, :, 0] + alpha * 255.0
        patch[:, :, 1] = (1.0 - alpha) * patch[:, :, 1]
        patch[:, :, 2] = (1.0 - alpha) * patch[:, :, 2]
    Image.fromarray(rgb.round().astype(np.uint8), mode="RGB").save(path, format="PNG")


MASK_HEADER = ("row", "col", "impact", "critical")


def write_mask(mask: CriticalFactorMask, path: Path | str) -> None:
    """Cell-by-cell CSV: grid coordinates, solo impact, critical membership."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MASK_HEADER)
        for row in range(mask.cells_per_side):
            for col in range(mask.cells_per_side):
                writer.writerow(
                    [row, col, repr(float(mask.impact[row, col])), int(mask.critical[row, col])]
                )


def read_mask_grid(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    """Load (impact, critical) grids back from a mask CSV."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MASK_HEADER:
            raise ValueError(f"{path}: expected header {','.join(MASK_HEADER)}")
        rows = [(int(r), int(c), float(i), bool(int(k))) for r, c, i, k in reader]
    cells = max(r for r, _, _, _ in rows) + 1
    impact = np.zeros((cells, cells))
    critical = np.zeros((cells, cells), dtype=bool)
    for r, c, i, k in rows:
        impact[r, c] = i
        critical[r, c] = k
    return impact, critical
