"""Overlapping-patch algebra: extraction, aggregation, and mean projection.

All d x d windows that fit fully inside the image are used; border pixels
are simply covered by fewer windows, and the per-pixel coverage count
N(i,j) carries that into the solver's formulas. Patches are flattened
row-major into d^2-vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError


@dataclass
class PatchSet:
    """All fully-contained d x d patches of one image.

    side: patch side length d.
    positions: (n, 2) int array of top-left anchors, row-major order.
    patches: (n, d^2) float64 array, each row one flattened window.
    counts: (height, width) int array, N(i,j) = number of covering windows.
    """

    side: int
    positions: np.ndarray
    patches: np.ndarray
    counts: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


def coverage_counts(height: int, width: int, side: int) -> np.ndarray:
    """Per-pixel count of fully-contained windows covering each pixel.

    Interior pixels (at least side-1 away from every border) are covered by
    exactly side^2 windows.
    """
    ones = np.ones((height - side + 1, width - side + 1), dtype=np.int64)
    counts = np.zeros((height, width), dtype=np.int64)
    for a in range(side):
        for b in range(side):
            counts[a : a + ones.shape[0], b : b + ones.shape[1]] += ones
    return counts


def patch_anchors(height: int, width: int, side: int) -> np.ndarray:
    """Row-major (row, col) anchors of all fully-contained windows."""
    rows = np.arange(height - side + 1)
    cols = np.arange(width - side + 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def extract_patches(img: np.ndarray, side: int) -> PatchSet:
    """Extract every fully-contained side x side window of `img`.

    Raises ParameterError when side < 2 or the image is smaller than the
    window in either dimension.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ParameterError(f"expected a 2-D image, got shape {arr.shape}")
    height, width = arr.shape
    if side < 2:
        raise ParameterError(f"patch side must be at least 2, got {side}")
    if side > height or side > width:
        raise ParameterError(f"patch side {side} exceeds image dimensions {height}x{width}")
    windows = sliding_window_view(arr, (side, side))
    flat = windows.reshape(-1, side * side).copy()
    return PatchSet(
        side=side,
        positions=patch_anchors(height, width, side),
        patches=flat,
        counts=coverage_counts(height, width, side),
    )


def accumulate_patches(values: np.ndarray, height: int, width: int, side: int) -> np.ndarray:
    """Scatter-add patch values back onto the image grid.

    `values` has shape (n, side^2) in the extract_patches layout. Each pixel
    receives the sum of all covering patch entries. The sum is taken in a
    fixed order (one full slice-add per in-patch offset), so the result is
    deterministic regardless of how callers parallelize around it.
    """
    nh = height - side + 1
    nw = width - side + 1
    vals = values.reshape(nh, nw, side * side)
    out = np.zeros((height, width), dtype=np.float64)
    for a in range(side):
        for b in range(side):
            out[a : a + nh, b : b + nw] += vals[:, :, a * side + b]
    return out


def gather_pixels(img: np.ndarray, side: int) -> np.ndarray:
    """Adjoint of accumulate_patches' transpose: read each patch's pixels.

    Returns (n, side^2) values; gather_pixels(accumulate...) is not identity,
    but <accumulate(V), U> == <V, gather(U)> holds exactly.
    """
    arr = np.asarray(img, dtype=np.float64)
    windows = sliding_window_view(arr, (side, side))
    return windows.reshape(-1, side * side).copy()


def mean_subtract(p: np.ndarray) -> tuple[np.ndarray, float]:
    """Remove a patch's DC component: returns (p - mean(p), mean(p))."""
    vec = np.asarray(p, dtype=np.float64)
    mean = float(vec.mean())
    return vec - mean, mean


def center_rows(patches: np.ndarray) -> np.ndarray:
    """Apply the mean projection to every row of an (n, d^2) patch matrix."""
    return patches - patches.mean(axis=1, keepdims=True)


def mean_projection(side: int) -> np.ndarray:
    """Dense mean-subtraction projection of size d^2 x d^2.

    Symmetric and idempotent; annihilates constant vectors. Used only inside
    small dense solves; large-scale code applies it as "subtract row mean".
    """
    m = side * side
    return np.eye(m) - np.full((m, m), 1.0 / m)
