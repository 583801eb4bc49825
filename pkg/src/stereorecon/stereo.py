"""Dense block-matching disparity and disparity-to-depth conversion.

The matcher minimizes a sum-of-absolute-differences cost over integer
disparities. Cost planes are computed one disparity candidate at a time;
each plane only reads the two input images, so results are bit-identical
whether the planes are evaluated sequentially or on a thread pool.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cloud import DepthMap
from .errors import DimensionMismatch, InvalidParameter

TEXTURELESS_VARIANCE = 1e-6


@dataclass(frozen=True)
class GrayImage:
    """Grayscale image with intensities in [0, 1], row-major."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidParameter("gray image must be a 2D array")
        if not np.isfinite(arr).all():
            raise InvalidParameter("gray image must be finite")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise InvalidParameter("gray image intensities must lie in [0, 1]")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class StereoRig:
    """Ideal rectified stereo rig: focal length, baseline, principal point."""

    focal_px: float
    baseline_m: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.focal_px <= 0:
            raise InvalidParameter("focal_px must be positive")
        if self.baseline_m <= 0:
            raise InvalidParameter("baseline_m must be positive")


@dataclass(frozen=True)
class DisparityMap:
    """Per-pixel disparity in pixels; invalid pixels are NaN."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidParameter("disparity map must be a 2D array")
        valid = arr[np.isfinite(arr)]
        if valid.size and (valid < 0).any():
            raise InvalidParameter("valid disparities must be non-negative")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.data)


def _window_sums(image: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window at every pixel with full support.

    Accumulates the window entries in a fixed row-major order (not via
    integral images) so that two windows with identical content produce
    bitwise-identical sums wherever they sit; this keeps SAD cost ties
    exact and the smaller-disparity tie-break meaningful.
    """
    h, w = image.shape
    size = 2 * radius + 1
    ih, iw = h - size + 1, w - size + 1
    out = np.zeros((ih, iw))
    for dy in range(size):
        for dx in range(size):
            out += image[dy : dy + ih, dx : dx + iw]
    return out


def compute_disparity(
    left: GrayImage,
    right: GrayImage,
    block_radius: int,
    max_disparity: int,
    uniqueness_ratio: float = 0.9,
    threads: int = 1,
) -> DisparityMap:
    """Winner-takes-all SAD block matching over d in [0, max_disparity].

    A pixel is invalid when its window exceeds the image bounds, the window
    is textureless (intensity variance below 1e-6), or the best cost is not
    clearly below the second-best cost found at a disparity differing by
    more than 1 px (``best >= uniqueness_ratio * second_best``). Cost ties
    are broken toward the smaller disparity.

    Raises:
        DimensionMismatch: images differ in size.
        InvalidParameter: block_radius outside [1, 15], max_disparity
            outside [1, width/2), or uniqueness_ratio outside (0, 1].
    """
    if left.data.shape != right.data.shape:
        raise DimensionMismatch(
            f"left {left.width}x{left.height} vs right {right.width}x{right.height}"
        )
    if not 1 <= block_radius <= 15:
        raise InvalidParameter("block_radius must be in [1, 15]")
    if not 1 <= max_disparity < left.width / 2:
        raise InvalidParameter("max_disparity must be in [1, width/2)")
    if not 0.0 < uniqueness_ratio <= 1.0:
        raise InvalidParameter("uniqueness_ratio must be in (0, 1]")

    h, w = left.data.shape
    r = block_radius
    ih, iw = h - 2 * r, w - 2 * r  # interior grid of fully supported pixels
    if ih <= 0 or iw <= 0:
        return DisparityMap(np.full((h, w), np.nan))
    n_candidates = max_disparity + 1

    cost = np.full((n_candidates, ih, iw), np.inf)

    def fill_plane(d: int) -> None:
        diff = np.abs(left.data[:, d:] - right.data[:, : w - d])
        sums = _window_sums(diff, r)  # rows: interior, cols: u - (d + r)
        cost[d, :, d:] = sums

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill_plane, range(n_candidates)))
    else:
        for d in range(n_candidates):
            fill_plane(d)

    best_d = np.argmin(cost, axis=0)  # first minimum == smallest disparity
    best_cost = np.take_along_axis(cost, best_d[None], axis=0)[0]

    # Second-best cost among disparities differing from the best by > 1 px.
    d_axis = np.arange(n_candidates)[:, None, None]
    far = np.where(np.abs(d_axis - best_d[None]) > 1, cost, np.inf)
    second_cost = far.min(axis=0)
    ambiguous = np.isfinite(second_cost) & (best_cost >= uniqueness_ratio * second_cost)

    window_n = (2 * r + 1) ** 2
    sums = _window_sums(left.data, r)
    square_sums = _window_sums(left.data**2, r)
    variance = (square_sums - sums**2 / window_n) / window_n
    textureless = variance < TEXTURELESS_VARIANCE

    disparity = best_d.astype(np.float64)
    disparity[ambiguous | textureless | ~np.isfinite(best_cost)] = np.nan

    out = np.full((h, w), np.nan)
    out[r : h - r, r : w - r] = disparity
    return DisparityMap(out)


def disparity_to_depth(
    disp: DisparityMap, rig: StereoRig, min_disparity_px: float = 0.5
) -> DepthMap:
    """Rectified triangulation Z = focal_px * baseline_m / d.

    Pixels that are invalid or whose disparity is below ``min_disparity_px``
    become invalid depth.
    """
    if min_disparity_px <= 0:
        raise InvalidParameter("min_disparity_px must be positive")
    usable = disp.valid_mask & (disp.data >= min_disparity_px)
    depth = np.full(disp.data.shape, np.nan)
    depth[usable] = rig.focal_px * rig.baseline_m / disp.data[usable]
    return DepthMap(depth)


def downsample_image(img: GrayImage, factor: int) -> GrayImage:
    """Block-mean decimation by an integer factor dividing both dimensions."""
    if factor < 1:
        raise InvalidParameter("factor must be >= 1")
    if factor == 1:
        return img
    h, w = img.data.shape
    if h % factor or w % factor:
        raise InvalidParameter(
            f"factor {factor} must divide image dimensions {w}x{h}"
        )
    blocks = img.data.reshape(h // factor, factor, w // factor, factor)
    return GrayImage(blocks.mean(axis=(1, 3)))
