"""Point-cloud construction, indexing, normals, decimation, depth alignment.

Clouds and indexes are immutable once built; index queries and normal
estimation are pure and order-independent, so everything here is safe to
call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateInput,
    DimensionMismatch,
    InsufficientOverlap,
    InvalidParameter,
    TooFewPoints,
)
from .geom import RigidTransform

# Two smallest covariance eigenvalues closer than this (relative to the
# largest) mean the neighborhood is collinear; the normal is then flagged.
DEGENERATE_EIGENVALUE_GAP = 1e-12


@dataclass(frozen=True)
class PinholeIntrinsics:
    """Pinhole camera parameters for back-projection (all in pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameter("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise InvalidParameter("principal point must lie inside the image")


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel metric depth in meters; invalid pixels are NaN."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidParameter("depth map must be a 2D array")
        valid = arr[np.isfinite(arr)]
        if valid.size and (valid <= 0).any():
            raise InvalidParameter("valid depth values must be strictly positive")
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


def _optional_array(values, n: int, name: str) -> np.ndarray | None:
    if values is None:
        return None
    arr = np.asarray(values, dtype=np.float64).copy()
    if arr.shape[0] != n:
        raise DimensionMismatch(f"{name} length {arr.shape[0]} != positions length {n}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Positions in meters with optional unit normals and RGB colors in [0,1].

    ``normals_valid`` flags normals whose estimating neighborhood was
    non-degenerate; ``None`` means all normals are trustworthy.
    """

    positions: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None
    normals_valid: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3).copy()
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        n = len(pos)
        normals = _optional_array(self.normals, n, "normals")
        if normals is not None:
            lengths = np.linalg.norm(normals, axis=1)
            if lengths.size and np.abs(lengths - 1.0).max() > 1e-6:
                raise InvalidParameter("normals must have unit length")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "colors", _optional_array(self.colors, n, "colors"))
        if self.normals_valid is not None:
            flags = np.asarray(self.normals_valid, dtype=bool).copy()
            if flags.shape[0] != n:
                raise DimensionMismatch("normals_valid length mismatch")
            flags.setflags(write=False)
            object.__setattr__(self, "normals_valid", flags)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    @property
    def has_colors(self) -> bool:
        return self.colors is not None


def transform_cloud(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Rigidly move a cloud: positions get R p + t, normals get R n."""
    positions = cloud.positions @ t.rotation.T + t.translation
    normals = cloud.normals @ t.rotation.T if cloud.normals is not None else None
    return PointCloud(positions, normals, cloud.colors, cloud.normals_valid)


def concatenate_clouds(clouds: list[PointCloud]) -> PointCloud:
    """Stack clouds; optional fields survive only if present on every input."""
    if not clouds:
        return PointCloud(np.zeros((0, 3)))
    positions = np.vstack([c.positions for c in clouds])
    normals = None
    if all(c.normals is not None for c in clouds):
        normals = np.vstack([c.normals for c in clouds])
    colors = None
    if all(c.colors is not None for c in clouds):
        colors = np.vstack([c.colors for c in clouds])
    flags = None
    if normals is not None and any(c.normals_valid is not None for c in clouds):
        flags = np.concatenate(
            [
                c.normals_valid
                if c.normals_valid is not None
                else np.ones(len(c), dtype=bool)
                for c in clouds
            ]
        )
    return PointCloud(positions, normals, colors, flags)


def backproject(
    depth: DepthMap,
    intr: PinholeIntrinsics,
    color: np.ndarray | None = None,
) -> PointCloud:
    """Lift valid depth pixels to camera-frame 3D points (+Z forward).

    Args:
        depth: metric depth map matching the intrinsics' dimensions.
        color: optional (height, width, 3) RGB image in [0, 1], sampled at
            the same pixels.

    Returns:
        One point per valid pixel, in row-major pixel order.
    """
    if (depth.height, depth.width) != (intr.height, intr.width):
        raise DimensionMismatch(
            f"depth {depth.width}x{depth.height} does not match intrinsics "
            f"{intr.width}x{intr.height}"
        )
    if color is not None:
        color = np.asarray(color, dtype=np.float64)
        if color.shape[:2] != (depth.height, depth.width):
            raise DimensionMismatch("color image does not match depth dimensions")

    mask = depth.valid_mask
    v, u = np.nonzero(mask)
    z = depth.data[mask]
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    positions = np.column_stack([x, y, z])
    colors = color[v, u] if color is not None else None
    return PointCloud(positions, colors=colors)


def estimate_normals(cloud: PointCloud, k: int = 30, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """Per-point normals from the covariance of each point's k neighbors.

    The normal is the eigenvector with the smallest eigenvalue of the
    covariance over the point and its k nearest neighbors, sign-flipped so
    that it faces the viewpoint. Collinear neighborhoods (two coincident
    smallest eigenvalues) are flagged in ``normals_valid``.

    Raises:
        TooFewPoints: if the cloud has fewer than k+1 points.
    """
    if k < 3:
        raise InvalidParameter("neighbor count k must be at least 3")
    n = len(cloud)
    if n < k + 1:
        raise TooFewPoints(f"need at least {k + 1} points for k={k}, have {n}")
    viewpoint = np.asarray(viewpoint, dtype=np.float64)

    tree = cKDTree(cloud.positions)
    # k+1 because the query point is its own nearest neighbor.
    _, idx = tree.query(cloud.positions, k=k + 1)
    neighborhoods = cloud.positions[idx]  # (n, k+1, 3)
    centered = neighborhoods - neighborhoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    eigvals, eigvecs = np.linalg.eigh(cov)

    normals = eigvecs[:, :, 0]
    gap = eigvals[:, 1] - eigvals[:, 0]
    scale = np.maximum(eigvals[:, 2], np.finfo(np.float64).tiny)
    valid = gap > DEGENERATE_EIGENVALUE_GAP * scale

    toward_view = viewpoint[None, :] - cloud.positions
    flip = np.einsum("ni,ni->n", normals, toward_view) < 0
    normals = np.where(flip[:, None], -normals, normals)

    return PointCloud(cloud.positions, normals, cloud.colors, valid)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """One centroid per occupied voxel, ordered by ascending voxel key.

    Colors are averaged; normals are averaged and renormalized (zero-sum
    normal bundles get a placeholder flagged in ``normals_valid``).
    """
    if voxel_size <= 0:
        raise InvalidParameter("voxel_size must be positive")
    if len(cloud) == 0:
        return cloud

    keys = np.floor(cloud.positions / voxel_size).astype(np.int64)
    unique_keys, inverse = np.unique(keys, axis=0, return_inverse=True)
    m = len(unique_keys)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)

    def group_mean(values: np.ndarray) -> np.ndarray:
        sums = np.column_stack(
            [np.bincount(inverse, weights=values[:, j], minlength=m) for j in range(values.shape[1])]
        )
        return sums / counts[:, None]

    positions = group_mean(cloud.positions)
    colors = group_mean(cloud.colors) if cloud.colors is not None else None

    normals = None
    flags = None
    if cloud.normals is not None:
        mean_normals = group_mean(cloud.normals)
        lengths = np.linalg.norm(mean_normals, axis=1)
        degenerate = lengths < 1e-12
        safe = np.where(degenerate, 1.0, lengths)
        normals = mean_normals / safe[:, None]
        normals[degenerate] = (0.0, 0.0, 1.0)
        if cloud.normals_valid is not None:
            member_ok = np.bincount(inverse, weights=cloud.normals_valid, minlength=m)
            flags = member_ok == counts
        else:
            flags = np.ones(m, dtype=bool)
        flags &= ~degenerate

    return PointCloud(positions, normals, colors, flags)


class SpatialIndex:
    """Immutable k-d tree over a cloud's positions.

    Queries return exactly what a brute-force linear scan would, with
    distance ties broken toward the smaller point id.
    """

    def __init__(self, cloud: PointCloud):
        self._positions = cloud.positions
        self._tree = cKDTree(cloud.positions)

    def __len__(self) -> int:
        return len(self._positions)

    def nearest(self, query, max_dist: float) -> tuple[int, float] | None:
        """Closest indexed point within max_dist, or None."""
        query = np.asarray(query, dtype=np.float64)
        dist, idx = self._tree.query(query, k=1)
        if not np.isfinite(dist) or dist > max_dist:
            return None
        # Resolve possible ties deterministically: take the smallest id
        # among all points at exactly the minimum distance.
        tied = self._tree.query_ball_point(query, r=float(dist))
        if len(tied) > 1:
            idx = min(tied)
        return int(idx), float(dist)

    def nearest_batch(self, queries: np.ndarray, max_dist: float) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized nearest lookup: (ids, distances); misses get id -1."""
        dists, ids = self._tree.query(queries, k=1, distance_upper_bound=max_dist)
        misses = ~np.isfinite(dists)
        ids = np.where(misses, -1, ids).astype(np.int64)
        return ids, dists

    def knn(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self._tree.query(queries, k=k)


def nearest(index: SpatialIndex, query, max_dist: float) -> tuple[int, float] | None:
    """Module-level alias for :meth:`SpatialIndex.nearest`."""
    return index.nearest(query, max_dist)


def align_scale_shift(relative: DepthMap, reference: DepthMap) -> tuple[float, float, DepthMap]:
    """Least-squares affine fit s*relative + t ~= reference over co-valid pixels.

    Returns:
        (s, t, aligned) where ``aligned`` maps every valid pixel of
        ``relative`` through the fit, with non-positive results invalidated.

    Raises:
        InsufficientOverlap: fewer than 2 jointly valid pixels.
        DegenerateInput: ``relative`` is constant over the overlap.
    """
    if relative.data.shape != reference.data.shape:
        raise DimensionMismatch("depth maps must have identical dimensions")
    mask = relative.valid_mask & reference.valid_mask
    if mask.sum() < 2:
        raise InsufficientOverlap("need at least 2 jointly valid pixels")
    r = relative.data[mask]
    f = reference.data[mask]
    r_mean = r.mean()
    f_mean = f.mean()
    r_centered = r - r_mean
    var = float(r_centered @ r_centered)
    if var == 0.0:
        raise DegenerateInput("relative depth is constant over the overlap")
    s = float(r_centered @ (f - f_mean)) / var
    t = f_mean - s * r_mean

    aligned = s * relative.data + t
    aligned[~(aligned > 0)] = np.nan
    return s, t, DepthMap(aligned)
