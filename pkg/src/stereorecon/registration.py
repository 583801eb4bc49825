"""Pairwise rigid registration.

Point-to-plane ICP minimizes the summed squared plane distance
sum_K ((T q - p) . n_p)^2 over correspondences K found by nearest-neighbor
search from the source into the target. A closed-form point-to-point
variant serves as the convergence baseline, and a coarse-to-fine driver
produces the 6x6 information matrix consumed by pose-graph edges.

Correspondence search and the 6x6 accumulation run in a fixed source-id
order, so results are bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .cloud import PointCloud, SpatialIndex, estimate_normals, voxel_downsample
from .errors import (
    DegenerateGeometry,
    DegenerateNormalSystem,
    InvalidParameter,
    TooFewCorrespondences,
)
from .geom import RigidTransform, Twist

# Tikhonov damping on the 6x6 normal equations, scaled by the mean of the
# diagonal; guards near-degenerate geometry without an adaptive schedule.
DAMPING = 1e-10
CONDITION_LIMIT = 1e12
# Sub-nanometer floor for the relative RMSE-change test: below this the
# RMSE sequence is rounding noise and its relative change never settles.
RMSE_FLOOR = 1e-9


@dataclass(frozen=True)
class IcpParams:
    """Convergence knobs shared by both ICP variants."""

    max_correspondence_dist: float
    max_iterations: int = 30
    rel_rmse_tol: float = 1e-6
    min_correspondences: int = 6

    def __post_init__(self):
        if self.max_correspondence_dist <= 0:
            raise InvalidParameter("max_correspondence_dist must be positive")
        if self.max_iterations <= 0:
            raise InvalidParameter("max_iterations must be positive")
        if self.rel_rmse_tol <= 0:
            raise InvalidParameter("rel_rmse_tol must be positive")
        if self.min_correspondences < 6:
            raise InvalidParameter("min_correspondences must be at least 6")


@dataclass(frozen=True)
class CorrespondenceSet:
    """Matched (source id, target id) pairs with their Euclidean distances."""

    source_ids: np.ndarray
    target_ids: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.source_ids)


@dataclass(frozen=True)
class IcpResult:
    """Registration outcome.

    ``objective`` is the final value of the minimized objective: summed
    squared plane distances for point-to-plane, summed squared point
    distances for point-to-point, both over ``correspondences`` at
    ``transform``. ``rmse_history`` holds the inlier RMSE observed at each
    correspondence round.
    """

    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    iterations: int
    converged: bool
    objective: float
    correspondences: CorrespondenceSet
    rmse_history: list[float] = field(default_factory=list)


def _find_correspondences(
    source_xyz: np.ndarray,
    index: SpatialIndex,
    max_dist: float,
    target_normal_ok: np.ndarray | None,
) -> CorrespondenceSet:
    ids, dists = index.nearest_batch(source_xyz, max_dist)
    hit = ids >= 0
    if target_normal_ok is not None:
        hit &= np.where(hit, target_normal_ok[np.maximum(ids, 0)], False)
    source_ids = np.nonzero(hit)[0]
    return CorrespondenceSet(source_ids, ids[source_ids], dists[source_ids])


def _plane_system(x: np.ndarray, p: np.ndarray, n: np.ndarray):
    """Normal equations for the linearized plane residual (x - p) . n.

    The Jacobian row over a left-multiplied twist (omega, v) is
    [x cross n, n].
    """
    residuals = np.einsum("ki,ki->k", x - p, n)
    jac = np.concatenate([np.cross(x, n), n], axis=1)
    h = jac.T @ jac
    b = jac.T @ residuals
    return h, b, residuals, jac


def _solve_damped(h: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Damping absorbs mild ill-conditioning; a system whose raw condition
    # estimate exceeds the limit is genuinely unconstrained (e.g. two
    # planes sliding on each other) and must be reported, not "solved".
    if np.linalg.cond(h) > CONDITION_LIMIT:
        raise DegenerateNormalSystem(
            "6x6 normal equations are rank deficient beyond damping"
        )
    scale = np.trace(h) / 6.0
    damped = h + DAMPING * scale * np.eye(6)
    return np.linalg.solve(damped, -b)


def _point_to_point_step(x: np.ndarray, p: np.ndarray) -> RigidTransform:
    """Closed-form least-squares rigid alignment of x onto p (Kabsch)."""
    cx = x.mean(axis=0)
    cp = p.mean(axis=0)
    cross_cov = (x - cx).T @ (p - cp)
    u, s, vt = np.linalg.svd(cross_cov)
    if s[1] <= 1e-12 * max(s[0], np.finfo(np.float64).tiny):
        raise DegenerateGeometry("matched pairs are collinear")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rotation, cp - rotation @ cx)


def _run_icp(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform,
    params: IcpParams,
    point_to_plane: bool,
) -> IcpResult:
    if point_to_plane and not target.has_normals:
        raise InvalidParameter("point-to-plane ICP needs target normals")
    if len(source) == 0 or len(target) == 0:
        raise TooFewCorrespondences("source or target cloud is empty")

    index = SpatialIndex(target)
    normal_ok = target.normals_valid if point_to_plane else None
    n_source = len(source)

    transform = init
    best: tuple[float, RigidTransform] | None = None
    history: list[float] = []
    prev_rmse = None
    converged = False
    iterations = 0

    for _ in range(params.max_iterations):
        iterations += 1
        x = source.positions @ transform.rotation.T + transform.translation
        corr = _find_correspondences(
            x, index, params.max_correspondence_dist, normal_ok
        )
        if len(corr) < params.min_correspondences:
            raise TooFewCorrespondences(
                f"{len(corr)} correspondences < minimum {params.min_correspondences}"
            )
        rmse = float(np.sqrt(np.mean(corr.distances**2)))
        history.append(rmse)
        if best is None or rmse < best[0]:
            best = (rmse, transform)
        if prev_rmse is not None:
            if abs(prev_rmse - rmse) <= params.rel_rmse_tol * max(prev_rmse, RMSE_FLOOR):
                converged = True
                break
        prev_rmse = rmse

        xs = x[corr.source_ids]
        ps = target.positions[corr.target_ids]
        if point_to_plane:
            h, b, _, _ = _plane_system(xs, ps, target.normals[corr.target_ids])
            xi = _solve_damped(h, b)
            transform = geom.compose(geom.exp(Twist.from_vector(xi)), transform)
        else:
            transform = geom.compose(_point_to_point_step(xs, ps), transform)

    # Report statistics consistently at the best transform seen.
    transform = best[1]
    x = source.positions @ transform.rotation.T + transform.translation
    corr = _find_correspondences(x, index, params.max_correspondence_dist, normal_ok)
    fitness = len(corr) / n_source
    inlier_rmse = (
        float(np.sqrt(np.mean(corr.distances**2))) if len(corr) else float("nan")
    )
    xs = x[corr.source_ids]
    ps = target.positions[corr.target_ids]
    if point_to_plane:
        residuals = np.einsum("ki,ki->k", xs - ps, target.normals[corr.target_ids])
    else:
        residuals = corr.distances
    objective = float(residuals @ residuals)

    return IcpResult(
        transform=transform,
        fitness=fitness,
        inlier_rmse=inlier_rmse,
        iterations=iterations,
        converged=converged,
        objective=objective,
        correspondences=corr,
        rmse_history=history,
    )


def icp_point_to_plane(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform,
    params: IcpParams,
) -> IcpResult:
    """Iteratively minimize summed squared point-to-plane distances.

    Each round matches every source point (moved by the current transform)
    to its nearest target point within ``max_correspondence_dist``, solves
    the damped 6x6 normal equations of the linearized plane residuals for a
    twist update, and left-composes its exponential onto the transform.
    Stops when the relative inlier-RMSE change drops below
    ``rel_rmse_tol`` or after ``max_iterations`` rounds.

    Target normals flagged invalid (degenerate estimation neighborhoods)
    never participate in correspondences.

    Raises:
        TooFewCorrespondences: fewer than ``min_correspondences`` matches
            at any round.
        DegenerateNormalSystem: the damped system remains ill-conditioned.
    """
    return _run_icp(source, target, init, params, point_to_plane=True)


def icp_point_to_point(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform,
    params: IcpParams,
) -> IcpResult:
    """Baseline ICP: per-round closed-form rigid alignment of matched pairs.

    Raises:
        TooFewCorrespondences: fewer than ``min_correspondences`` matches.
        DegenerateGeometry: matched pairs are collinear.
    """
    return _run_icp(source, target, init, params, point_to_plane=False)


@dataclass(frozen=True)
class PairwiseResult:
    """Coarse-to-fine registration outcome with its edge weight."""

    transform: RigidTransform
    information: np.ndarray
    fitness: float
    inlier_rmse: float


def _with_normals(cloud: PointCloud, k: int = 30) -> PointCloud:
    if cloud.has_normals:
        return cloud
    return estimate_normals(cloud, k=min(k, len(cloud) - 1), viewpoint=(0.0, 0.0, 0.0))


def information_matrix(
    source: PointCloud,
    target: PointCloud,
    transform: RigidTransform,
    corr: CorrespondenceSet,
) -> np.ndarray:
    """Sum of J J^T over plane-residual Jacobian rows at ``transform``."""
    x = source.positions @ transform.rotation.T + transform.translation
    xs = x[corr.source_ids]
    n = target.normals[corr.target_ids]
    jac = np.concatenate([np.cross(xs, n), n], axis=1)
    return jac.T @ jac


def pairwise_register(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform,
    coarse_voxel: float,
    fine_voxel: float,
    params: IcpParams | None = None,
) -> PairwiseResult:
    """Two-stage point-to-plane registration on voxel-downsampled clouds.

    Each stage matches within 1.5x its voxel size. The information matrix
    is the plane-Jacobian Gram matrix evaluated at the final transform over
    the fine-stage correspondences. Target normals are estimated (viewpoint
    at the local origin) when the input lacks them.

    Raises:
        InvalidParameter: unless coarse_voxel > fine_voxel > 0.
    """
    if not coarse_voxel > fine_voxel > 0:
        raise InvalidParameter("need coarse_voxel > fine_voxel > 0")
    base = params or IcpParams(max_correspondence_dist=1.0)

    stages = []
    for voxel in (coarse_voxel, fine_voxel):
        src = voxel_downsample(source, voxel)
        tgt = _with_normals(voxel_downsample(target, voxel))
        stages.append(
            (
                src,
                tgt,
                IcpParams(
                    max_correspondence_dist=1.5 * voxel,
                    max_iterations=base.max_iterations,
                    rel_rmse_tol=base.rel_rmse_tol,
                    min_correspondences=base.min_correspondences,
                ),
            )
        )

    coarse_src, coarse_tgt, coarse_params = stages[0]
    coarse = icp_point_to_plane(coarse_src, coarse_tgt, init, coarse_params)
    fine_src, fine_tgt, fine_params = stages[1]
    fine = icp_point_to_plane(fine_src, fine_tgt, coarse.transform, fine_params)

    info = information_matrix(fine_src, fine_tgt, fine.transform, fine.correspondences)
    return PairwiseResult(
        transform=fine.transform,
        information=info,
        fitness=fine.fitness,
        inlier_rmse=fine.inlier_rmse,
    )
