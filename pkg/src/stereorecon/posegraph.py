"""Multiway registration: pose-graph construction, optimization, fusion.

Fragment k carries its own local frame; node k estimates the rigid map
from that frame into the frame of the reference fragment (node 0, held
fixed). Edges store relative measurements Z_ij mapping frame-j coordinates
into frame i, weighted by the 6x6 information matrix produced during
pairwise registration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import geom
from .cloud import (
    PointCloud,
    concatenate_clouds,
    estimate_normals,
    transform_cloud,
    voxel_downsample,
)
from .errors import (
    DimensionMismatch,
    InvalidParameter,
    RegistrationFailed,
    SingularSystem,
    StereoReconError,
)
from .geom import RigidTransform, Twist
from .registration import IcpParams, pairwise_register

logger = logging.getLogger(__name__)

LOOP_CLOSURE_MIN_FITNESS = 0.3
RELATIVE_OBJECTIVE_TOL = 1e-9
MAX_STEP_HALVINGS = 10

ODOMETRY = "odometry"
LOOP_CLOSURE = "loop_closure"


@dataclass(frozen=True)
class PoseEdge:
    """Relative measurement between nodes i < j with its confidence."""

    i: int
    j: int
    measurement: RigidTransform
    information: np.ndarray
    kind: str = ODOMETRY

    def __post_init__(self):
        if not 0 <= self.i < self.j:
            raise InvalidParameter(f"edge needs 0 <= i < j, got ({self.i}, {self.j})")
        if self.kind not in (ODOMETRY, LOOP_CLOSURE):
            raise InvalidParameter(f"unknown edge kind {self.kind!r}")
        info = np.asarray(self.information, dtype=np.float64)
        if info.shape != (6, 6):
            raise InvalidParameter("information matrix must be 6x6")
        if np.abs(info - info.T).max() > 1e-9:
            raise InvalidParameter("information matrix must be symmetric")
        eigs = np.linalg.eigvalsh(info)
        if eigs.min() < -1e-9 * max(eigs.max(), 1.0):
            raise InvalidParameter("information matrix must be positive semidefinite")
        info = info.copy()
        info.setflags(write=False)
        object.__setattr__(self, "information", info)


@dataclass(frozen=True)
class PoseGraph:
    """Absolute node poses plus relative-measurement edges."""

    nodes: tuple[RigidTransform, ...]
    edges: tuple[PoseEdge, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        for edge in self.edges:
            if edge.j >= len(self.nodes):
                raise InvalidParameter(
                    f"edge ({edge.i}, {edge.j}) references a missing node"
                )


def build_pose_graph(
    fragments: list[PointCloud],
    odometry_init: list[RigidTransform],
    loop_window: int = 3,
    coarse_voxel: float = 0.1,
    fine_voxel: float = 0.02,
    params: IcpParams | None = None,
) -> PoseGraph:
    """Register fragment pairs into a pose graph.

    Consecutive fragments get odometry edges (their registration must
    succeed); pairs up to ``loop_window`` apart get loop-closure edges that
    are kept only when registration fitness reaches 0.3, and are dropped
    with a log record otherwise. Both are seeded by the relative pose from
    ``odometry_init`` (absolute odometry, one pose per fragment). Node
    poses chain the odometry edges from node 0.

    Raises:
        RegistrationFailed: an odometry edge could not be registered.
    """
    n = len(fragments)
    if n < 2:
        raise InvalidParameter("need at least 2 fragments")
    if len(odometry_init) != n:
        raise DimensionMismatch(
            f"{len(odometry_init)} odometry poses for {n} fragments"
        )

    edges = []
    for i in range(n - 1):
        j = i + 1
        seed = geom.compose(geom.invert(odometry_init[i]), odometry_init[j])
        try:
            result = pairwise_register(
                fragments[j], fragments[i], seed, coarse_voxel, fine_voxel, params
            )
        except StereoReconError as err:
            raise RegistrationFailed(
                f"odometry edge ({i}, {j}) failed: {err}"
            ) from err
        edges.append(PoseEdge(i, j, result.transform, result.information, ODOMETRY))

    for i in range(n):
        for j in range(i + 2, min(i + loop_window, n - 1) + 1):
            seed = geom.compose(geom.invert(odometry_init[i]), odometry_init[j])
            try:
                result = pairwise_register(
                    fragments[j], fragments[i], seed, coarse_voxel, fine_voxel, params
                )
            except StereoReconError as err:
                logger.info("loop closure (%d, %d) dropped: %s", i, j, err)
                continue
            if result.fitness < LOOP_CLOSURE_MIN_FITNESS:
                logger.info(
                    "loop closure (%d, %d) dropped: fitness %.3f < %.1f",
                    i, j, result.fitness, LOOP_CLOSURE_MIN_FITNESS,
                )
                continue
            edges.append(
                PoseEdge(i, j, result.transform, result.information, LOOP_CLOSURE)
            )

    nodes = [RigidTransform.identity()]
    for i in range(n - 1):
        nodes.append(geom.compose(nodes[i], edges[i].measurement))
    return PoseGraph(tuple(nodes), tuple(edges))


def _twist_ad(xi: np.ndarray) -> np.ndarray:
    """Algebra adjoint ad_xi for the (omega, v) stacking."""
    ad = np.zeros((6, 6))
    ad[:3, :3] = geom.skew(xi[:3])
    ad[3:, :3] = geom.skew(xi[3:])
    ad[3:, 3:] = ad[:3, :3]
    return ad


def _edge_residual(edge: PoseEdge, nodes) -> np.ndarray:
    rel = geom.compose(geom.invert(nodes[edge.i]), nodes[edge.j])
    return geom.log(geom.compose(geom.invert(edge.measurement), rel)).as_vector()


def _edge_weight(edge: PoseEdge, r: np.ndarray, huber_delta: float):
    """(robust objective term, IRLS weight) for one edge."""
    s = float(r @ edge.information @ r)
    if edge.kind == LOOP_CLOSURE and s > huber_delta**2:
        root = np.sqrt(s)
        return 2.0 * huber_delta * root - huber_delta**2, huber_delta / root
    return s, 1.0


def _objective(graph_nodes, edges, huber_delta: float) -> float:
    total = 0.0
    for edge in edges:
        term, _ = _edge_weight(edge, _edge_residual(edge, graph_nodes), huber_delta)
        total += term
    return total


def optimize_pose_graph(
    graph: PoseGraph, max_iterations: int = 50, huber_delta: float = 1.0
) -> PoseGraph:
    """Gauss-Newton refinement of node poses; node 0 stays fixed.

    Minimizes the information-weighted squared twist residuals
    log(Z_ij^-1 P_i^-1 P_j) over all edges, with a Huber loss (scale
    ``huber_delta``) on loop-closure edges only. Increments left-multiply
    the node poses. Steps that would increase the objective are halved up
    to 10 times; the iteration stops when the relative objective decrease
    falls below 1e-9 or after ``max_iterations``.

    Raises:
        SingularSystem: the reduced Hessian is rank deficient (the graph
            is not rigidly constrained through node 0).
    """
    nodes = list(graph.nodes)
    n = len(nodes)
    free = n - 1  # node 0 is the gauge
    if free <= 0:
        return graph

    objective = _objective(nodes, graph.edges, huber_delta)
    for _ in range(max_iterations):
        h = np.zeros((6 * free, 6 * free))
        b = np.zeros(6 * free)
        for edge in graph.edges:
            r = _edge_residual(edge, nodes)
            _, weight = _edge_weight(edge, r, huber_delta)
            info = weight * edge.information
            # Inverse right Jacobian of the log map, truncated at second
            # order: exact at zero residual, where the fixed point sits.
            ad = _twist_ad(r)
            jr_inv = np.eye(6) + 0.5 * ad + (ad @ ad) / 12.0
            j_j = jr_inv @ geom.adjoint(geom.invert(nodes[edge.j]))
            j_i = -j_j
            bi, bj = edge.i - 1, edge.j - 1  # block indices; -1 == fixed node
            if bj >= 0:
                h[6 * bj : 6 * bj + 6, 6 * bj : 6 * bj + 6] += j_j.T @ info @ j_j
                b[6 * bj : 6 * bj + 6] += j_j.T @ info @ r
            if bi >= 0:
                h[6 * bi : 6 * bi + 6, 6 * bi : 6 * bi + 6] += j_i.T @ info @ j_i
                b[6 * bi : 6 * bi + 6] += j_i.T @ info @ r
            if bi >= 0 and bj >= 0:
                coupling = j_i.T @ info @ j_j
                h[6 * bi : 6 * bi + 6, 6 * bj : 6 * bj + 6] += coupling
                h[6 * bj : 6 * bj + 6, 6 * bi : 6 * bi + 6] += coupling.T

        try:
            np.linalg.cholesky(h)
        except np.linalg.LinAlgError:
            raise SingularSystem(
                "reduced pose-graph Hessian is rank deficient"
            ) from None
        delta = np.linalg.solve(h, -b)

        # Backtracking keeps the reported objective monotone.
        accepted = False
        scale = 1.0
        for _ in range(MAX_STEP_HALVINGS + 1):
            candidate = list(nodes)
            for k in range(1, n):
                xi = Twist.from_vector(scale * delta[6 * (k - 1) : 6 * k])
                candidate[k] = geom.compose(geom.exp(xi), nodes[k])
            candidate_objective = _objective(candidate, graph.edges, huber_delta)
            if candidate_objective <= objective:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        nodes = candidate
        previous, objective = objective, candidate_objective
        if previous - objective <= RELATIVE_OBJECTIVE_TOL * max(previous, 1e-30):
            break

    return PoseGraph(tuple(nodes), graph.edges)


def integrate(
    fragments: list[PointCloud], graph: PoseGraph, voxel_size: float
) -> PointCloud:
    """Fuse fragments through their node poses into one decimated cloud.

    Normals are re-estimated on the merged cloud (viewpoint at the mean
    node position) when any input fragment lacked them.
    """
    if len(fragments) != len(graph.nodes):
        raise DimensionMismatch(
            f"{len(fragments)} fragments for {len(graph.nodes)} nodes"
        )
    moved = [
        transform_cloud(frag, node) for frag, node in zip(fragments, graph.nodes)
    ]
    merged = voxel_downsample(concatenate_clouds(moved), voxel_size)
    if not merged.has_normals and len(merged) >= 4:
        viewpoint = np.mean([node.translation for node in graph.nodes], axis=0)
        merged = estimate_normals(
            merged, k=min(30, len(merged) - 1), viewpoint=viewpoint
        )
    return merged
