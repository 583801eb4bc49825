"""Deterministic synthetic scenes: ground-truth clouds, depth and stereo.

Scenes are unions of posed primitives (finite planes, spheres, boxes) with
analytic surface sampling, analytic ray intersection, and analytic
point-to-surface distance. Depth maps rendered here are metrically exact,
which is what the reconstruction round-trip tests rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloud import DepthMap, PinholeIntrinsics, PointCloud
from .errors import InvalidParameter, ParseError
from .geom import RigidTransform
from .stereo import GrayImage

_RAY_EPS = 1e-9


@dataclass(frozen=True)
class Plane:
    """Finite rectangle in the local z=0 plane, local normal +z."""

    size_x: float
    size_y: float
    pose: RigidTransform

    def area(self) -> float:
        return self.size_x * self.size_y

    def sample(self, n: int, rng: np.random.Generator):
        local = np.zeros((n, 3))
        local[:, 0] = rng.uniform(-0.5 * self.size_x, 0.5 * self.size_x, n)
        local[:, 1] = rng.uniform(-0.5 * self.size_y, 0.5 * self.size_y, n)
        positions = local @ self.pose.rotation.T + self.pose.translation
        normals = np.tile(self.pose.rotation[:, 2], (n, 1))
        return positions, normals

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        r_inv = self.pose.rotation.T
        o = r_inv @ (origin - self.pose.translation)
        d = dirs @ r_inv.T
        dz = d[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = -o[2] / dz
        x = o[0] + s * d[:, 0]
        y = o[1] + s * d[:, 1]
        hit = (
            (np.abs(dz) > 0)
            & (s > _RAY_EPS)
            & (np.abs(x) <= 0.5 * self.size_x)
            & (np.abs(y) <= 0.5 * self.size_y)
        )
        return np.where(hit, s, np.inf)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        local = (points - self.pose.translation) @ self.pose.rotation
        cx = np.clip(local[:, 0], -0.5 * self.size_x, 0.5 * self.size_x)
        cy = np.clip(local[:, 1], -0.5 * self.size_y, 0.5 * self.size_y)
        return np.sqrt(
            (local[:, 0] - cx) ** 2 + (local[:, 1] - cy) ** 2 + local[:, 2] ** 2
        )


@dataclass(frozen=True)
class Sphere:
    radius: float
    pose: RigidTransform

    def area(self) -> float:
        return 4.0 * math.pi * self.radius**2

    def sample(self, n: int, rng: np.random.Generator):
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return self.pose.translation + self.radius * dirs, dirs

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - self.pose.translation
        a = np.einsum("ni,ni->n", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4.0 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        s_near = (-b - sq) / (2.0 * a)
        s_far = (-b + sq) / (2.0 * a)
        s = np.where(s_near > _RAY_EPS, s_near, s_far)
        return np.where(hit & (s > _RAY_EPS), s, np.inf)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(
            np.linalg.norm(points - self.pose.translation, axis=1) - self.radius
        )


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in its local frame, centered at the local origin."""

    size_x: float
    size_y: float
    size_z: float
    pose: RigidTransform

    def _half(self) -> np.ndarray:
        return 0.5 * np.array([self.size_x, self.size_y, self.size_z])

    def area(self) -> float:
        sx, sy, sz = self.size_x, self.size_y, self.size_z
        return 2.0 * (sx * sy + sy * sz + sx * sz)

    def sample(self, n: int, rng: np.random.Generator):
        sx, sy, sz = self.size_x, self.size_y, self.size_z
        areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
        faces = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-0.5, 0.5, size=(n, 2))
        half = self._half()
        local = np.zeros((n, 3))
        normals_local = np.zeros((n, 3))
        # faces: (+x, -x, +y, -y, +z, -z); axis is the fixed coordinate
        for face in range(6):
            axis, sign = divmod(face, 2)
            sign = 1.0 if sign == 0 else -1.0
            m = faces == face
            others = [i for i in range(3) if i != axis]
            local[m, axis] = sign * half[axis]
            local[m, others[0]] = uv[m, 0] * 2.0 * half[others[0]]
            local[m, others[1]] = uv[m, 1] * 2.0 * half[others[1]]
            normals_local[m, axis] = sign
        positions = local @ self.pose.rotation.T + self.pose.translation
        normals = normals_local @ self.pose.rotation.T
        return positions, normals

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        r_inv = self.pose.rotation.T
        o = r_inv @ (origin - self.pose.translation)
        d = dirs @ r_inv.T
        half = self._half()
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        # Parallel rays: +-inf slabs sort correctly unless o is on a face.
        near = np.minimum(t1, t2).max(axis=1)
        far = np.maximum(t1, t2).min(axis=1)
        s = np.where(near > _RAY_EPS, near, far)
        hit = (near <= far) & (s > _RAY_EPS)
        return np.where(hit, s, np.inf)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        local = (points - self.pose.translation) @ self.pose.rotation
        q = np.abs(local) - self._half()
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)


Primitive = Plane | Sphere | Box


@dataclass(frozen=True)
class SceneSpec:
    """Primitive list plus sampling density (points/m^2) and RNG seed."""

    primitives: tuple[Primitive, ...]
    density: float = 500.0
    seed: int = 0

    def __post_init__(self):
        if self.density <= 0:
            raise InvalidParameter("density must be positive")
        object.__setattr__(self, "primitives", tuple(self.primitives))


def sample_scene(spec: SceneSpec) -> PointCloud:
    """Uniform surface samples with exact analytic normals, seeded."""
    if not spec.primitives:
        raise InvalidParameter("scene has no primitives")
    rng = np.random.default_rng(spec.seed)
    positions, normals = [], []
    for prim in spec.primitives:
        n = max(1, round(prim.area() * spec.density))
        p, nrm = prim.sample(n, rng)
        positions.append(p)
        normals.append(nrm)
    return PointCloud(np.vstack(positions), np.vstack(normals))


def render_depth(
    scene: SceneSpec, pose: RigidTransform, intr: PinholeIntrinsics
) -> DepthMap:
    """Analytic ray-cast depth from a camera at ``pose`` (camera-to-world).

    Depth is the camera-frame z of the nearest intersection; pixels whose
    ray misses every primitive are invalid.
    """
    u = np.arange(intr.width, dtype=np.float64)
    v = np.arange(intr.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.column_stack(
        [
            ((uu - intr.cx) / intr.fx).ravel(),
            ((vv - intr.cy) / intr.fy).ravel(),
            np.ones(intr.width * intr.height),
        ]
    )
    # dirs_cam has z == 1, so the ray parameter equals camera-frame depth.
    dirs_world = dirs_cam @ pose.rotation.T
    origin = pose.translation
    depth = np.full(len(dirs_world), np.inf)
    for prim in scene.primitives:
        depth = np.minimum(depth, prim.intersect(origin, dirs_world))
    depth[~np.isfinite(depth)] = np.nan
    return DepthMap(depth.reshape(intr.height, intr.width))


def surface_distance(scene: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Exact distance from each point to the nearest scene surface."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dist = np.full(len(points), np.inf)
    for prim in scene.primitives:
        dist = np.minimum(dist, prim.surface_distance(points))
    return dist


def make_stereo_pair(texture: GrayImage, disparity_px: int) -> tuple[GrayImage, GrayImage]:
    """Left = texture; right = texture shifted left by ``disparity_px``.

    The rightmost ``disparity_px`` columns of the right image have no true
    correspondence; they replicate the last shifted column and are an
    untestable margin.
    """
    if not 0 <= disparity_px < texture.width / 2:
        raise InvalidParameter("disparity_px must be in [0, width/2)")
    if disparity_px == 0:
        return texture, texture
    w = texture.width
    right = np.empty_like(texture.data)
    right[:, : w - disparity_px] = texture.data[:, disparity_px:]
    right[:, w - disparity_px :] = right[:, [w - disparity_px - 1]]
    return texture, GrayImage(right)


def random_texture(width: int, height: int, seed: int = 0) -> GrayImage:
    """Uniform-noise texture; fully determined by its seed."""
    rng = np.random.default_rng(seed)
    return GrayImage(rng.uniform(0.0, 1.0, size=(height, width)))


def _rpy_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _pose(origin, rpy=(0.0, 0.0, 0.0)) -> RigidTransform:
    return RigidTransform(_rpy_rotation(*rpy), origin)


def default_room_scene(density: float = 500.0, seed: int = 0) -> SceneSpec:
    """The standard verification scene: a 4x4x2.5 m room interior.

    Five planes (floor plus four walls, normals facing inward), two boxes
    and one sphere on the floor.
    """
    half_pi = math.pi / 2
    primitives = (
        Plane(4.0, 4.0, _pose((0, 0, 0))),  # floor, normal +z
        Plane(4.0, 2.5, _pose((0, 2.0, 1.25), (half_pi, 0, 0))),  # wall y=+2
        Plane(4.0, 2.5, _pose((0, -2.0, 1.25), (-half_pi, 0, 0))),  # wall y=-2
        Plane(4.0, 2.5, _pose((2.0, 0, 1.25), (half_pi, 0, half_pi))),  # wall x=+2
        Plane(4.0, 2.5, _pose((-2.0, 0, 1.25), (half_pi, 0, -half_pi))),  # wall x=-2
        Box(0.8, 0.6, 1.0, _pose((-0.8, 0.5, 0.5), (0, 0, 0.4))),
        Box(0.6, 0.9, 0.7, _pose((0.9, -0.6, 0.35), (0, 0, -0.3))),
        Sphere(0.4, _pose((0.3, 0.9, 0.4))),
    )
    return SceneSpec(primitives, density=density, seed=seed)


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose: +z toward target, +x right, +y down."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise InvalidParameter("view direction is parallel to the up vector")
    right /= norm
    down = np.cross(forward, right)
    return RigidTransform(np.column_stack([right, down, forward]), eye)


def default_trajectory(
    n_views: int = 6, radius: float = 2.0, height: float = 1.3
) -> list[RigidTransform]:
    """Poses on a circle inside the default room, yaw stepping 20 degrees.

    Cameras look inward at a point near the room center so consecutive
    views overlap heavily.
    """
    step = math.radians(20.0)
    target = np.array([0.0, 0.0, 0.8])
    poses = []
    for k in range(n_views):
        angle = math.radians(15.0) + k * step
        eye = (radius * math.cos(angle), radius * math.sin(angle), height)
        poses.append(look_at_pose(eye, target))
    return poses


def default_intrinsics(width: int = 160, height: int = 120) -> PinholeIntrinsics:
    focal = 0.75 * width
    return PinholeIntrinsics(
        fx=focal, fy=focal, cx=(width - 1) / 2, cy=(height - 1) / 2,
        width=width, height=height,
    )


def _parse_floats(text: str, count: int, line_no: int) -> tuple[float, ...]:
    parts = text.split(",")
    if len(parts) != count:
        raise ParseError(f"expected {count} comma-separated values, got {text!r}", line=line_no)
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise ParseError(f"malformed number in {text!r}", line=line_no) from None


def _parse_primitive(value: str, line_no: int) -> Primitive:
    tokens = value.split()
    if not tokens:
        raise ParseError("empty primitive definition", line=line_no)
    kind, *attrs = tokens
    fields = {}
    for attr in attrs:
        if "=" not in attr:
            raise ParseError(f"expected key=value, got {attr!r}", line=line_no)
        key, val = attr.split("=", 1)
        fields[key] = val
    origin = _parse_floats(fields.pop("origin", "0,0,0"), 3, line_no)
    rpy = _parse_floats(fields.pop("rpy", "0,0,0"), 3, line_no)
    pose = _pose(origin, rpy)
    try:
        if kind == "plane":
            dims = _parse_floats(fields.pop("size").replace("x", ","), 2, line_no)
            prim = Plane(dims[0], dims[1], pose)
        elif kind == "sphere":
            prim = Sphere(float(fields.pop("radius")), pose)
        elif kind == "box":
            dims = _parse_floats(fields.pop("size").replace("x", ","), 3, line_no)
            prim = Box(dims[0], dims[1], dims[2], pose)
        else:
            raise ParseError(f"unknown primitive kind {kind!r}", line=line_no)
    except KeyError as missing:
        raise ParseError(f"{kind} is missing required field {missing}", line=line_no) from None
    except ValueError:
        raise ParseError(f"malformed number in {kind} definition", line=line_no) from None
    if fields:
        raise ParseError(f"unknown fields for {kind}: {sorted(fields)}", line=line_no)
    return prim


def parse_scene(text: str) -> SceneSpec:
    """Parse the plain-text scene grammar.

    One ``key = value`` statement per line; '#' starts a comment. Keys:
    ``seed`` (integer), ``density`` (points/m^2), and one ``primitive``
    line per primitive::

        primitive = plane size=4x2.5 origin=0,2,1.25 rpy=1.5708,0,0
        primitive = sphere radius=0.4 origin=0.3,0.9,0.4
        primitive = box size=0.8x0.6x1.0 origin=-0.8,0.5,0.5 rpy=0,0,0.4
    """
    seed = 0
    density = 500.0
    primitives: list[Primitive] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", line=line_no)
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "seed":
            try:
                seed = int(value)
            except ValueError:
                raise ParseError(f"seed must be an integer, got {value!r}", line=line_no) from None
        elif key == "density":
            try:
                density = float(value)
            except ValueError:
                raise ParseError(f"density must be a number, got {value!r}", line=line_no) from None
        elif key == "primitive":
            primitives.append(_parse_primitive(value, line_no))
        else:
            raise ParseError(f"unknown key {key!r}", line=line_no)
    if not primitives:
        raise ParseError("scene defines no primitives", line=1)
    return SceneSpec(tuple(primitives), density=density, seed=seed)


def load_scene(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scene(fh.read())
