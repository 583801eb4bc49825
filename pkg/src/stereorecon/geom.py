"""Rigid-transform (SE(3)) algebra and the twist exp/log parameterization.

Rotations are stored as 3x3 matrices. All values are immutable after
construction and every operation is a pure function, so they are safe to
share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi, InvalidParameter

# Below this rotation angle the closed-form Rodrigues coefficients are
# replaced by their second-order Taylor expansions.
SMALL_ANGLE = 1e-8


def _frozen_array(values, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.shape != shape:
        raise InvalidParameter(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RigidTransform:
    """A rotation + translation, mapping points as R @ p + t.

    The rotation must be orthonormal with determinant +1; construction does
    not enforce this (see ``is_valid`` / ``orthonormalized``), so that drift
    under long composition chains stays observable.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen_array(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen_array(self.translation, (3,)))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(matrix: np.ndarray, tol: float = 1e-9) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix, re-orthonormalizing within tol.

        Raises:
            InvalidParameter: if the matrix is not 4x4 with homogeneous last
                row, or the rotation block deviates from orthonormality by
                more than ``tol``.
        """
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidParameter(f"expected 4x4 matrix, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise InvalidParameter("last row of homogeneous matrix must be [0 0 0 1]")
        t = RigidTransform(m[:3, :3], m[:3, 3])
        if t.is_valid(1e-9):
            return t
        err = t.orthonormality_error()
        if err <= tol and np.linalg.det(t.rotation) > 0.5:
            return t.orthonormalized()
        raise InvalidParameter(
            f"rotation block deviates from orthonormality by {err:.3e} "
            f"(tolerance {tol:.1e}) or is a reflection"
        )

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def orthonormality_error(self) -> float:
        r = self.rotation
        return float(np.abs(r.T @ r - np.eye(3)).max())

    def is_valid(self, tol: float = 1e-9) -> bool:
        return (
            self.orthonormality_error() < tol
            and abs(np.linalg.det(self.rotation) - 1.0) < tol
        )

    def orthonormalized(self) -> "RigidTransform":
        """Nearest rotation by polar decomposition (sign-corrected SVD)."""
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] = -u[:, -1]
            r = u @ vt
        return RigidTransform(r, self.translation)


@dataclass(frozen=True)
class Twist:
    """se(3) tangent vector: rotational part ``omega`` (rad), linear ``v`` (m)."""

    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", _frozen_array(self.omega, (3,)))
        object.__setattr__(self, "v", _frozen_array(self.v, (3,)))

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(xi: np.ndarray) -> "Twist":
        xi = np.asarray(xi, dtype=np.float64)
        return Twist(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return RigidTransform(
        a.rotation @ b.rotation, a.rotation @ b.translation + a.translation
    )


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def apply(t: RigidTransform, p: np.ndarray) -> np.ndarray:
    """Map a 3-vector (or an (N, 3) batch) through the transform."""
    p = np.asarray(p, dtype=np.float64)
    return p @ t.rotation.T + t.translation


def _rodrigues_coefficients(theta: float) -> tuple[float, float, float]:
    # A = sin(t)/t, B = (1-cos(t))/t^2, C = (t-sin(t))/t^3, all finite at 0.
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    half = 0.5 * theta
    a = math.sin(theta) / theta
    # 2 sin^2(t/2) / t^2 avoids the cancellation in 1 - cos(t).
    sh = math.sin(half) / half
    b = 0.5 * sh * sh
    c = (theta - math.sin(theta)) / (theta * theta * theta)
    return a, b, c


def exp(xi: Twist) -> RigidTransform:
    """SE(3) exponential: twist to rigid transform (Rodrigues form)."""
    omega = xi.omega
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    k2 = k @ k
    a, b, c = _rodrigues_coefficients(theta)
    rotation = np.eye(3) + a * k + b * k2
    v_matrix = np.eye(3) + b * k + c * k2
    return RigidTransform(rotation, v_matrix @ xi.v)


def log(t: RigidTransform) -> Twist:
    """SE(3) logarithm, the inverse of ``exp``.

    Raises:
        AngleNearPi: when the rotation angle is within 1e-6 of pi, where
            the log map is ill-conditioned.
    """
    r = t.rotation
    # atan2(|sin|, cos) is well conditioned over the whole open domain.
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_theta = float(np.linalg.norm(vee))
    cos_theta = 0.5 * (float(np.trace(r)) - 1.0)
    theta = math.atan2(sin_theta, cos_theta)
    if theta >= math.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta:.9f} rad is too close to pi")

    if theta < SMALL_ANGLE:
        omega = vee * (1.0 + theta * theta / 6.0)
        c2 = 1.0 / 12.0 + theta * theta / 720.0
    else:
        omega = vee * (theta / sin_theta)
        half = 0.5 * theta
        # (1 - (t/2) cot(t/2)) / t^2, finite and positive on (0, pi).
        c2 = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    k = skew(omega)
    v_inv = np.eye(3) - 0.5 * k + c2 * (k @ k)
    return Twist(omega, v_inv @ t.translation)


def adjoint(t: RigidTransform) -> np.ndarray:
    """6x6 adjoint mapping twists between frames: exp(Ad_T xi) == T exp(xi) T^-1.

    Twist coordinates are stacked as (omega, v).
    """
    ad = np.zeros((6, 6))
    ad[:3, :3] = t.rotation
    ad[3:, 3:] = t.rotation
    ad[3:, :3] = skew(t.translation) @ t.rotation
    return ad


def rotation_angle(t: RigidTransform) -> float:
    """Rotation magnitude in radians, in [0, pi]."""
    r = t.rotation
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    cos_theta = 0.5 * (float(np.trace(r)) - 1.0)
    return math.atan2(float(np.linalg.norm(vee)), cos_theta)
