"""SE(3) pose algebra and the rectified stereo pinhole camera.

Conventions used throughout the package:
  - Pose maps world coordinates to camera coordinates (p_cam = R p_world + t).
  - Twists order translation first, rotation second; perturbations compose on
    the left: T' = se3_exp(xi) * T.
  - Rotations are stored as matrices; quaternions appear only at the
    trajectory-file boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DepthTooSmall

# Near-plane for projection (metres). Depths at or below this are unprojectable.
Z_MIN = 1e-6

_EPS_ANGLE = 1e-8


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: hat(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a Taylor fallback below the small-angle cutoff."""
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < _EPS_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R. Accurate for angles in [0, pi]."""
    trace = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(trace)
    if theta < _EPS_ANGLE:
        # First-order: R ~ I + hat(phi)
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - theta > 1e-6:
        return theta / (2.0 * np.sin(theta)) * np.array(
            [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
        )
    # Near pi: axis from the dominant column of (R + I)/2 = a a^T + cos-terms
    B = 0.5 * (R + np.eye(3))
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.sqrt(max(B[k, k], 1e-15))
    axis = axis / np.linalg.norm(axis)
    # Fix the sign with the off-diagonal antisymmetric part
    sv = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.dot(axis, sv) < 0.0:
        axis = -axis
    return theta * axis


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < _EPS_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a = (1.0 - np.cos(theta)) / (theta * theta)
    b = (theta - np.sin(theta)) / (theta ** 3)
    return np.eye(3) + a * K + b * (K @ K)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < _EPS_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * theta
    cot = half / np.tan(half)
    return np.eye(3) - 0.5 * K + (1.0 - cot) / (theta * theta) * (K @ K)


@dataclass(frozen=True)
class Twist:
    """Minimal pose perturbation: translation rho (m), rotation phi (rad)."""

    rho: np.ndarray
    phi: np.ndarray

    @staticmethod
    def from_vector(xi: np.ndarray) -> "Twist":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return Twist(rho=xi[:3].copy(), phi=xi[3:].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping world coordinates to camera coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return Pose(T[:3, :3].copy(), T[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self * other)(P) = self(other(P))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def camera_center(self) -> np.ndarray:
        """Camera position expressed in world coordinates."""
        return -self.rotation.T @ self.translation

    def is_orthonormal(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (np.abs(R.T @ R - np.eye(3)).max() < tol
                and abs(np.linalg.det(R) - 1.0) < tol)

    def orthonormalized(self) -> "Pose":
        """Project the rotation onto SO(3) (nearest in Frobenius norm).

        Chained compositions accumulate rounding drift away from
        orthonormality; feeding such poses back into further products
        amplifies the defect geometrically, so long product chains
        should re-project between compositions.
        """
        U, _, Vt = np.linalg.svd(self.rotation)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return Pose(R, self.translation.copy())


def se3_exp(xi: Twist) -> Pose:
    """Exponential map; left-multiplicative perturbation convention."""
    R = so3_exp(xi.phi)
    t = so3_left_jacobian(xi.phi) @ xi.rho
    return Pose(R, t)


def se3_log(T: Pose) -> Twist:
    phi = so3_log(T.rotation)
    rho = so3_left_jacobian_inv(phi) @ T.translation
    return Twist(rho=rho, phi=phi)


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(T: Pose) -> Pose:
    return T.inverse()


def transform_point(T: Pose, P: np.ndarray) -> np.ndarray:
    """Camera-frame coordinates of world point P."""
    return T.rotation @ np.asarray(P, dtype=float) + T.translation


@dataclass(frozen=True)
class StereoCamera:
    """Rectified stereo pinhole camera; bf is baseline times fx (pixel-metres)."""

    fx: float
    fy: float
    cx: float
    cy: float
    bf: float
    width: int
    height: int

    def __post_init__(self):
        if min(self.fx, self.fy, self.bf) <= 0 or min(self.width, self.height) <= 0:
            raise ValueError("fx, fy, bf, width, height must all be positive")


def project_stereo(cam: StereoCamera, Pc: np.ndarray) -> tuple[float, float, float]:
    """Left pixel (uL, vL) and right column uR of a camera-frame point.

    Raises DepthTooSmall when z <= Z_MIN; such points must be culled by the
    caller rather than projected.
    """
    x, y, z = Pc
    if z <= Z_MIN:
        raise DepthTooSmall(f"depth {z} <= {Z_MIN}")
    uL = cam.fx * x / z + cam.cx
    vL = cam.fy * y / z + cam.cy
    uR = uL - cam.bf / z
    return uL, vL, uR
