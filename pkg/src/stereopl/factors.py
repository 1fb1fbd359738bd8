"""Point and stereo-line reprojection residuals with analytic Jacobians.

Line residuals are signed point-to-line distances in the left image plus the
depth-transported right-image counterpart, summed over the two endpoints into
a 2-vector. The third row of the per-endpoint line Jacobians is identically
zero: the residual is effectively 2-dimensional.

The published Jacobian tables and the published residual contain transcription
slips; every function here returns the derivative of the residual actually
implemented (verified against finite differences), while ``verbatim=True``
reproduces the printed formulas for side-by-side comparison. The discrepancy
report in the pipeline is built from that comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEndpoints, DepthTooSmall
from .geometry import Pose, StereoCamera, Z_MIN, hat, transform_point

#: Information value carried by line factors (dimensionless); point factors
#: use 1/sigma^2 instead.
LINE_INFORMATION = 0.5


@dataclass(frozen=True)
class LineCoeffs:
    """Homogeneous 2D line; (lx, ly) must not both vanish."""

    lx: float
    ly: float
    lz: float

    def as_array(self) -> np.ndarray:
        return np.array([self.lx, self.ly, self.lz])


@dataclass(frozen=True)
class PointLandmark:
    P: np.ndarray


@dataclass(frozen=True)
class LineLandmark:
    Ps: np.ndarray
    Pe: np.ndarray

    def __post_init__(self):
        if np.linalg.norm(np.asarray(self.Ps) - np.asarray(self.Pe)) <= 1e-6:
            raise DegenerateEndpoints("line landmark endpoints coincide")


@dataclass(frozen=True)
class PointObservation:
    uL: float
    vL: float
    uR: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class LineObservation:
    l: LineCoeffs
    Usr: float
    Uer: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


def line_coefficients(ps: np.ndarray, pe: np.ndarray) -> LineCoeffs:
    """Normalized cross product of two homogeneous image points."""
    ps = np.asarray(ps, dtype=float)
    pe = np.asarray(pe, dtype=float)
    cross = np.cross(ps, pe)
    if np.linalg.norm(cross) <= 1e-12:
        raise DegenerateEndpoints("homogeneous endpoints are parallel")
    l = cross / (np.linalg.norm(ps) * np.linalg.norm(pe))
    return LineCoeffs(lx=l[0], ly=l[1], lz=l[2])


def point_residual(T: Pose, P: PointLandmark, obs: PointObservation,
                   cam: StereoCamera) -> np.ndarray:
    """Observed minus projected (uL, vL, uR)."""
    x, y, z = transform_point(T, P.P)
    if z <= Z_MIN:
        raise DepthTooSmall(f"depth {z} <= {Z_MIN}")
    uL = cam.fx * x / z + cam.cx
    vL = cam.fy * y / z + cam.cy
    uR = uL - cam.bf / z
    return np.array([obs.uL - uL, obs.vL - vL, obs.uR - uR])


def point_jacobians(T: Pose, P: PointLandmark,
                    cam: StereoCamera) -> tuple[np.ndarray, np.ndarray]:
    """(residual w.r.t. left-applied pose twist, residual w.r.t. landmark)."""
    pc = transform_point(T, P.P)
    x, y, z = pc
    if z <= Z_MIN:
        raise DepthTooSmall(f"depth {z} <= {Z_MIN}")
    z2 = z * z
    dproj = np.array([
        [cam.fx / z, 0.0, -cam.fx * x / z2],
        [0.0, cam.fy / z, -cam.fy * y / z2],
        [cam.fx / z, 0.0, -cam.fx * x / z2 + cam.bf / z2],
    ])
    dpc_dtwist = np.hstack([np.eye(3), -hat(pc)])
    return -dproj @ dpc_dtwist, -dproj @ T.rotation


def line_endpoint_residual(pc: np.ndarray, U: float, l: LineCoeffs,
                           cam: StereoCamera, verbatim: bool = False) -> np.ndarray:
    """Per-endpoint contribution (left row, right row, 0) for camera point pc.

    U is the observed right-image column of this endpoint. With verbatim=True
    the left row drops the principal point, reproducing the published formula;
    the default adds (cx, cy) so that pixel-built line coefficients yield true
    point-to-line distances.
    """
    x, y, z = pc
    if z <= Z_MIN:
        raise DepthTooSmall(f"depth {z} <= {Z_MIN}")
    s = np.hypot(l.lx, l.ly)
    u = cam.fx * x / z
    v = cam.fy * y / z
    if verbatim:
        left = (l.lx * u + l.ly * v + l.lz) / s
    else:
        left = (l.lx * (u + cam.cx) + l.ly * (v + cam.cy) + l.lz) / s
    right = (l.lx * (U + cam.bf / z) + l.ly * (v + cam.cy) + l.lz) / s
    return np.array([left, right, 0.0])


def line_residual_stereo(T: Pose, L: LineLandmark, obs: LineObservation,
                         cam: StereoCamera, verbatim: bool = False) -> np.ndarray:
    """2-vector (left-image sum, right-image sum) over the two endpoints."""
    ps = transform_point(T, L.Ps)
    pe = transform_point(T, L.Pe)
    e = (line_endpoint_residual(ps, obs.Usr, obs.l, cam, verbatim)
         + line_endpoint_residual(pe, obs.Uer, obs.l, cam, verbatim))
    return e[:2]


def line_jacobian_camera(lc_point: np.ndarray, l: LineCoeffs, cam: StereoCamera,
                         verbatim: bool = False) -> np.ndarray:
    """3x3 derivative of the per-endpoint residual w.r.t. the camera-frame point.

    verbatim=True reproduces the printed table, whose (0,2) entry reads
    fy*ly where the derivative requires fx*lx.
    """
    x, y, z = lc_point
    if z <= Z_MIN:
        raise DepthTooSmall(f"depth {z} <= {Z_MIN}")
    s = np.hypot(l.lx, l.ly)
    zs = z * s
    z2s = z * z * s
    fxlx = cam.fx * l.lx
    fyly = cam.fy * l.ly
    if verbatim:
        top_right = -(x * fyly + y * fyly) / z2s
    else:
        top_right = -(x * fxlx + y * fyly) / z2s
    return np.array([
        [fxlx / zs, fyly / zs, top_right],
        [0.0, fyly / zs, -(cam.bf * l.lx + y * fyly) / z2s],
        [0.0, 0.0, 0.0],
    ])


def line_jacobian_landmark(T: Pose, lc_point: np.ndarray, l: LineCoeffs,
                           cam: StereoCamera, verbatim: bool = False) -> np.ndarray:
    """Chain rule through p_c = R P + t: camera Jacobian times R."""
    return line_jacobian_camera(lc_point, l, cam, verbatim) @ T.rotation


def line_jacobian_pose(T: Pose, lc_point: np.ndarray, l: LineCoeffs,
                       cam: StereoCamera, verbatim: bool = False) -> np.ndarray:
    """3x6 derivative w.r.t. a left-applied pose twist (t, phi columns).

    Only the camera-frame point enters: a left perturbation moves p_c by
    delta_rho + delta_phi x p_c. T is accepted for signature symmetry with the
    landmark Jacobian. The verbatim table differs from the derivative in
    entries (0,2), (0,3), (0,4) and (1,2); see the discrepancy report.
    """
    _ = T
    if not verbatim:
        Jc = line_jacobian_camera(lc_point, l, cam)
        return Jc @ np.hstack([np.eye(3), -hat(np.asarray(lc_point, dtype=float))])
    x, y, z = lc_point
    if z <= Z_MIN:
        raise DepthTooSmall(f"depth {z} <= {Z_MIN}")
    s = np.hypot(l.lx, l.ly)
    zs = z * s
    z2s = z * z * s
    fxlx = cam.fx * l.lx
    fyly = cam.fy * l.ly
    bflx = cam.bf * l.lx
    row0 = [fxlx / zs,
            fyly / zs,
            -(fxlx + fyly * y) / z2s,
            -(fxlx * y - fyly * y * y) / z2s - fyly / s,
            (x * fxlx + fyly * x * y) / z2s + fxlx / s,
            (fyly * x - fxlx * y) / zs]
    row1 = [0.0,
            fyly / zs,
            -(bflx - fyly * y) / z2s,
            -(y * bflx + fyly * y * y) / z2s - fyly / s,
            (x * bflx + fyly * x * y) / z2s,
            fyly * x / zs]
    return np.array([row0, row1, [0.0] * 6])


def line_factor_jacobians(T: Pose, L: LineLandmark, obs: LineObservation,
                          cam: StereoCamera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Factor-level Jacobians of the summed 2-vector residual.

    Returns (2x6 pose block, 2x3 start-endpoint block, 2x3 end-endpoint block).
    """
    ps = transform_point(T, L.Ps)
    pe = transform_point(T, L.Pe)
    Jp = line_jacobian_pose(T, ps, obs.l, cam) + line_jacobian_pose(T, pe, obs.l, cam)
    Js = line_jacobian_landmark(T, ps, obs.l, cam)
    Je = line_jacobian_landmark(T, pe, obs.l, cam)
    return Jp[:2], Js[:2], Je[:2]
