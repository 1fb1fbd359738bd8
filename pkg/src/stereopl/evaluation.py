"""Trajectory metrics: association, alignment, ATE/RPE, and file formats.

All trajectories in this module store world-from-camera poses, i.e. the
translation of each pose is the camera position in world coordinates. This
is the convention of both supported file formats, and the inverse of the
camera-from-world convention used by the tracking and optimization modules.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateGeometry, FormatError, NoOverlap
from .geometry import Pose

DEFAULT_MAX_DT = 0.02   # association window in seconds
_COLLINEAR_RTOL = 1e-9  # second singular value below this fraction of the first


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True)
class Trajectory:
    """Timestamped sequence of world-from-camera poses."""

    times: np.ndarray
    poses: tuple

    def __init__(self, times, poses):
        times = np.asarray(times, dtype=float)
        poses = tuple(poses)
        if times.ndim != 1:
            raise ValueError("times must be a 1-D array")
        if len(times) != len(poses):
            raise ValueError("times and poses must have equal length")
        if len(times) > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        """Camera positions in world coordinates, shape (n, 3)."""
        return np.array([p.translation for p in self.poses], dtype=float).reshape(-1, 3)

    def matrices(self) -> np.ndarray:
        return np.array([p.matrix() for p in self.poses], dtype=float).reshape(-1, 4, 4)


def associate(est: Trajectory, gt: Trajectory,
              max_dt: float = DEFAULT_MAX_DT) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp matching between two trajectories.

    Candidate pairs within max_dt are taken in order of increasing |dt|
    (ties broken by index), each index used at most once. Returns (i_est,
    i_gt) pairs sorted by estimate index. Raises NoOverlap when no pair
    matches.
    """
    if max_dt <= 0:
        raise ValueError("max_dt must be positive")
    te, tg = est.times, gt.times
    cands = []
    for i in range(len(te)):
        for j in range(len(tg)):
            dt = abs(te[i] - tg[j])
            if dt <= max_dt:
                cands.append((dt, i, j))
    cands.sort()
    used_e, used_g = set(), set()
    pairs = []
    for _, i, j in cands:
        if i in used_e or j in used_g:
            continue
        used_e.add(i)
        used_g.add(j)
        pairs.append((i, j))
    if not pairs:
        raise NoOverlap("no timestamps within %g s of each other" % max_dt)
    pairs.sort()
    return pairs


@dataclass(frozen=True)
class Alignment:
    """Similarity transform g = scale * R @ e + t fitted from est onto gt."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def transform_positions(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return self.scale * pts @ self.rotation.T + self.translation

    def transform(self, traj: Trajectory) -> Trajectory:
        poses = [Pose(self.rotation @ p.rotation,
                      self.scale * self.rotation @ p.translation + self.translation)
                 for p in traj.poses]
        return Trajectory(traj.times, poses)


def _check_spread(centered: np.ndarray, label: str) -> None:
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] <= 0 or sv[1] <= _COLLINEAR_RTOL * sv[0]:
        raise DegenerateGeometry(f"{label} positions are collinear")


def umeyama_align(est: Trajectory, gt: Trajectory, with_scale: bool = False,
                  max_dt: float = DEFAULT_MAX_DT) -> Alignment:
    """Least-squares similarity (or rigid) alignment of est onto gt.

    Needs at least three non-collinear associated position pairs; raises
    DegenerateGeometry otherwise. with_scale=False fixes scale to 1.
    """
    pairs = associate(est, gt, max_dt)
    if len(pairs) < 3:
        raise DegenerateGeometry("need at least 3 associated pairs, got %d" % len(pairs))
    ie = [i for i, _ in pairs]
    ig = [j for _, j in pairs]
    E = est.positions()[ie]
    G = gt.positions()[ig]
    mu_e = E.mean(axis=0)
    mu_g = G.mean(axis=0)
    X = E - mu_e
    Y = G - mu_g
    _check_spread(X, "estimate")
    _check_spread(Y, "reference")
    C = Y.T @ X / len(pairs)
    U, D, Vt = np.linalg.svd(C)
    sign = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        sign[2] = -1.0
    R = U @ np.diag(sign) @ Vt
    if with_scale:
        var_e = float(np.mean(np.sum(X * X, axis=1)))
        s = float(D @ sign) / var_e
    else:
        s = 1.0
    t = mu_g - s * R @ mu_e
    return Alignment(s, R, t)


def ate_rmse(est: Trajectory, gt: Trajectory, align: bool = True,
             with_scale: bool = False, max_dt: float = DEFAULT_MAX_DT) -> float:
    """RMS of paired position error, after optional alignment of est onto gt."""
    pairs = associate(est, gt, max_dt)
    ie = [i for i, _ in pairs]
    ig = [j for _, j in pairs]
    E = est.positions()[ie]
    G = gt.positions()[ig]
    if align:
        E = umeyama_align(est, gt, with_scale, max_dt).transform_positions(E)
    return float(np.sqrt(np.mean(np.sum((E - G) ** 2, axis=1))))


def rpe_rmse(est: Trajectory, gt: Trajectory, delta: int = 1,
             max_dt: float = DEFAULT_MAX_DT) -> tuple[float, float]:
    """Relative pose error over associated pairs delta steps apart.

    For each associated index k the error transform is
    (Q_k^-1 Q_{k+delta})^-1 (P_k^-1 P_{k+delta}) with P from est and Q from
    gt; returns (translation RMSE, rotation-angle RMSE in radians). Invariant
    under a rigid transform applied to a whole trajectory.
    """
    if delta < 1:
        raise ValueError("delta must be at least 1")
    pairs = associate(est, gt, max_dt)
    if len(pairs) <= delta:
        raise NoOverlap("need more than %d associated pairs for delta=%d"
                        % (delta, delta))
    t2, r2 = [], []
    for k in range(len(pairs) - delta):
        i1, j1 = pairs[k]
        i2, j2 = pairs[k + delta]
        p_rel = est.poses[i1].inverse().compose(est.poses[i2])
        q_rel = gt.poses[j1].inverse().compose(gt.poses[j2])
        err = q_rel.inverse().compose(p_rel)
        t2.append(float(err.translation @ err.translation))
        cos_a = (np.trace(err.rotation) - 1.0) / 2.0
        ang = math.acos(min(1.0, max(-1.0, cos_a)))
        r2.append(ang * ang)
    return float(np.sqrt(np.mean(t2))), float(np.sqrt(np.mean(r2)))


def save_tum(path, traj: Trajectory) -> None:
    """One line per pose: time tx ty tz qx qy qz qw (scalar-last quaternion)."""
    with open(path, "w") as fh:
        for t, pose in zip(traj.times, traj.poses):
            q = Rotation.from_matrix(pose.rotation).as_quat()
            fields = [t, *pose.translation, *q]
            fh.write(" ".join(_fmt(v) for v in fields) + "\n")


def load_tum(path) -> Trajectory:
    times, poses = [], []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(path, line_no, "expected 8 fields, got %d" % len(parts))
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise FormatError(path, line_no, "non-numeric field")
            t, tx, ty, tz, qx, qy, qz, qw = vals
            q = np.array([qx, qy, qz, qw])
            norm = np.linalg.norm(q)
            if abs(norm - 1.0) > 1e-3:
                raise FormatError(path, line_no, "quaternion norm %.6g far from 1" % norm)
            if times and t <= times[-1]:
                raise FormatError(path, line_no, "timestamps not strictly increasing")
            R = Rotation.from_quat(q / norm).as_matrix()
            times.append(t)
            poses.append(Pose(R, np.array([tx, ty, tz])))
    if not poses:
        raise FormatError(path, 0, "no poses found")
    return Trajectory(times, poses)


def save_kitti(path, traj: Trajectory) -> None:
    """One line per pose: the 12 row-major entries of the 3x4 [R|t] matrix."""
    with open(path, "w") as fh:
        for pose in traj.poses:
            row = pose.matrix()[:3, :].reshape(-1)
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def load_kitti(path) -> Trajectory:
    """Timestamps are not stored in this format; the frame index is used."""
    times, poses = [], []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 12:
                raise FormatError(path, line_no, "expected 12 fields, got %d" % len(parts))
            try:
                vals = np.array([float(p) for p in parts]).reshape(3, 4)
            except ValueError:
                raise FormatError(path, line_no, "non-numeric field")
            pose = Pose(vals[:, :3].copy(), vals[:, 3].copy())
            if not pose.is_orthonormal(tol=1e-3):
                raise FormatError(path, line_no, "rotation block is not orthonormal")
            times.append(float(len(poses)))
            poses.append(pose)
    if not poses:
        raise FormatError(path, 0, "no poses found")
    return Trajectory(times, poses)


METRIC_KEYS = ["pairs", "rpe_delta", "ate_rmse", "rpe_trans_rmse", "rpe_rot_rmse"]


def compute_metrics(est: Trajectory, gt: Trajectory, align: bool = True,
                    with_scale: bool = False, rpe_delta: int = 1,
                    max_dt: float = DEFAULT_MAX_DT) -> dict:
    pairs = associate(est, gt, max_dt)
    trans, rot = rpe_rmse(est, gt, rpe_delta, max_dt)
    return {
        "pairs": len(pairs),
        "rpe_delta": rpe_delta,
        "ate_rmse": ate_rmse(est, gt, align, with_scale, max_dt),
        "rpe_trans_rmse": trans,
        "rpe_rot_rmse": rot,
    }


def save_metrics_csv(path, metrics: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_KEYS)
        row = []
        for key in METRIC_KEYS:
            v = metrics[key]
            row.append(str(v) if isinstance(v, int) else _fmt(v))
        writer.writerow(row)


def format_metrics_table(metrics: dict) -> str:
    labels = {
        "pairs": "associated pairs",
        "rpe_delta": "RPE step",
        "ate_rmse": "ATE RMSE [m]",
        "rpe_trans_rmse": "RPE trans RMSE [m]",
        "rpe_rot_rmse": "RPE rot RMSE [rad]",
    }
    lines = []
    for key in METRIC_KEYS:
        v = metrics[key]
        text = str(v) if isinstance(v, int) else "%.6g" % v
        lines.append("%-20s %s" % (labels[key], text))
    return "\n".join(lines)


def save_error_plot(path, est: Trajectory, gt: Trajectory, align: bool = True,
                    with_scale: bool = False, max_dt: float = DEFAULT_MAX_DT) -> None:
    """Write an SVG of paired position error over time (needs matplotlib)."""
    import matplotlib
    from matplotlib.figure import Figure

    pairs = associate(est, gt, max_dt)
    ie = [i for i, _ in pairs]
    ig = [j for _, j in pairs]
    E = est.positions()[ie]
    G = gt.positions()[ig]
    if align:
        E = umeyama_align(est, gt, with_scale, max_dt).transform_positions(E)
    errors = np.linalg.norm(E - G, axis=1)
    times = gt.times[ig]

    fig = Figure(figsize=(8.0, 3.0))
    ax = fig.add_subplot(111)
    ax.plot(times, errors, linewidth=1.0)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("position error [m]")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    # fixed hash salt and no date metadata keep the SVG byte-stable
    with matplotlib.rc_context({"svg.hashsalt": "stereopl"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
