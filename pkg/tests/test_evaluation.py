"""Tests for trajectory association, alignment, metrics, and file formats."""

import math

import numpy as np
import pytest

from stereopl.errors import DegenerateGeometry, FormatError, NoOverlap
from stereopl.evaluation import (
    Trajectory,
    associate,
    ate_rmse,
    compute_metrics,
    format_metrics_table,
    load_kitti,
    load_tum,
    rpe_rmse,
    save_error_plot,
    save_kitti,
    save_metrics_csv,
    save_tum,
    umeyama_align,
)
from stereopl.geometry import Pose, Twist, se3_exp, so3_exp


def _random_pose(rng, trans=2.0, angle=0.5):
    phi = rng.standard_normal(3)
    phi *= angle / np.linalg.norm(phi)
    return se3_exp(Twist(rng.uniform(-trans, trans, 3), phi))


def _random_trajectory(rng, n=20, dt=0.1):
    times = np.arange(n) * dt
    poses = []
    pose = Pose.identity()
    for _ in range(n):
        step = se3_exp(Twist(rng.uniform(-0.3, 0.3, 3),
                             rng.uniform(-0.05, 0.05, 3)))
        pose = pose.compose(step)
        poses.append(pose)
    return Trajectory(times, poses)


def _translated(traj, offset):
    poses = [Pose(p.rotation, p.translation + offset) for p in traj.poses]
    return Trajectory(traj.times, poses)


# -------------------------------------------------------------- trajectory type

def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory([0.0, 1.0], [Pose.identity()])
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [Pose.identity(), Pose.identity()])
    with pytest.raises(ValueError):
        Trajectory([1.0, 0.5], [Pose.identity(), Pose.identity()])


def test_trajectory_positions_are_translations():
    rng = np.random.default_rng(3)
    traj = _random_trajectory(rng, n=5)
    pos = traj.positions()
    assert pos.shape == (5, 3)
    for k, pose in enumerate(traj.poses):
        assert np.allclose(pos[k], pose.translation)


# ----------------------------------------------------------------- association

def test_associate_identical_times():
    rng = np.random.default_rng(0)
    traj = _random_trajectory(rng, n=10)
    pairs = associate(traj, traj)
    assert pairs == [(i, i) for i in range(10)]


def test_associate_within_offset():
    rng = np.random.default_rng(1)
    gt = _random_trajectory(rng, n=10)
    est = Trajectory(gt.times + 0.009, gt.poses)
    pairs = associate(est, gt)
    assert pairs == [(i, i) for i in range(10)]


def test_associate_disjoint_raises():
    rng = np.random.default_rng(2)
    gt = _random_trajectory(rng, n=5)
    est = Trajectory(gt.times + 100.0, gt.poses)
    with pytest.raises(NoOverlap):
        associate(est, gt)


def test_associate_each_index_used_once():
    poses3 = [Pose.identity()] * 3
    poses1 = [Pose.identity()]
    est = Trajectory([0.0, 0.011, 0.03], poses3)
    gt = Trajectory([0.01], poses1)
    # gt time 0.01 is closest to est time 0.011; the others stay unmatched
    assert associate(est, gt) == [(1, 0)]


def test_associate_prefers_smaller_dt():
    poses = [Pose.identity()] * 2
    est = Trajectory([0.0, 0.012], poses)
    gt = Trajectory([0.005, 0.013], poses)
    # best pairs by |dt|: (1,1)=0.001 then (0,0)=0.005
    assert associate(est, gt) == [(0, 0), (1, 1)]


def test_associate_rejects_bad_max_dt():
    traj = Trajectory([0.0], [Pose.identity()])
    with pytest.raises(ValueError):
        associate(traj, traj, max_dt=0.0)


# ------------------------------------------------------------------- alignment

def test_umeyama_identity():
    rng = np.random.default_rng(4)
    traj = _random_trajectory(rng)
    ali = umeyama_align(traj, traj)
    assert np.abs(ali.rotation - np.eye(3)).max() < 1e-9
    assert np.abs(ali.translation).max() < 1e-9
    assert ali.scale == 1.0


def test_umeyama_recovers_known_transform():
    rng = np.random.default_rng(5)
    est = _random_trajectory(rng, n=30)
    world = _random_pose(rng)
    R0, t0 = world.rotation, world.translation
    gt_poses = [Pose(R0 @ p.rotation, R0 @ p.translation + t0) for p in est.poses]
    gt = Trajectory(est.times, gt_poses)
    ali = umeyama_align(est, gt)
    assert np.abs(ali.rotation - R0).max() < 1e-9
    assert np.abs(ali.translation - t0).max() < 1e-9
    aligned = ali.transform(est)
    assert np.abs(aligned.positions() - gt.positions()).max() < 1e-9


def test_umeyama_scale_half():
    rng = np.random.default_rng(6)
    gt = _random_trajectory(rng, n=25)
    est_poses = [Pose(p.rotation, 2.0 * p.translation) for p in gt.poses]
    est = Trajectory(gt.times, est_poses)
    ali = umeyama_align(est, gt, with_scale=True)
    assert abs(ali.scale - 0.5) < 1e-9
    assert ate_rmse(est, gt, align=True, with_scale=True) < 1e-9


def test_umeyama_too_few_pairs():
    poses = [Pose(np.eye(3), np.array([float(k), 0.0, 1.0])) for k in range(2)]
    traj = Trajectory([0.0, 1.0], poses)
    with pytest.raises(DegenerateGeometry):
        umeyama_align(traj, traj)


def test_umeyama_collinear_raises():
    poses = [Pose(np.eye(3), np.array([float(k), 2.0 * k, -k])) for k in range(10)]
    traj = Trajectory(np.arange(10.0), poses)
    with pytest.raises(DegenerateGeometry):
        umeyama_align(traj, traj)


# ------------------------------------------------------------------------- ATE

def test_ate_zero_on_identical():
    rng = np.random.default_rng(7)
    traj = _random_trajectory(rng)
    assert ate_rmse(traj, traj) < 1e-12
    assert ate_rmse(traj, traj, align=False) == 0.0


def test_ate_constant_offset():
    rng = np.random.default_rng(8)
    gt = _random_trajectory(rng)
    offset = np.array([0.3, -0.4, 1.2])
    est = _translated(gt, offset)
    raw = ate_rmse(est, gt, align=False)
    assert raw == pytest.approx(np.linalg.norm(offset), rel=1e-12)
    # rigid alignment absorbs a pure translation completely
    assert ate_rmse(est, gt, align=True) < 1e-9


def test_ate_aligned_never_worse():
    rng = np.random.default_rng(9)
    for _ in range(100):
        gt = _random_trajectory(rng, n=12)
        noisy = [Pose(p.rotation, p.translation + rng.normal(0, 0.2, 3))
                 for p in gt.poses]
        est = Trajectory(gt.times, noisy)
        assert ate_rmse(est, gt, align=True) <= ate_rmse(est, gt, align=False) + 1e-12


# ------------------------------------------------------------------------- RPE

def test_rpe_zero_on_identical():
    rng = np.random.default_rng(10)
    traj = _random_trajectory(rng)
    trans, rot = rpe_rmse(traj, traj)
    assert trans < 1e-12 and rot < 1e-6


def test_rpe_single_step_error_oracle():
    rng = np.random.default_rng(11)
    gt = _random_trajectory(rng, n=3)
    angle = 0.05
    err = Pose(so3_exp(np.array([0.0, 0.0, angle])), np.array([0.1, 0.0, 0.0]))
    est_poses = list(gt.poses)
    est_poses[2] = est_poses[2].compose(err)
    est = Trajectory(gt.times, est_poses)
    trans, rot = rpe_rmse(est, gt, delta=1)
    # step 0->1 is exact; step 1->2 carries exactly err
    assert trans == pytest.approx(math.sqrt(0.1 ** 2 / 2.0), rel=1e-9)
    assert rot == pytest.approx(math.sqrt(angle ** 2 / 2.0), rel=1e-6)


def test_rpe_invariant_under_global_transform():
    rng = np.random.default_rng(12)
    gt = _random_trajectory(rng, n=15)
    noisy = [p.compose(_random_pose(rng, trans=0.05, angle=0.02)) for p in gt.poses]
    est = Trajectory(gt.times, noisy)
    world = _random_pose(rng)
    moved = Trajectory(gt.times, [world.compose(p) for p in est.poses])
    for delta in (1, 3):
        base = rpe_rmse(est, gt, delta=delta)
        shifted = rpe_rmse(moved, gt, delta=delta)
        assert base[0] == pytest.approx(shifted[0], abs=1e-12)
        assert base[1] == pytest.approx(shifted[1], abs=1e-9)


def test_rpe_needs_enough_pairs():
    rng = np.random.default_rng(13)
    traj = _random_trajectory(rng, n=4)
    with pytest.raises(NoOverlap):
        rpe_rmse(traj, traj, delta=4)
    with pytest.raises(ValueError):
        rpe_rmse(traj, traj, delta=0)


# ------------------------------------------------------------------ trajectory IO

def test_tum_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    traj = _random_trajectory(rng, n=12)
    path = tmp_path / "traj.tum"
    save_tum(path, traj)
    back = load_tum(path)
    assert np.array_equal(back.times, traj.times)
    for a, b in zip(back.poses, traj.poses):
        assert np.abs(a.rotation - b.rotation).max() < 1e-12
        assert np.abs(a.translation - b.translation).max() < 1e-12


def test_tum_identity_line(tmp_path):
    traj = Trajectory([0.5], [Pose(np.eye(3), np.array([1.0, 2.0, 3.0]))])
    path = tmp_path / "one.tum"
    save_tum(path, traj)
    assert path.read_text() == "0.5 1 2 3 0 0 0 1\n"


def test_tum_load_errors(tmp_path):
    path = tmp_path / "bad.tum"
    path.write_text("0 0 0 0 0 0 0\n")
    with pytest.raises(FormatError) as err:
        load_tum(path)
    assert err.value.line_no == 1

    path.write_text("# comment\n0 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 2\n")
    with pytest.raises(FormatError) as err:
        load_tum(path)
    assert err.value.line_no == 3 and "norm" in str(err.value)

    path.write_text("1 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n")
    with pytest.raises(FormatError) as err:
        load_tum(path)
    assert err.value.line_no == 2 and "increasing" in str(err.value)

    path.write_text("\n")
    with pytest.raises(FormatError):
        load_tum(path)


def test_kitti_roundtrip(tmp_path):
    rng = np.random.default_rng(15)
    traj = _random_trajectory(rng, n=9, dt=1.0)
    path = tmp_path / "traj.kitti"
    save_kitti(path, traj)
    back = load_kitti(path)
    # the format has no timestamps; indices are substituted
    assert np.array_equal(back.times, np.arange(9.0))
    for a, b in zip(back.poses, traj.poses):
        assert np.abs(a.matrix() - b.matrix()).max() < 1e-12


def test_kitti_identity_line(tmp_path):
    traj = Trajectory([0.0], [Pose.identity()])
    path = tmp_path / "one.kitti"
    save_kitti(path, traj)
    assert path.read_text() == "1 0 0 0 0 1 0 0 0 0 1 0\n"


def test_kitti_load_errors(tmp_path):
    path = tmp_path / "bad.kitti"
    path.write_text("1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(FormatError) as err:
        load_kitti(path)
    assert err.value.line_no == 1

    path.write_text("2 0 0 0 0 2 0 0 0 0 2 0\n")
    with pytest.raises(FormatError) as err:
        load_kitti(path)
    assert "orthonormal" in str(err.value)


# --------------------------------------------------------------------- reports

def test_metrics_report_and_csv(tmp_path):
    rng = np.random.default_rng(16)
    gt = _random_trajectory(rng, n=20)
    est = _translated(gt, np.array([0.1, 0.0, -0.2]))
    metrics = compute_metrics(est, gt, align=False)
    assert metrics["pairs"] == 20
    assert metrics["ate_rmse"] == pytest.approx(np.linalg.norm([0.1, 0.0, -0.2]),
                                                rel=1e-12)
    assert metrics["rpe_trans_rmse"] < 1e-12

    path = tmp_path / "metrics.csv"
    save_metrics_csv(path, metrics)
    lines = path.read_text().splitlines()
    assert lines[0] == "pairs,rpe_delta,ate_rmse,rpe_trans_rmse,rpe_rot_rmse"
    assert lines[1].split(",")[0] == "20"
    assert float(lines[1].split(",")[2]) == metrics["ate_rmse"]

    table = format_metrics_table(metrics)
    assert "ATE RMSE" in table and "associated pairs" in table


def test_error_plot_svg(tmp_path):
    rng = np.random.default_rng(17)
    gt = _random_trajectory(rng, n=15)
    est = _translated(gt, np.array([0.05, 0.0, 0.0]))
    path = tmp_path / "errors.svg"
    save_error_plot(path, est, gt)
    text = path.read_text()
    assert text.lstrip().startswith("<?xml")
    assert "</svg>" in text
    # a second render must be byte-identical
    path2 = tmp_path / "errors2.svg"
    save_error_plot(path2, est, gt)
    assert path.read_bytes() == path2.read_bytes()
