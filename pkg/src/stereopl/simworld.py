"""Deterministic synthetic stereo world: landmarks, trajectory, measurements.

Everything derives from one integer seed through a SeedSequence tree (child 0
generates the world, child 1+i drives frame i), so equal seeds give bitwise
identical worlds and observation streams. Line observations are emitted both
as a ready stereo observation built from the true extreme endpoints and as
1 to 3 collinear detected pieces with gaps, so the merge stage has real work
to do.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .factors import LineObservation, PointObservation, line_coefficients
from .geometry import Pose, StereoCamera
from .line_merge import Segment2D, to_center_origin

#: Landmarks must keep this distance (m) from every camera position, and
#: rendering clips geometry closer than this to the image plane.
MIN_CLEARANCE = 0.5

TRAJECTORIES = ("circle", "straightaway", "figure-eight")

VGA_CAMERA = StereoCamera(fx=450.0, fy=450.0, cx=320.0, cy=240.0, bf=50.0,
                          width=640, height=480)
KITTI_CAMERA = StereoCamera(fx=718.856, fy=718.856, cx=607.1928, cy=185.2157,
                            bf=386.1448, width=1241, height=376)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n_points: int = 200
    n_lines: int = 50
    extent: float = 20.0
    trajectory: str = "circle"
    speed: float = 1.0
    duration: float = 10.0
    frame_rate: float = 10.0
    pixel_noise_sigma: float = 0.0
    dropout_prob: float = 0.0
    max_line_splits: int = 3
    camera: StereoCamera = VGA_CAMERA

    def __post_init__(self):
        if self.n_points < 0 or self.n_lines < 0:
            raise ValueError("landmark counts must be non-negative")
        if self.frame_rate <= 0 or self.speed <= 0 or self.duration <= 0:
            raise ValueError("frame_rate, speed and duration must be positive")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must be in [0, 1)")
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"trajectory must be one of {TRAJECTORIES}")
        if self.pixel_noise_sigma < 0:
            raise ValueError("pixel_noise_sigma must be non-negative")
        if not 1 <= self.max_line_splits <= 3:
            raise ValueError("max_line_splits must be in 1..3")

    @property
    def n_frames(self) -> int:
        return max(2, int(round(self.duration * self.frame_rate)))


@dataclass(frozen=True)
class World:
    cfg: WorldConfig
    points: np.ndarray
    point_responses: np.ndarray
    lines: np.ndarray
    poses: list[Pose] = field(repr=False)
    timestamps: np.ndarray = field(repr=False)
    frame_seeds: tuple = field(repr=False)


@dataclass(frozen=True)
class SyntheticFrame:
    truth_pose: Pose
    timestamp: float
    point_obs: list
    line_obs: list


def _trajectory_positions_tangents(cfg: WorldConfig, t: np.ndarray):
    if cfg.trajectory == "circle":
        radius = cfg.speed * cfg.duration / (2.0 * np.pi)
        omega = 2.0 * np.pi / cfg.duration
        pos = np.column_stack([radius * np.cos(omega * t),
                               radius * np.sin(omega * t),
                               np.zeros_like(t)])
        tan = np.column_stack([-np.sin(omega * t), np.cos(omega * t),
                               np.zeros_like(t)])
        return pos, tan
    if cfg.trajectory == "straightaway":
        pos = np.column_stack([cfg.speed * t, np.zeros_like(t), np.zeros_like(t)])
        tan = np.tile(np.array([1.0, 0.0, 0.0]), (len(t), 1))
        return pos, tan
    # figure-eight (Gerono lemniscate); amplitude fixed by a numeric arc-length
    # match, so the speed is only approximate along the curve
    tau = 2.0 * np.pi * t / cfg.duration
    fine = np.linspace(0.0, 2.0 * np.pi, 2049)
    unit = np.column_stack([np.sin(fine), np.sin(fine) * np.cos(fine)])
    unit_len = float(np.sum(np.linalg.norm(np.diff(unit, axis=0), axis=1)))
    a = cfg.speed * cfg.duration / unit_len
    pos = np.column_stack([a * np.sin(tau), a * np.sin(tau) * np.cos(tau),
                           np.zeros_like(tau)])
    tan = np.column_stack([np.cos(tau), np.cos(2.0 * tau), np.zeros_like(tau)])
    tan /= np.linalg.norm(tan, axis=1, keepdims=True)
    return pos, tan


def _camera_pose(position: np.ndarray, forward: np.ndarray,
                 up=np.array([0.0, 0.0, 1.0])) -> Pose:
    """Camera-from-world pose with the optical axis along the travel direction.

    Image x is the rider's right ( forward x up ), image y points down; the
    triple (right, down, forward) is right-handed.
    """
    f = forward / np.linalg.norm(forward)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    down /= np.linalg.norm(down)
    R = np.vstack([right, down, f])
    return Pose(rotation=R, translation=-R @ position)


def generate_world(cfg: WorldConfig) -> World:
    root = np.random.SeedSequence(cfg.seed)
    children = root.spawn(1 + cfg.n_frames)
    rng = np.random.default_rng(children[0])

    t = np.arange(cfg.n_frames) / cfg.frame_rate
    positions, tangents = _trajectory_positions_tangents(cfg, t)
    poses = [_camera_pose(p, d) for p, d in zip(positions, tangents)]

    # landmarks scatter in a box of half-size extent around a random point of
    # the path, so every stretch of the trajectory has scenery to observe
    def sample_clear(min_gap):
        for _ in range(10000):
            anchor = positions[rng.integers(0, len(positions))]
            cand = anchor + rng.uniform(-cfg.extent, cfg.extent, 3)
            if np.min(np.linalg.norm(positions - cand, axis=1)) >= min_gap:
                return cand
        raise ValueError("could not place landmark with required clearance")

    points = np.array([sample_clear(MIN_CLEARANCE) for _ in range(cfg.n_points)])
    points = points.reshape(cfg.n_points, 3)
    responses = rng.uniform(0.0, 1.0, cfg.n_points)

    lines = np.zeros((cfg.n_lines, 6))
    for i in range(cfg.n_lines):
        for _ in range(10000):
            a = sample_clear(MIN_CLEARANCE)
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            b = a + d * rng.uniform(1.0, 4.0)
            if np.min(np.linalg.norm(positions - b, axis=1)) >= MIN_CLEARANCE:
                lines[i, :3] = a
                lines[i, 3:] = b
                break
        else:
            raise ValueError("could not place line landmark")

    return World(cfg=cfg, points=points, point_responses=responses, lines=lines,
                 poses=poses, timestamps=t,
                 frame_seeds=tuple(children[1:]))


def _in_bounds(u: float, v: float, cam: StereoCamera) -> bool:
    return 0.0 <= u < cam.width and 0.0 <= v < cam.height


def _project(cam: StereoCamera, pc: np.ndarray):
    z = pc[2]
    uL = cam.fx * pc[0] / z + cam.cx
    vL = cam.fy * pc[1] / z + cam.cy
    return uL, vL, uL - cam.bf / z


def _split_fractions(rng, n_pieces: int):
    if n_pieces == 1:
        return [(0.0, 1.0)]
    if n_pieces == 2:
        g = rng.uniform(0.3, 0.7)
        w = rng.uniform(0.05, 0.1)
        return [(0.0, g - w), (g + w, 1.0)]
    g1 = rng.uniform(0.2, 0.4)
    g2 = rng.uniform(0.6, 0.8)
    w1 = rng.uniform(0.03, 0.08)
    w2 = rng.uniform(0.03, 0.08)
    return [(0.0, g1 - w1), (g1 + w1, g2 - w2), (g2 + w2, 1.0)]


def render_frame(world: World, frame_index: int) -> SyntheticFrame:
    """Project landmarks for one frame and corrupt them per the config.

    RNG draw order per visible candidate is fixed (dropout uniform first, then
    all noise draws) and noise is drawn even at sigma = 0, so the stream
    position at each candidate does not depend on the noise level; only the
    in-bounds filtering of noisy values can differ between noise levels.
    """
    cfg = world.cfg
    cam = cfg.camera
    T = world.poses[frame_index]
    rng = np.random.default_rng(world.frame_seeds[frame_index])
    sigma = cfg.pixel_noise_sigma
    obs_sigma = sigma if sigma > 0 else 1.0

    point_obs = []
    for i in range(cfg.n_points):
        pc = T.rotation @ world.points[i] + T.translation
        if pc[2] <= MIN_CLEARANCE:
            continue
        uL, vL, uR = _project(cam, pc)
        if not (_in_bounds(uL, vL, cam) and 0.0 <= uR < cam.width):
            continue
        if rng.uniform() < cfg.dropout_prob:
            continue
        noise = sigma * rng.standard_normal(3)
        nuL, nvL, nuR = uL + noise[0], vL + noise[1], uR + noise[2]
        if not (_in_bounds(nuL, nvL, cam) and 0.0 <= nuR < cam.width):
            continue
        point_obs.append((i, PointObservation(uL=nuL, vL=nvL, uR=nuR,
                                              sigma=obs_sigma)))

    line_obs = []
    for i in range(cfg.n_lines):
        pa = T.rotation @ world.lines[i, :3] + T.translation
        pb = T.rotation @ world.lines[i, 3:] + T.translation
        if pa[2] <= MIN_CLEARANCE or pb[2] <= MIN_CLEARANCE:
            continue
        ua, va, ra = _project(cam, pa)
        ub, vb, rb = _project(cam, pb)
        if not (_in_bounds(ua, va, cam) and _in_bounds(ub, vb, cam)
                and 0.0 <= ra < cam.width and 0.0 <= rb < cam.width):
            continue
        if rng.uniform() < cfg.dropout_prob:
            continue
        n_pieces = int(rng.integers(1, cfg.max_line_splits + 1))
        fractions = _split_fractions(rng, n_pieces)
        end_noise = sigma * rng.standard_normal((len(fractions), 2, 2))
        right_noise = sigma * rng.standard_normal(2)
        A = np.array([ua, va])
        B = np.array([ub, vb])
        pieces = []
        ok = True
        for (s, e), noise in zip(fractions, end_noise):
            ps = A + s * (B - A) + noise[0]
            pe = A + e * (B - A) + noise[1]
            if not (_in_bounds(ps[0], ps[1], cam) and _in_bounds(pe[0], pe[1], cam)
                    and np.linalg.norm(pe - ps) > 1e-6):
                ok = False
                break
            pieces.append(to_center_origin(
                Segment2D(ps[0], ps[1], pe[0], pe[1]), cam.width, cam.height))
        if not ok:
            continue
        ns = A + end_noise[0, 0]
        ne = B + end_noise[-1, 1]
        l = line_coefficients(np.array([ns[0], ns[1], 1.0]),
                              np.array([ne[0], ne[1], 1.0]))
        obs = LineObservation(l=l, Usr=ra + right_noise[0], Uer=rb + right_noise[1],
                              sigma=obs_sigma)
        line_obs.append((i, obs, pieces))

    return SyntheticFrame(truth_pose=T, timestamp=float(world.timestamps[frame_index]),
                          point_obs=point_obs, line_obs=line_obs)


def render_all(world: World) -> list[SyntheticFrame]:
    return [render_frame(world, k) for k in range(world.cfg.n_frames)]
