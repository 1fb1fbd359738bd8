"""Robust Levenberg-Marquardt over pose/landmark factor graphs.

The graph holds camera poses, point landmarks (3 DoF), line landmarks (two 3D
endpoints, 6 DoF) and stereo observations of both. Optimization modes:

  pose_only   all landmarks fixed, every non-fixed pose free (tracking)
  local_ba    non-fixed poses free plus the landmarks they observe
  global_ba   every pose but the first free, all observed landmarks free

Steps are accepted only on strict cost decrease, so the accepted-cost sequence
is monotone. Factors whose transformed depth falls at or below the near-plane
are culled from the cost for that evaluation and marked NaN in the report.
Residual and Jacobian evaluation is batched with numpy; per-factor formulas
live in module factors and the batched forms are tested against them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateEndpoints, FormatError, SingularSystem
from .factors import (
    LINE_INFORMATION,
    LineCoeffs,
    LineLandmark,
    LineObservation,
    PointLandmark,
    PointObservation,
)
from .geometry import Pose, StereoCamera, Twist, Z_MIN, se3_exp

#: Huber thresholds (pixels): chi-square 95% quantiles for 3 and 2 DoF.
HUBER_POINT_DELTA = math.sqrt(7.815)
HUBER_LINE_DELTA = math.sqrt(5.991)

#: Outlier gate applied to robustified chi2 in the post-pass report.
TAU_OUT = 1.0

MODES = ("pose_only", "local_ba", "global_ba")

#: Schur complement kicks in when free landmarks outnumber free poses this much.
SCHUR_RATIO = 10


@dataclass(frozen=True)
class LmSettings:
    lam0: float = 1e-4
    lam_up: float = 10.0
    lam_down: float = 0.5
    max_iterations: int = 100
    cost_tolerance: float = 1e-12
    step_tolerance: float = 1e-10
    lam_max: float = 1e10

    def __post_init__(self):
        for name in ("lam0", "lam_up", "lam_down", "max_iterations",
                     "cost_tolerance", "step_tolerance", "lam_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class PointFactor:
    pose: int
    landmark: int
    obs: PointObservation
    info: float


@dataclass
class LineFactor:
    pose: int
    landmark: int
    obs: LineObservation
    info: float


@dataclass
class FactorGraph:
    """Mutable problem container; exclusively owned while optimize runs."""

    cam: StereoCamera
    poses: list[Pose] = field(default_factory=list)
    fixed: list[bool] = field(default_factory=list)
    point_landmarks: list[PointLandmark] = field(default_factory=list)
    line_landmarks: list[LineLandmark] = field(default_factory=list)
    point_factors: list[PointFactor] = field(default_factory=list)
    line_factors: list[LineFactor] = field(default_factory=list)
    huber_point: float = HUBER_POINT_DELTA
    huber_line: float = HUBER_LINE_DELTA

    def add_pose(self, pose: Pose, fixed: bool = False) -> int:
        self.poses.append(pose)
        self.fixed.append(bool(fixed))
        return len(self.poses) - 1

    def add_point(self, landmark: PointLandmark) -> int:
        self.point_landmarks.append(landmark)
        return len(self.point_landmarks) - 1

    def add_line(self, landmark: LineLandmark) -> int:
        self.line_landmarks.append(landmark)
        return len(self.line_landmarks) - 1

    def add_point_factor(self, pose: int, landmark: int, obs: PointObservation,
                         info: float | None = None) -> None:
        if not (0 <= pose < len(self.poses)):
            raise ValueError(f"pose index {pose} out of range")
        if not (0 <= landmark < len(self.point_landmarks)):
            raise ValueError(f"point landmark index {landmark} out of range")
        if info is None:
            info = 1.0 / (obs.sigma * obs.sigma)
        self.point_factors.append(PointFactor(pose, landmark, obs, info))

    def add_line_factor(self, pose: int, landmark: int, obs: LineObservation,
                        info: float = LINE_INFORMATION) -> None:
        if not (0 <= pose < len(self.poses)):
            raise ValueError(f"pose index {pose} out of range")
        if not (0 <= landmark < len(self.line_landmarks)):
            raise ValueError(f"line landmark index {landmark} out of range")
        self.line_factors.append(LineFactor(pose, landmark, obs, info))


@dataclass
class OptimizeReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    reason: str
    point_chi2: np.ndarray
    line_chi2: np.ndarray
    point_outliers: np.ndarray
    line_outliers: np.ndarray
    culled_points: int
    culled_lines: int
    cost_trace: list[float] = field(default_factory=list)

    @property
    def inlier_count(self) -> int:
        return (int(np.sum(~self.point_outliers & ~np.isnan(self.point_chi2)))
                + int(np.sum(~self.line_outliers & ~np.isnan(self.line_chi2))))


def huber_cost(r2: float, delta: float) -> tuple[float, float]:
    """Robust cost and its derivative w.r.t. the squared residual."""
    if r2 < 0 or delta <= 0:
        raise ValueError("need r2 >= 0 and delta > 0")
    r = math.sqrt(r2)
    if r <= delta:
        return r2, 1.0
    return 2.0 * delta * r - delta * delta, delta / r


def _huber_vec(r2: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(r2)
    out = np.where(r <= delta, r2, 2.0 * delta * r - delta * delta)
    w = np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300))
    return out, w


def _batch_hat(v: np.ndarray) -> np.ndarray:
    k = v.shape[0]
    H = np.zeros((k, 3, 3))
    H[:, 0, 1] = -v[:, 2]
    H[:, 0, 2] = v[:, 1]
    H[:, 1, 0] = v[:, 2]
    H[:, 1, 2] = -v[:, 0]
    H[:, 2, 0] = -v[:, 1]
    H[:, 2, 1] = v[:, 0]
    return H


class _State:
    """Residuals, robust costs, and weights of one graph evaluation."""

    __slots__ = ("p_res", "p_chi2", "p_cost", "p_w", "p_ok", "p_pc",
                 "l_res", "l_chi2", "l_cost", "l_w", "l_ok", "l_ps", "l_pe",
                 "cost")


class _Problem:
    """Cached observation arrays plus free-variable bookkeeping for one run."""

    def __init__(self, graph: FactorGraph, mode: str):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.graph = graph
        self.cam = graph.cam
        n_poses = len(graph.poses)

        if mode == "global_ba":
            pose_free = [i != 0 and not graph.fixed[i] for i in range(n_poses)]
        else:
            pose_free = [not f for f in graph.fixed]
        free_pose_set = {i for i, f in enumerate(pose_free) if f}

        pf, lf = graph.point_factors, graph.line_factors
        if mode == "pose_only":
            pt_free_set: set[int] = set()
            ln_free_set: set[int] = set()
        elif mode == "local_ba":
            pt_free_set = {f.landmark for f in pf if f.pose in free_pose_set}
            ln_free_set = {f.landmark for f in lf if f.pose in free_pose_set}
        else:
            pt_free_set = {f.landmark for f in pf}
            ln_free_set = {f.landmark for f in lf}

        if (pt_free_set or ln_free_set) and all(pose_free[i] for i in range(n_poses)):
            raise ValueError("gauge unfixed: free landmarks need a fixed pose")

        self.free_poses = sorted(free_pose_set)
        self.free_pts = sorted(pt_free_set)
        self.free_lines = sorted(ln_free_set)
        self.pose_off = {p: 6 * i for i, p in enumerate(self.free_poses)}
        base = 6 * len(self.free_poses)
        self.pt_off = {p: base + 3 * i for i, p in enumerate(self.free_pts)}
        base += 3 * len(self.free_pts)
        self.line_off = {p: base + 6 * i for i, p in enumerate(self.free_lines)}
        self.n_vars = base + 6 * len(self.free_lines)
        self.n_pose_vars = 6 * len(self.free_poses)

        # cached observation arrays
        self.p_pose = np.array([f.pose for f in pf], dtype=int)
        self.p_lm = np.array([f.landmark for f in pf], dtype=int)
        self.p_obs = np.array([[f.obs.uL, f.obs.vL, f.obs.uR] for f in pf]).reshape(-1, 3)
        self.p_info = np.array([f.info for f in pf])
        self.l_pose = np.array([f.pose for f in lf], dtype=int)
        self.l_lm = np.array([f.landmark for f in lf], dtype=int)
        self.l_line = np.array([[f.obs.l.lx, f.obs.l.ly, f.obs.l.lz] for f in lf]).reshape(-1, 3)
        self.l_U = np.array([[f.obs.Usr, f.obs.Uer] for f in lf]).reshape(-1, 2)
        self.l_info = np.array([f.info for f in lf])
        self.l_s = np.hypot(self.l_line[:, 0], self.l_line[:, 1]) if len(lf) else np.zeros(0)

    # -------------------------------------------------------------- variables

    def initial_values(self):
        g = self.graph
        poses = list(g.poses)
        pts = (np.array([p.P for p in g.point_landmarks], dtype=float).reshape(-1, 3)
               if g.point_landmarks else np.zeros((0, 3)))
        lines = (np.array([np.concatenate([l.Ps, l.Pe]) for l in g.line_landmarks],
                          dtype=float).reshape(-1, 6)
                 if g.line_landmarks else np.zeros((0, 6)))
        return poses, pts, lines

    def write_back(self, poses, pts, lines) -> None:
        g = self.graph
        g.poses[:] = poses
        g.point_landmarks[:] = [PointLandmark(P.copy()) for P in pts]
        g.line_landmarks[:] = [LineLandmark(v[:3].copy(), v[3:].copy()) for v in lines]

    def apply_step(self, delta, poses, pts, lines):
        new_poses = list(poses)
        for p in self.free_poses:
            off = self.pose_off[p]
            new_poses[p] = se3_exp(Twist.from_vector(delta[off:off + 6])).compose(poses[p])
        new_pts = pts.copy()
        for p in self.free_pts:
            off = self.pt_off[p]
            new_pts[p] = pts[p] + delta[off:off + 3]
        new_lines = lines.copy()
        for p in self.free_lines:
            off = self.line_off[p]
            new_lines[p] = lines[p] + delta[off:off + 6]
        return new_poses, new_pts, new_lines

    # -------------------------------------------------------------- evaluation

    def evaluate(self, poses, pts, lines) -> _State:
        cam = self.cam
        g = self.graph
        st = _State()
        R = np.stack([T.rotation for T in poses]) if poses else np.zeros((0, 3, 3))
        t = np.stack([T.translation for T in poses]) if poses else np.zeros((0, 3))

        if len(self.p_pose):
            Pw = pts[self.p_lm]
            pc = np.einsum("kij,kj->ki", R[self.p_pose], Pw) + t[self.p_pose]
            z = pc[:, 2]
            ok = z > Z_MIN
            zs = np.where(ok, z, 1.0)
            uL = cam.fx * pc[:, 0] / zs + cam.cx
            vL = cam.fy * pc[:, 1] / zs + cam.cy
            uR = uL - cam.bf / zs
            res = self.p_obs - np.stack([uL, vL, uR], axis=1)
            chi2 = self.p_info * np.einsum("ki,ki->k", res, res)
            cost, w = _huber_vec(chi2, g.huber_point)
            st.p_res, st.p_chi2, st.p_cost, st.p_w, st.p_ok, st.p_pc = res, chi2, cost, w, ok, pc
        else:
            st.p_res = np.zeros((0, 3))
            st.p_chi2 = st.p_cost = st.p_w = np.zeros(0)
            st.p_ok = np.zeros(0, dtype=bool)
            st.p_pc = np.zeros((0, 3))

        if len(self.l_pose):
            Rl = R[self.l_pose]
            tl = t[self.l_pose]
            ps = np.einsum("kij,kj->ki", Rl, lines[self.l_lm][:, :3]) + tl
            pe = np.einsum("kij,kj->ki", Rl, lines[self.l_lm][:, 3:]) + tl
            ok = (ps[:, 2] > Z_MIN) & (pe[:, 2] > Z_MIN)
            lx, ly, lz = self.l_line.T
            s = self.l_s
            e = np.zeros((len(self.l_pose), 2))
            for p, U in ((ps, self.l_U[:, 0]), (pe, self.l_U[:, 1])):
                z = np.where(ok, p[:, 2], 1.0)
                u = cam.fx * p[:, 0] / z + cam.cx
                v = cam.fy * p[:, 1] / z + cam.cy
                e[:, 0] += (lx * u + ly * v + lz) / s
                e[:, 1] += (lx * (U + cam.bf / z) + ly * v + lz) / s
            chi2 = self.l_info * np.einsum("ki,ki->k", e, e)
            cost, w = _huber_vec(chi2, g.huber_line)
            st.l_res, st.l_chi2, st.l_cost, st.l_w, st.l_ok = e, chi2, cost, w, ok
            st.l_ps, st.l_pe = ps, pe
        else:
            st.l_res = np.zeros((0, 2))
            st.l_chi2 = st.l_cost = st.l_w = np.zeros(0)
            st.l_ok = np.zeros(0, dtype=bool)
            st.l_ps = st.l_pe = np.zeros((0, 3))

        st.cost = float(np.sum(st.p_cost[st.p_ok])) + float(np.sum(st.l_cost[st.l_ok]))
        return st

    def supported(self, st: _State) -> bool:
        """True when every free variable keeps at least one unculled factor.

        A state violating this has an exactly singular diagonal block, which
        no amount of relative damping can repair, so such trial steps are
        rejected instead of accepted.
        """
        g = self.graph
        pose_seen = np.zeros(len(g.poses), dtype=bool)
        pt_seen = np.zeros(len(g.point_landmarks) + 1, dtype=bool)
        ln_seen = np.zeros(len(g.line_landmarks) + 1, dtype=bool)
        if len(self.p_pose):
            pose_seen[self.p_pose[st.p_ok]] = True
            pt_seen[self.p_lm[st.p_ok]] = True
        if len(self.l_pose):
            pose_seen[self.l_pose[st.l_ok]] = True
            ln_seen[self.l_lm[st.l_ok]] = True
        return (all(pose_seen[p] for p in self.free_poses)
                and all(pt_seen[p] for p in self.free_pts)
                and all(ln_seen[p] for p in self.free_lines))

    # ---------------------------------------------------------------- assembly

    def _point_jacobians(self, st: _State, poses):
        cam = self.cam
        pc = st.p_pc
        z = np.where(st.p_ok, pc[:, 2], 1.0)
        z2 = z * z
        k = len(z)
        dproj = np.zeros((k, 3, 3))
        dproj[:, 0, 0] = cam.fx / z
        dproj[:, 0, 2] = -cam.fx * pc[:, 0] / z2
        dproj[:, 1, 1] = cam.fy / z
        dproj[:, 1, 2] = -cam.fy * pc[:, 1] / z2
        dproj[:, 2, 0] = cam.fx / z
        dproj[:, 2, 2] = -cam.fx * pc[:, 0] / z2 + cam.bf / z2
        M = np.concatenate([np.broadcast_to(np.eye(3), (k, 3, 3)), -_batch_hat(pc)], axis=2)
        Jp = -np.einsum("kij,kjl->kil", dproj, M)
        R = np.stack([T.rotation for T in poses])
        Jl = -np.einsum("kij,kjl->kil", dproj, R[self.p_pose])
        return Jp, Jl

    def _line_jacobians(self, st: _State, poses):
        cam = self.cam
        lx, ly = self.l_line[:, 0], self.l_line[:, 1]
        s = self.l_s
        fxlx = cam.fx * lx
        fyly = cam.fy * ly
        bflx = cam.bf * lx
        R = np.stack([T.rotation for T in poses])
        Rl = R[self.l_pose]
        out = []
        for p in (st.l_ps, st.l_pe):
            z = np.where(st.l_ok, p[:, 2], 1.0)
            zs = z * s
            z2s = z * z * s
            k = len(z)
            Jc = np.zeros((k, 2, 3))
            Jc[:, 0, 0] = fxlx / zs
            Jc[:, 0, 1] = fyly / zs
            Jc[:, 0, 2] = -(p[:, 0] * fxlx + p[:, 1] * fyly) / z2s
            Jc[:, 1, 1] = fyly / zs
            Jc[:, 1, 2] = -(bflx + p[:, 1] * fyly) / z2s
            M = np.concatenate([np.broadcast_to(np.eye(3), (k, 3, 3)), -_batch_hat(p)], axis=2)
            Jpose = np.einsum("kij,kjl->kil", Jc, M)
            Jlm = np.einsum("kij,kjl->kil", Jc, Rl)
            out.append((Jpose, Jlm))
        (Jps, Jls), (Jpe, Jle) = out
        return Jps + Jpe, Jls, Jle

    def _scatter(self, H, g, scale, J_blocks, res):
        """Accumulate s*J^T J and s*J^T r for one factor family.

        J_blocks: list of (J (k,rdim,bdim), var offsets (k,) with -1 for fixed).
        """
        for Ja, offa in J_blocks:
            sel = offa >= 0
            if not np.any(sel):
                continue
            sc = scale[sel]
            Jsel = Ja[sel]
            gv = np.einsum("k,kri,kr->ki", sc, Jsel, res[sel])
            rows = offa[sel][:, None] + np.arange(Ja.shape[2])[None, :]
            np.add.at(g, rows, gv)
            for Jb, offb in J_blocks:
                selb = sel & (offb >= 0)
                if not np.any(selb):
                    continue
                scb = scale[selb]
                blocks = np.einsum("k,kri,krj->kij", scb, Ja[selb], Jb[selb])
                r = offb[selb]
                rows = offa[selb][:, None, None] + np.arange(Ja.shape[2])[None, :, None]
                cols = r[:, None, None] + np.arange(Jb.shape[2])[None, None, :]
                np.add.at(H, (np.broadcast_to(rows, blocks.shape),
                              np.broadcast_to(cols, blocks.shape)), blocks)

    def assemble(self, st: _State, poses):
        H = np.zeros((self.n_vars, self.n_vars))
        g = np.zeros(self.n_vars)
        if len(self.p_pose):
            Jp, Jl = self._point_jacobians(st, poses)
            scale = self.p_info * st.p_w * st.p_ok
            offp = np.array([self.pose_off.get(p, -1) for p in self.p_pose])
            offl = np.array([self.pt_off.get(p, -1) for p in self.p_lm])
            self._scatter(H, g, scale, [(Jp, offp), (Jl, offl)], st.p_res)
        if len(self.l_pose):
            Jpose, Jls, Jle = self._line_jacobians(st, poses)
            scale = self.l_info * st.l_w * st.l_ok
            offp = np.array([self.pose_off.get(p, -1) for p in self.l_pose])
            offl = np.array([self.line_off.get(p, -1) for p in self.l_lm])
            offl_e = np.where(offl >= 0, offl + 3, -1)
            self._scatter(H, g, scale, [(Jpose, offp), (Jls, offl), (Jle, offl_e)],
                          st.l_res)
        return H, g

    def gradient(self, st: _State, poses) -> np.ndarray:
        """Exact gradient of the robust cost over the free variables."""
        _, g = self.assemble(st, poses)
        return 2.0 * g

    # ------------------------------------------------------------------ solve

    def solve(self, H, g, lam) -> np.ndarray:
        n = self.n_vars
        if n == 0:
            return np.zeros(0)
        rhs = -g
        nP = self.n_pose_vars
        nL = n - nP
        n_lms = len(self.free_pts) + len(self.free_lines)
        n_ps = len(self.free_poses)
        use_schur = nP > 0 and nL > 0 and n_lms > SCHUR_RATIO * n_ps
        # relative damping keeps unconstrained blocks singular at any lam
        damped = H + lam * np.diag(np.diag(H))
        if not use_schur:
            L = np.linalg.cholesky(damped)
            y = solve_triangular(L, rhs, lower=True)
            return solve_triangular(L.T, y, lower=False)
        A = damped[:nP, :nP]
        B = damped[:nP, nP:]
        C = damped[nP:, nP:]
        # the landmark-landmark block is block diagonal (3x3 points then
        # 6x6 lines); factor and invert each family as one batched call
        nPt3 = 3 * len(self.free_pts)
        segs = []
        for lo, hi, size in ((0, nPt3, 3), (nPt3, nL, 6)):
            if hi == lo:
                segs.append(None)
                continue
            k = (hi - lo) // size
            idx = np.arange(k)
            blocks = C[lo:hi, lo:hi].reshape(k, size, k, size)[idx, :, idx, :]
            np.linalg.cholesky(blocks)  # raises unless every block is PD
            segs.append((lo, hi, size, np.linalg.inv(blocks)))
        BCinv = np.empty_like(B)
        for seg in segs:
            if seg is None:
                continue
            lo, hi, size, inv = seg
            Bseg = B[:, lo:hi].reshape(nP, -1, size)
            BCinv[:, lo:hi] = np.einsum("pki,kij->pkj", Bseg, inv).reshape(nP, hi - lo)
        S = A - BCinv @ B.T
        rhs_p = rhs[:nP] - BCinv @ rhs[nP:]
        L = np.linalg.cholesky(S)
        y = solve_triangular(L, rhs_p, lower=True)
        dp = solve_triangular(L.T, y, lower=False)
        v = rhs[nP:] - B.T @ dp
        dl = np.empty(nL)
        for seg in segs:
            if seg is None:
                continue
            lo, hi, size, inv = seg
            vseg = v[lo:hi].reshape(-1, size)
            dl[lo:hi] = np.einsum("kij,kj->ki", inv, vseg).reshape(hi - lo)
        return np.concatenate([dp, dl])


def total_cost(graph: FactorGraph) -> float:
    """Robustified weighted cost over all evaluable factors."""
    prob = _Problem(graph, "pose_only")
    return prob.evaluate(*prob.initial_values()).cost


def cost_gradient(graph: FactorGraph, mode: str) -> np.ndarray:
    """Analytic gradient of total_cost w.r.t. the mode's free variables."""
    prob = _Problem(graph, mode)
    poses, pts, lines = prob.initial_values()
    return prob.gradient(prob.evaluate(poses, pts, lines), poses)


def optimize(graph: FactorGraph, settings: LmSettings = LmSettings(),
             mode: str = "global_ba", tau_out: float = TAU_OUT) -> OptimizeReport:
    """Damped Gauss-Newton with accept/reject; mutates the graph in place."""
    prob = _Problem(graph, mode)
    poses, pts, lines = prob.initial_values()
    st = prob.evaluate(poses, pts, lines)
    initial_cost = cost = st.cost
    trace = [cost]
    lam = settings.lam0
    iterations = 0
    converged = False
    reason = "max_iterations"

    for _ in range(settings.max_iterations):
        if prob.n_vars == 0:
            converged, reason = True, "no_free_variables"
            break
        H, g = prob.assemble(st, poses)
        stepped = False
        while True:
            if lam > settings.lam_max:
                break
            try:
                delta = prob.solve(H, g, lam)
            except np.linalg.LinAlgError:
                lam *= settings.lam_up
                continue
            if np.linalg.norm(delta) < settings.step_tolerance:
                converged, reason = True, "step_tolerance"
                break
            try:
                cand = prob.apply_step(delta, poses, pts, lines)
                cand_st = prob.evaluate(*cand)
                cand_cost = cand_st.cost if prob.supported(cand_st) else math.inf
            except DegenerateEndpoints:
                cand_cost = math.inf
            if cand_cost < cost:
                poses, pts, lines = cand
                decrease = cost - cand_cost
                cost = cand_cost
                st = cand_st
                lam = max(lam * settings.lam_down, 1e-18)
                iterations += 1
                trace.append(cost)
                stepped = True
                # relative test: an absolute one would stall small-scale costs
                if decrease < settings.cost_tolerance * max(cost, 1e-300):
                    converged, reason = True, "cost_tolerance"
                break
            lam *= settings.lam_up
        if converged:
            break
        if lam > settings.lam_max:
            if not stepped:
                # solvable but no acceptable step: stalled, not singular
                try:
                    prob.solve(H, g, settings.lam_max)
                except np.linalg.LinAlgError:
                    raise SingularSystem(
                        "damped normal equations not positive definite at lam_max"
                    ) from None
                reason = "lambda_max"
                break

    prob.write_back(poses, pts, lines)
    st = prob.evaluate(poses, pts, lines)
    p_chi2 = np.where(st.p_ok, st.p_cost, np.nan)
    l_chi2 = np.where(st.l_ok, st.l_cost, np.nan)
    return OptimizeReport(
        initial_cost=initial_cost,
        final_cost=st.cost,
        iterations=iterations,
        converged=converged,
        reason=reason,
        point_chi2=p_chi2,
        line_chi2=l_chi2,
        point_outliers=np.nan_to_num(p_chi2, nan=np.inf)
        > graph.huber_point ** 2 * tau_out,
        line_outliers=np.nan_to_num(l_chi2, nan=np.inf)
        > graph.huber_line ** 2 * tau_out,
        culled_points=int(np.sum(~st.p_ok)),
        culled_lines=int(np.sum(~st.l_ok)),
        cost_trace=trace,
    )


# ------------------------------------------------------------------- file I/O

def save_graph(path, graph: FactorGraph) -> None:
    """One record per line; see load_graph for the grammar."""
    with open(path, "w") as fh:
        for i, (T, fx) in enumerate(zip(graph.poses, graph.fixed)):
            vals = np.concatenate([T.rotation.reshape(9), T.translation])
            fh.write(f"POSE {i} {int(fx)} " + " ".join(f"{v:.17g}" for v in vals) + "\n")
        for i, p in enumerate(graph.point_landmarks):
            fh.write(f"PT {i} " + " ".join(f"{v:.17g}" for v in p.P) + "\n")
        for i, l in enumerate(graph.line_landmarks):
            vals = np.concatenate([l.Ps, l.Pe])
            fh.write(f"LINE {i} " + " ".join(f"{v:.17g}" for v in vals) + "\n")
        for f in graph.point_factors:
            fh.write(f"PFACTOR {f.pose} {f.landmark} {f.obs.uL:.17g} {f.obs.vL:.17g} "
                     f"{f.obs.uR:.17g} {f.obs.sigma:.17g}\n")
        for f in graph.line_factors:
            o = f.obs
            fh.write(f"LFACTOR {f.pose} {f.landmark} {o.l.lx:.17g} {o.l.ly:.17g} "
                     f"{o.l.lz:.17g} {o.Usr:.17g} {o.Uer:.17g} {o.sigma:.17g}\n")


def load_graph(path, cam: StereoCamera) -> FactorGraph:
    """Parse the graph text format.

    Records: `POSE i fixed r00..r22 tx ty tz`, `PT i x y z`,
    `LINE i xs ys zs xe ye ze`, `PFACTOR pose pt uL vL uR sigma`,
    `LFACTOR pose line lx ly lz Usr Uer sigma`. Indices must be dense and
    ascending within each record type. The camera is not part of the format.
    Point factor information is 1/sigma^2; line factors carry the fixed line
    information value.
    """
    graph = FactorGraph(cam=cam)
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            kind, args = parts[0], parts[1:]
            try:
                if kind == "POSE":
                    if len(args) != 14:
                        raise ValueError(f"POSE needs 14 fields, got {len(args)}")
                    idx = int(args[0])
                    if idx != len(graph.poses):
                        raise ValueError(f"pose index {idx} not dense/ascending")
                    vals = [float(v) for v in args[2:]]
                    R = np.array(vals[:9]).reshape(3, 3)
                    pose = Pose(R, np.array(vals[9:]))
                    if not pose.is_orthonormal(tol=1e-6):
                        raise ValueError("rotation not orthonormal")
                    graph.add_pose(pose, fixed=bool(int(args[1])))
                elif kind == "PT":
                    if len(args) != 4:
                        raise ValueError(f"PT needs 4 fields, got {len(args)}")
                    idx = int(args[0])
                    if idx != len(graph.point_landmarks):
                        raise ValueError(f"point index {idx} not dense/ascending")
                    graph.add_point(PointLandmark(np.array([float(v) for v in args[1:]])))
                elif kind == "LINE":
                    if len(args) != 7:
                        raise ValueError(f"LINE needs 7 fields, got {len(args)}")
                    idx = int(args[0])
                    if idx != len(graph.line_landmarks):
                        raise ValueError(f"line index {idx} not dense/ascending")
                    vals = np.array([float(v) for v in args[1:]])
                    graph.add_line(LineLandmark(vals[:3], vals[3:]))
                elif kind == "PFACTOR":
                    if len(args) != 6:
                        raise ValueError(f"PFACTOR needs 6 fields, got {len(args)}")
                    obs = PointObservation(uL=float(args[2]), vL=float(args[3]),
                                           uR=float(args[4]), sigma=float(args[5]))
                    graph.add_point_factor(int(args[0]), int(args[1]), obs)
                elif kind == "LFACTOR":
                    if len(args) != 8:
                        raise ValueError(f"LFACTOR needs 8 fields, got {len(args)}")
                    obs = LineObservation(
                        l=LineCoeffs(float(args[2]), float(args[3]), float(args[4])),
                        Usr=float(args[5]), Uer=float(args[6]), sigma=float(args[7]))
                    graph.add_line_factor(int(args[0]), int(args[1]), obs)
                else:
                    raise ValueError(f"unknown record {kind}")
            except (ValueError, DegenerateEndpoints) as exc:
                raise FormatError(path, line_no, str(exc)) from None
    return graph
