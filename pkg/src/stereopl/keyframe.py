"""Keyframe insertion policy: PID-offset inlier ratio rule plus velocity gate.

The inlier rule inserts when the current tracked-inlier count drops below a
threshold built from the reference keyframe's count, offset by a discrete PID
term driven by the inlier error. A scalar Kalman filter estimates camera speed
from reference-to-current displacement; speeds above the gate also force
insertion. The stateful KeyframePolicy wraps both rules for one tracking
session and emits one decision record per frame.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError

REASON_INLIER = "inlier_rule"
REASON_VELOCITY = "velocity_rule"
REASON_NONE = "none"

DEFAULT_RATIO = 0.75
DEFAULT_V_GATE = 7.0


@dataclass(frozen=True)
class PidState:
    kp: float = 0.3
    ki: float = 0.05
    kd: float = 0.1
    integral: float = 0.0
    prev_error: float = 0.0
    integral_clamp: float = 50.0

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0 or self.kd < 0:
            raise ValueError("PID gains must be non-negative")
        if self.integral_clamp <= 0:
            raise ValueError("integral_clamp must be positive")
        if abs(self.integral) > self.integral_clamp:
            raise ValueError("integral exceeds clamp")


@dataclass(frozen=True)
class VelocityKalman:
    v: float = 0.0
    p: float = 1.0
    q: float = 1e-3
    r_meas: float = 1e-2

    def __post_init__(self):
        # q = 0 is allowed so the variance-contraction property is testable
        if self.p <= 0 or self.r_meas <= 0 or self.q < 0:
            raise ValueError("need p > 0, r_meas > 0, q >= 0")


@dataclass(frozen=True)
class FrameStats:
    inliers_cur: int
    inliers_ref: int
    position: np.ndarray
    timestamp: float

    def __post_init__(self):
        if self.inliers_cur < 0 or self.inliers_ref < 0:
            raise ValueError("inlier counts must be non-negative")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if self.position.shape != (3,):
            raise ValueError("position must be a 3-vector")


@dataclass(frozen=True)
class KeyframeDecision:
    insert: bool
    reason: str


@dataclass(frozen=True)
class DecisionRecord:
    timestamp: float
    inliers_cur: int
    inliers_ref: int
    delta_pid: float
    v_hat: float
    insert: bool
    reason: str


def pid_update(state: PidState, error: float, dt: float) -> tuple[PidState, float]:
    """Discrete PID step on the inlier error; returns (new state, offset)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    integral = float(np.clip(state.integral + error * dt,
                             -state.integral_clamp, state.integral_clamp))
    delta = (state.kp * error
             + state.ki * integral
             + state.kd * (error - state.prev_error) / dt)
    return replace(state, integral=integral, prev_error=error), delta


def should_insert(stats: FrameStats, delta_pid: float, ratio: float) -> bool:
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0, 1]")
    return stats.inliers_cur < (stats.inliers_ref + delta_pid) * ratio


def kalman_velocity(state: VelocityKalman, pos_prev: np.ndarray,
                    pos_cur: np.ndarray, dt: float) -> tuple[VelocityKalman, float]:
    """Scalar predict/update on speed measured from a displacement over dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = float(np.linalg.norm(np.asarray(pos_cur, float) - np.asarray(pos_prev, float))) / dt
    p = state.p + state.q
    gain = p / (p + state.r_meas)
    v = state.v + gain * (z - state.v)
    p = p * (1.0 - gain)
    return replace(state, v=v, p=p), v


def decide(stats: FrameStats, delta_pid: float, v_hat: float,
           ratio: float = DEFAULT_RATIO, v_gate: float = DEFAULT_V_GATE,
           use_velocity_gate: bool = True) -> KeyframeDecision:
    """Combine the two insertion rules; the inlier rule wins the reason field."""
    inlier_fire = should_insert(stats, delta_pid, ratio)
    velocity_fire = use_velocity_gate and v_hat > v_gate
    if inlier_fire:
        return KeyframeDecision(insert=True, reason=REASON_INLIER)
    if velocity_fire:
        return KeyframeDecision(insert=True, reason=REASON_VELOCITY)
    return KeyframeDecision(insert=False, reason=REASON_NONE)


class KeyframePolicy:
    """Per-session insertion policy; single-threaded, one instance per run.

    The caller owns keyframe bookkeeping: it seeds the first reference (the
    bootstrap keyframe never passes through the policy) and calls
    set_reference again whenever a decision leads to an insertion.
    """

    def __init__(self, pid: PidState | None = None,
                 kalman: VelocityKalman | None = None,
                 ratio: float = DEFAULT_RATIO, v_gate: float = DEFAULT_V_GATE,
                 use_velocity_gate: bool = True):
        if not 0.0 < ratio <= 1.0:
            raise ValueError("ratio must be in (0, 1]")
        self.pid = pid if pid is not None else PidState()
        self.kalman = kalman if kalman is not None else VelocityKalman()
        self.ratio = ratio
        self.v_gate = v_gate
        self.use_velocity_gate = use_velocity_gate
        self._ref_position: np.ndarray | None = None
        self._ref_timestamp: float | None = None
        self._prev_timestamp: float | None = None

    def set_reference(self, position: np.ndarray, timestamp: float) -> None:
        self._ref_position = np.asarray(position, dtype=float).copy()
        self._ref_timestamp = float(timestamp)
        if self._prev_timestamp is None:
            self._prev_timestamp = float(timestamp)

    def observe(self, stats: FrameStats) -> DecisionRecord:
        if self._ref_position is None:
            raise ValueError("set_reference must be called before observe")
        if stats.timestamp <= self._prev_timestamp:
            raise ValueError("timestamps must be strictly increasing")
        dt_frame = stats.timestamp - self._prev_timestamp
        error = stats.inliers_ref - stats.inliers_cur
        self.pid, delta_pid = pid_update(self.pid, error, dt_frame)
        dt_ref = stats.timestamp - self._ref_timestamp
        if dt_ref > 0:
            self.kalman, v_hat = kalman_velocity(
                self.kalman, self._ref_position, stats.position, dt_ref)
        else:
            v_hat = self.kalman.v
        decision = decide(stats, delta_pid, v_hat, self.ratio, self.v_gate,
                          self.use_velocity_gate)
        self._prev_timestamp = stats.timestamp
        return DecisionRecord(
            timestamp=stats.timestamp,
            inliers_cur=stats.inliers_cur,
            inliers_ref=stats.inliers_ref,
            delta_pid=delta_pid,
            v_hat=v_hat,
            insert=decision.insert,
            reason=decision.reason,
        )


CSV_HEADER = ["timestamp", "inliers_cur", "inliers_ref", "delta_pid", "v_hat",
              "insert", "reason"]


def save_decisions(path, records: list[DecisionRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([f"{r.timestamp:.17g}", r.inliers_cur, r.inliers_ref,
                             f"{r.delta_pid:.17g}", f"{r.v_hat:.17g}",
                             int(r.insert), r.reason])


def load_decisions(path) -> list[DecisionRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if line_no == 1:
                if row != CSV_HEADER:
                    raise FormatError(path, 1, f"bad header {row}")
                continue
            if len(row) != 7:
                raise FormatError(path, line_no, f"need 7 fields, got {len(row)}")
            try:
                records.append(DecisionRecord(
                    timestamp=float(row[0]), inliers_cur=int(row[1]),
                    inliers_ref=int(row[2]), delta_pid=float(row[3]),
                    v_hat=float(row[4]), insert=bool(int(row[5])), reason=row[6]))
            except ValueError as exc:
                raise FormatError(path, line_no, str(exc)) from None
    return records
