"""Hough-space clustering and merging of broken 2D segments.

Coordinates are pixels with the origin at the image centre. A segment maps to
(rho, theta) with theta in [0, 2*pi) chosen per quadrant of (slope, intercept)
so that rho = x*cos(theta) + y*sin(theta) >= 0 holds for every point of the
supporting line. Segments whose Hough points agree within the thresholds are
clustered transitively and refit by orthogonal least squares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, VerticalLine

#: Vertical guard on |x1 - x2| (pixels).
EPS_VERTICAL = 1e-9

#: Merge predicate defaults: relative rho tolerance, its floor (px), theta tolerance.
RHO_REL = 0.01
RHO_FLOOR = 1.0
THETA_TOL = math.pi / 180.0


@dataclass(frozen=True)
class Segment2D:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.length() <= 1e-9:
            raise ValueError("segment endpoints coincide")

    def length(self) -> float:
        return math.hypot(self.x2 - self.x1, self.y2 - self.y1)


@dataclass(frozen=True)
class HoughLine:
    rho: float
    theta: float


def slope_intercept(seg: Segment2D) -> tuple[float, float]:
    """Slope and y-intercept; vertical segments have neither."""
    if abs(seg.x1 - seg.x2) <= EPS_VERTICAL:
        raise VerticalLine(f"|x1 - x2| = {abs(seg.x1 - seg.x2)} <= {EPS_VERTICAL}")
    k = (seg.y1 - seg.y2) / (seg.x1 - seg.x2)
    return k, seg.y1 - k * seg.x1


def to_hough(seg: Segment2D) -> HoughLine:
    """Quadrant-cased angle from the signs of (k, b); rho from the first endpoint.

    Boundary assignments: k=0 maps to pi/2 (b >= 0) or 3*pi/2 (b < 0); b=0
    reuses the b>0 rule of the matching slope sign; vertical segments map to
    theta 0 (x1 >= 0) or pi.
    """
    try:
        k, b = slope_intercept(seg)
    except VerticalLine:
        theta = 0.0 if seg.x1 >= 0.0 else math.pi
        return HoughLine(rho=seg.x1 * math.cos(theta), theta=theta)
    if k == 0.0:
        theta = 0.5 * math.pi if b >= 0.0 else 1.5 * math.pi
    elif b > 0.0 or (b == 0.0 and k < 0.0):
        theta = -math.atan(1.0 / k) if k < 0.0 else math.pi - math.atan(1.0 / k)
    elif b == 0.0:  # k > 0
        theta = math.pi - math.atan(1.0 / k)
    elif k < 0.0:  # b < 0
        theta = math.pi - math.atan(1.0 / k)
    else:  # k > 0, b < 0
        theta = 2.0 * math.pi - math.atan(1.0 / k)
    rho = seg.x1 * math.cos(theta) + seg.y1 * math.sin(theta)
    return HoughLine(rho=rho, theta=theta)


def hough_close(a: HoughLine, b: HoughLine, rho_rel: float = RHO_REL,
                theta_tol: float = THETA_TOL, rho_floor: float = RHO_FLOOR) -> bool:
    """Pairwise merge predicate on Hough points.

    Two lines match when their angles agree (wrapped on the circle) and the
    rho gap is under rho_rel of the larger magnitude, floored at rho_floor.
    The antipodal representation (theta + pi, -rho), which arises for lines
    through the origin, is treated as the same line.
    """
    thresh = rho_rel * max(abs(a.rho), abs(b.rho), rho_floor)
    d = abs(a.theta - b.theta) % (2.0 * math.pi)
    d = min(d, 2.0 * math.pi - d)
    if d < theta_tol and abs(a.rho - b.rho) < thresh:
        return True
    return abs(d - math.pi) < theta_tol and abs(a.rho + b.rho) < thresh


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def cluster_segments(segs: list[Segment2D], rho_rel: float = RHO_REL,
                     theta_tol: float = THETA_TOL,
                     rho_floor: float = RHO_FLOOR) -> list[list[int]]:
    """Transitive closure of the pairwise Hough predicate; clusters of indices.

    Clusters are ordered by smallest member index; members ascend.
    """
    hough = [to_hough(s) for s in segs]
    uf = _UnionFind(len(segs))
    for i in range(len(segs)):
        for j in range(i + 1, len(segs)):
            if hough_close(hough[i], hough[j], rho_rel, theta_tol, rho_floor):
                uf.union(i, j)
    groups: dict[int, list[int]] = {}
    for i in range(len(segs)):
        groups.setdefault(uf.find(i), []).append(i)
    return [groups[root] for root in sorted(groups)]


def fit_segment(points: np.ndarray) -> Segment2D:
    """Orthogonal least-squares line through points (N x 2), spanning extremes.

    The direction sign is canonicalized so output does not depend on point
    order.
    """
    pts = np.asarray(points, dtype=float)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    d = vt[0]
    if d[0] < 0.0 or (d[0] == 0.0 and d[1] < 0.0):
        d = -d
    t = centered @ d
    p1 = centroid + t.min() * d
    p2 = centroid + t.max() * d
    return Segment2D(x1=p1[0], y1=p1[1], x2=p2[0], y2=p2[1])


def merge_segments(segs: list[Segment2D], rho_rel: float = RHO_REL,
                   theta_tol: float = THETA_TOL,
                   rho_floor: float = RHO_FLOOR) -> list[Segment2D]:
    """Merge clustered segments into single refit spans; singletons pass through.

    Output is ordered by (theta, rho) of each output segment's own Hough point,
    with endpoint coordinates as the final tiebreak.
    """
    merged, _ = merge_segments_with_clusters(segs, rho_rel, theta_tol, rho_floor)
    return merged


def merge_segments_with_clusters(
        segs: list[Segment2D], rho_rel: float = RHO_REL,
        theta_tol: float = THETA_TOL, rho_floor: float = RHO_FLOOR,
) -> tuple[list[Segment2D], list[list[int]]]:
    """merge_segments plus the input-index cluster behind each output segment."""
    clusters = cluster_segments(segs, rho_rel, theta_tol, rho_floor)
    out: list[tuple[HoughLine, Segment2D, list[int]]] = []
    for members in clusters:
        if len(members) == 1:
            seg = segs[members[0]]
        else:
            pts = []
            for i in members:
                s = segs[i]
                pts.extend(((s.x1, s.y1), (s.x2, s.y2)))
            seg = fit_segment(np.asarray(pts, dtype=float))
        out.append((to_hough(seg), seg, members))
    out.sort(key=lambda item: (item[0].theta, item[0].rho,
                               item[1].x1, item[1].y1, item[1].x2, item[1].y2))
    return [seg for _, seg, _ in out], [members for _, _, members in out]


def to_center_origin(seg: Segment2D, width: float, height: float) -> Segment2D:
    """Corner-origin pixels to centre-origin."""
    return Segment2D(seg.x1 - 0.5 * width, seg.y1 - 0.5 * height,
                     seg.x2 - 0.5 * width, seg.y2 - 0.5 * height)


def to_corner_origin(seg: Segment2D, width: float, height: float) -> Segment2D:
    return Segment2D(seg.x1 + 0.5 * width, seg.y1 + 0.5 * height,
                     seg.x2 + 0.5 * width, seg.y2 + 0.5 * height)


def load_segments(path) -> list[Segment2D]:
    """Read `x1 y1 x2 y2` lines in centre-origin pixels; '#' comments."""
    segs = []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(path, line_no, f"expected 4 fields, got {len(parts)}")
            try:
                x1, y1, x2, y2 = (float(v) for v in parts)
            except ValueError as exc:
                raise FormatError(path, line_no, str(exc)) from None
            try:
                segs.append(Segment2D(x1, y1, x2, y2))
            except ValueError as exc:
                raise FormatError(path, line_no, str(exc)) from None
    return segs


def save_segments(path, segs: list[Segment2D]) -> None:
    with open(path, "w") as fh:
        fh.write("# x1 y1 x2 y2 (centre-origin pixels)\n")
        for s in segs:
            fh.write(f"{s.x1:.17g} {s.y1:.17g} {s.x2:.17g} {s.y2:.17g}\n")
