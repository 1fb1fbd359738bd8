"""Grid-based spatial suppression of scored keypoints.

The image is partitioned into square cells whose side comes from a closed-form
quadratic in the image size and the target point count. Each cell keeps at most
`quota` points (2 by default), and a kept point suppresses every weaker point
strictly within Chebyshev distance r = c/8 of it, regardless of cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import FormatError, InvalidTarget

#: Target-count tolerance: deviation beyond this re-runs selection with a
#: larger per-cell quota.
DEFAULT_TOLERANCE = 1e-3

#: Pyramid defaults used by octave-aware selection.
PYRAMID_LEVELS = 8
PYRAMID_RATIO = 1.2


@dataclass(frozen=True)
class ScoredKeypoint:
    x: float
    y: float
    response: float
    octave: int = 0


@dataclass(frozen=True)
class GridSpec:
    """Cell side c, suppression radius r, and the point-grid shape (n cols, m rows)."""

    c: float
    r: float
    n: int
    m: int
    W: int
    H: int
    N: int


def cell_side_formula(W: float, H: float, N: int) -> float:
    """Positive root of the closed-form cell-side quadratic, unclamped.

    May come out below 64 (or even negative for very small N); callers clamp.
    """
    if N < 2:
        raise InvalidTarget(f"target point count {N} < 2")
    delta = 16.0 * (N - 1) * (W + H + H * W - N + 1)
    s = W + 2.0 * H + 2.0 * N + 2.0
    return (-2.0 * s + math.sqrt(s * s + delta)) / (2.0 * (N - 1))


def cell_side_bisection(W: float, H: float, N: int, tol: float = 1e-9) -> float:
    """Cell side solving m(c) * n(c) = N with the continuous grid relations.

    Independent route used by the discrepancy report: the closed-form quadratic
    above does not reproduce this root exactly.
    """
    if N < 2:
        raise InvalidTarget(f"target point count {N} < 2")

    def count(c: float) -> float:
        u = 0.5 * c + 1.0
        return ((W - c) / u + 1.0) * ((H - c) / u + 1.0)

    lo, hi = 1e-6, float(min(W, H))
    if count(lo) < N:
        return lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if count(mid) > N:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def compute_grid_spec(W: int, H: int, N: int) -> GridSpec:
    """Grid layout for an image of W x H pixels targeting N selected points.

    The cell side is floored at 64 px and the point-grid shape (n, m) follows
    by rounding the grid relations to the nearest integer, floored at 1.
    """
    if W < 64 or H < 64:
        raise ValueError(f"image {W}x{H} smaller than the 64 px minimum cell")
    c = max(cell_side_formula(W, H, N), 64.0)
    u = 0.5 * c + 1.0
    n = max(1, round((W - c) / u + 1.0))
    m = max(1, round((H - c) / u + 1.0))
    return GridSpec(c=c, r=c / 8.0, n=n, m=m, W=int(W), H=int(H), N=int(N))


def suppression_radius(c: float) -> float:
    """Radius of the square suppression window: one 8x8-lattice node side."""
    if c < 64:
        raise ValueError(f"cell side {c} below the 64 px floor")
    return c / 8.0


def _sorted_order(points: list[ScoredKeypoint]) -> list[int]:
    # response descending; ties broken by (y, x, input index) for determinism
    return sorted(range(len(points)),
                  key=lambda i: (-points[i].response, points[i].y, points[i].x, i))


def suppress(points: list[ScoredKeypoint], spec: GridSpec,
             quota: int = 2) -> list[ScoredKeypoint]:
    """Keep at most `quota` points per cell, strongest first, with radius NMS.

    A candidate is rejected if any already-kept point lies strictly within
    Chebyshev distance r, or if its cell already holds `quota` points. Output
    is sorted by descending response (ties by y, x, input index).
    """
    c, r = spec.c, spec.r
    cell_members: dict[tuple[int, int], list[tuple[float, float]]] = {}
    cell_counts: dict[tuple[int, int], int] = {}
    kept: list[ScoredKeypoint] = []
    for i in _sorted_order(points):
        p = points[i]
        cell = (int(p.x // c), int(p.y // c))
        if cell_counts.get(cell, 0) >= quota:
            continue
        # r <= c/8, so any point within r lives in this cell or a neighbour
        blocked = False
        for nx in (cell[0] - 1, cell[0], cell[0] + 1):
            for ny in (cell[1] - 1, cell[1], cell[1] + 1):
                for qx, qy in cell_members.get((nx, ny), ()):
                    if max(abs(qx - p.x), abs(qy - p.y)) < r:
                        blocked = True
                        break
                if blocked:
                    break
            if blocked:
                break
        if blocked:
            continue
        cell_members.setdefault(cell, []).append((p.x, p.y))
        cell_counts[cell] = cell_counts.get(cell, 0) + 1
        kept.append(p)
    return kept


def select_keypoints(points: list[ScoredKeypoint], W: int, H: int, N: int,
                     tol: float = DEFAULT_TOLERANCE,
                     max_quota: int = 64) -> list[ScoredKeypoint]:
    """Suppression with the target-count tolerance rule.

    If the selected count undershoots N by more than tol (relative), selection
    is re-run with the per-cell quota raised by 1, up to max_quota or until the
    count stops growing. Overshoot is left as-is: lowering the quota below 2 is
    not part of the scheme.
    """
    spec = compute_grid_spec(W, H, N)
    quota = 2
    kept = suppress(points, spec, quota=quota)
    while (len(kept) < N * (1.0 - tol)) and quota < max_quota:
        quota += 1
        rerun = suppress(points, spec, quota=quota)
        if len(rerun) == len(kept):
            break
        kept = rerun
    return kept


def pyramid_level_sizes(W: int, H: int, levels: int = PYRAMID_LEVELS,
                        ratio: float = PYRAMID_RATIO) -> list[tuple[int, int]]:
    return [(max(64, round(W / ratio ** i)), max(64, round(H / ratio ** i)))
            for i in range(levels)]


def split_target_by_area(N: int, sizes: list[tuple[int, int]]) -> list[int]:
    """Per-level target counts proportional to level area, summing to >= len * 2."""
    areas = [w * h for w, h in sizes]
    total = float(sum(areas))
    raw = [N * a / total for a in areas]
    shares = [max(2, int(math.floor(x))) for x in raw]
    # hand remaining points to the largest fractional parts, biggest levels first
    remainders = sorted(range(len(raw)), key=lambda i: (raw[i] - math.floor(raw[i]), areas[i]),
                        reverse=True)
    short = N - sum(shares)
    for i in remainders:
        if short <= 0:
            break
        shares[i] += 1
        short -= 1
    return shares


def suppress_pyramid(points: list[ScoredKeypoint], W: int, H: int, N: int,
                     levels: int = PYRAMID_LEVELS, ratio: float = PYRAMID_RATIO,
                     tol: float = DEFAULT_TOLERANCE) -> list[ScoredKeypoint]:
    """Run selection independently per octave with area-proportional targets.

    Keypoint coordinates are expected in their own level's pixel frame.
    """
    sizes = pyramid_level_sizes(W, H, levels, ratio)
    shares = split_target_by_area(N, sizes)
    out: list[ScoredKeypoint] = []
    for lvl, ((lw, lh), share) in enumerate(zip(sizes, shares)):
        level_pts = [p for p in points if p.octave == lvl]
        if level_pts:
            out.extend(select_keypoints(level_pts, lw, lh, share, tol=tol))
    order = sorted(range(len(out)), key=lambda i: (-out[i].response, out[i].y, out[i].x, i))
    return [out[i] for i in order]


def load_keypoints(path) -> list[ScoredKeypoint]:
    """Read `x y response octave` lines; '#' starts a comment."""
    points = []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(path, line_no, f"expected 4 fields, got {len(parts)}")
            try:
                x, y, response = float(parts[0]), float(parts[1]), float(parts[2])
                octave = int(parts[3])
            except ValueError as exc:
                raise FormatError(path, line_no, str(exc)) from None
            if octave < 0:
                raise FormatError(path, line_no, f"octave {octave} < 0")
            points.append(ScoredKeypoint(x=x, y=y, response=response, octave=octave))
    return points


def save_keypoints(path, points: list[ScoredKeypoint]) -> None:
    with open(path, "w") as fh:
        fh.write("# x y response octave\n")
        for p in points:
            fh.write(f"{p.x:.17g} {p.y:.17g} {p.response:.17g} {p.octave}\n")
