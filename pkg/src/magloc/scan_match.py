"""Scan-to-map pose optimization and the localization loop built on it.

The residual of each scan endpoint is ``1 - M_smooth(T(pose) s_j)``; the pose
minimizing the summed squares is found by damped Gauss-Newton, run
coarse-to-fine over max-pooled copies of the grid so that starts a few
decimeters off still fall into the basin of the finest level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coarse_loc import CARDINAL_HEADINGS, InitialPose
from .geometry import Pose2, pose_error, transform_point, transform_points, wrap_angle
from .grid_map import LaserScan, OccupancyGrid, m_smooth, scan_endpoints

__all__ = [
    "Pose2", "MatchResult", "MatcherConfig", "LocalizationOutcome", "transform_point", "pose_error",
    "match_cost", "optimize_pose", "localize", "multistart_seeds",
]


@dataclass(frozen=True)
class MatcherConfig:
    max_iterations: int = 40
    translation_tolerance: float = 1e-4
    rotation_tolerance: float = 1e-4
    success_score: float = 0.85
    grid_search_step: tuple[float, float] = (1.0, math.pi / 2)
    pyramid_levels: int = 4
    max_halvings: int = 8
    confirm_scans: int = 3
    seeds_per_scan: int = 48
    max_tracks: int = 6
    free_threshold: float = 0.3

    def __post_init__(self):
        if not (self.translation_tolerance > 0 and self.rotation_tolerance > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.success_score < 1:
            raise ValueError("success_score must lie in (0, 1)")
        if self.max_iterations < 1 or self.pyramid_levels < 1:
            raise ValueError("need at least one iteration and one pyramid level")


@dataclass
class MatchResult:
    pose: Pose2
    score: float
    iterations: int
    converged: bool
    cost: float = math.nan
    initial_cost: float = math.nan
    diagnostic: str = ""
    trace: list = field(default_factory=list, repr=False)  # (level, iteration, x, y, heading, cost)


def _points(scan) -> np.ndarray:
    if isinstance(scan, LaserScan):
        return scan_endpoints(scan)
    return np.asarray(scan, dtype=float).reshape(-1, 2)


def _residuals(grid: OccupancyGrid, pts: np.ndarray, pose: Pose2, jacobian: bool):
    world = transform_points(pose, pts)
    if not jacobian:
        return 1.0 - m_smooth(grid, world), None
    m, g = m_smooth(grid, world, with_gradient=True)
    # d(world)/d(heading) = R'(heading) s = (-(wy - y), wx - x)
    dpsi = g[:, 0] * -(world[:, 1] - pose.y) + g[:, 1] * (world[:, 0] - pose.x)
    jac = -np.column_stack([g[:, 0], g[:, 1], dpsi])
    return 1.0 - m, jac


def match_cost(grid: OccupancyGrid, scan, pose: Pose2):
    """Summed squared residuals and their gradient with respect to (x, y, heading)."""
    pts = _points(scan)
    if not len(pts):
        raise ValueError("scan has no returning beams")
    r, jac = _residuals(grid, pts, pose, True)
    return float(r @ r), 2.0 * jac.T @ r


def _step(pose: Pose2, delta) -> Pose2:
    return Pose2(pose.x + delta[0], pose.y + delta[1], pose.heading + delta[2])


def _level_budgets(total: int, levels: int) -> list[int]:
    base, extra = divmod(total, levels)
    return [base + (1 if k < extra else 0) for k in range(levels)]


def optimize_pose(grid: OccupancyGrid, scan, initial: Pose2, cfg: MatcherConfig = MatcherConfig()) -> MatchResult:
    """Damped Gauss-Newton on the scan residuals, coarse level first.

    A start that already scores ``success_score`` on the full-resolution grid
    skips the coarse levels. Within a level a step is halved while it would
    raise that level's cost; the returned pose never costs more on the
    full-resolution grid than ``initial`` does.
    """
    pts = _points(scan)
    if not len(pts):
        raise ValueError("scan has no returning beams")
    r0, _ = _residuals(grid, pts, initial, False)
    initial_cost = float(r0 @ r0)
    levels = grid.pyramid(cfg.pyramid_levels)[::-1]
    if float(np.mean(1.0 - r0)) >= cfg.success_score:
        levels = levels[-1:]
    budgets = _level_budgets(cfg.max_iterations, len(levels))
    # the finest level takes any remainder
    budgets = budgets[::-1]

    pose = initial
    trace = []
    total_iters = 0
    converged = False
    diagnostic = ""
    for lvl_index, (level, budget) in enumerate(zip(levels, budgets)):
        finest = lvl_index == len(levels) - 1
        lvl = len(levels) - 1 - lvl_index
        r, jac = _residuals(level, pts, pose, True)
        cost = float(r @ r)
        trace.append((lvl, 0, pose.x, pose.y, pose.heading, cost))
        # coarse levels only have to land inside the next level's basin
        tol_t = cfg.translation_tolerance if finest else max(cfg.translation_tolerance, 0.1 * level.resolution)
        tol_r = cfg.rotation_tolerance if finest else max(cfg.rotation_tolerance, 0.1 * level.resolution)
        level_converged = False
        for it in range(1, budget + 1):
            h = jac.T @ jac
            b = jac.T @ r
            try:
                if not np.all(np.isfinite(h)) or np.linalg.cond(h) > 1e12:
                    raise np.linalg.LinAlgError
                delta = -np.linalg.solve(h, b)
            except np.linalg.LinAlgError:
                diagnostic = f"singular normal equations at level {lvl}"
                break
            accepted = None
            for _ in range(cfg.max_halvings + 1):
                cand = _step(pose, delta)
                rc, _ = _residuals(level, pts, cand, False)
                cc = float(rc @ rc)
                if cc <= cost:
                    accepted = (cand, cc)
                    break
                delta = delta / 2.0
            total_iters += 1
            if accepted is None:
                level_converged = True
                break
            pose, cost = accepted
            r, jac = _residuals(level, pts, pose, True)
            trace.append((lvl, it, pose.x, pose.y, pose.heading, cost))
            if math.hypot(delta[0], delta[1]) < tol_t and abs(delta[2]) < tol_r:
                level_converged = True
                break
        if finest:
            converged = level_converged

    rf, _ = _residuals(grid, pts, pose, False)
    final_cost = float(rf @ rf)
    if final_cost > initial_cost:
        pose, final_cost, rf = initial, initial_cost, r0
        converged = False
        diagnostic = diagnostic or "coarse levels led away; kept initial pose"
    score = float(np.mean(1.0 - rf))
    return MatchResult(pose, score, total_iters, converged, final_cost, initial_cost, diagnostic, trace)


def multistart_seeds(grid: OccupancyGrid, cfg: MatcherConfig = MatcherConfig()) -> list[Pose2]:
    """Lattice of poses over the free part of the map, in raster order."""
    step, dpsi = cfg.grid_search_step
    xmin, ymin, xmax, ymax = grid.bounds()
    xs = np.arange(math.floor(xmin / step) * step + step / 2, xmax, step)
    ys = np.arange(math.floor(ymin / step) * step + step / 2, ymax, step)
    n_head = max(1, int(round(2 * math.pi / dpsi)))
    headings = [wrap_angle(k * dpsi) for k in range(n_head)]
    seeds = []
    for y in ys:
        for x in xs:
            if m_smooth(grid, np.array([x, y])) < cfg.free_threshold:
                seeds += [Pose2(float(x), float(y), h) for h in headings]
    return seeds


@dataclass
class _Track:
    ident: int
    pose: Pose2
    score: float = 0.0


@dataclass
class LocalizationOutcome:
    declared: bool
    pose: Pose2 | None
    time_s: float | None
    score: float
    scans_used: int
    trace: list = field(default_factory=list, repr=False)  # (time, track, x, y, heading, score)


def _initial_hypotheses(grid, init: InitialPose, cfg) -> tuple[list[Pose2], list[Pose2]]:
    """(tracked from the start, seeds queued for the budgeted sweep)."""
    if init.has_location:
        heading = init.heading if init.has_heading else 0.0
        return [Pose2(init.location[0], init.location[1], heading)], []
    return [], multistart_seeds(grid, cfg)


def localize(grid: OccupancyGrid, scan_stream, init: InitialPose,
             cfg: MatcherConfig = MatcherConfig()) -> LocalizationOutcome:
    """Track pose hypotheses over a stream of ``(time, scan)`` pairs.

    A known location (with or without heading; a missing heading is taken as
    zero) gives a single track. Without any prior, a lattice of seeds is
    swept at ``seeds_per_scan`` per scan, each seed refined once and kept if
    it ranks among the ``max_tracks`` best. Localization is declared when the
    same track is the best one and scores at least ``success_score`` for
    ``confirm_scans`` consecutive scans.
    """
    tracked, queue = _initial_hypotheses(grid, init, cfg)
    tracks = [_Track(i, p) for i, p in enumerate(tracked)]
    next_id = len(tracks)
    queue_pos = 0
    streak, streak_id = 0, None
    trace = []
    t0 = None
    best = None
    n = 0
    for n, (t, scan) in enumerate(scan_stream, 1):
        if t0 is None:
            t0 = t
        for tr in tracks:
            res = optimize_pose(grid, scan, tr.pose, cfg)
            tr.pose, tr.score = res.pose, res.score
        batch = queue[queue_pos:queue_pos + cfg.seeds_per_scan]
        queue_pos += len(batch)
        for seed in batch:
            res = optimize_pose(grid, scan, seed, cfg)
            tracks.append(_Track(next_id, res.pose, res.score))
            next_id += 1
        tracks = _prune(tracks, cfg.max_tracks)
        if not tracks:
            continue
        best = tracks[0]
        for tr in tracks:
            trace.append((t, tr.ident, tr.pose.x, tr.pose.y, tr.pose.heading, tr.score))
        if best.score >= cfg.success_score:
            streak = streak + 1 if best.ident == streak_id else 1
            streak_id = best.ident
        else:
            streak, streak_id = 0, None
        if streak >= cfg.confirm_scans:
            return LocalizationOutcome(True, best.pose, t - t0, best.score, n, trace)
    return LocalizationOutcome(False, best.pose if best else None, None,
                               best.score if best else 0.0, n, trace)


def _prune(tracks: list[_Track], keep: int, same_xy: float = 0.25, same_heading: float = 0.25) -> list[_Track]:
    """Best-first, dropping tracks that settled on an already kept pose."""
    ordered = sorted(tracks, key=lambda tr: (-tr.score, tr.ident))
    out: list[_Track] = []
    for tr in ordered:
        dup = False
        for kept in out:
            dxy, dth = pose_error(tr.pose, kept.pose)
            if dxy < same_xy and abs(dth) < same_heading:
                dup = True
                break
        if not dup:
            out.append(tr)
        if len(out) >= keep:
            break
    return out
