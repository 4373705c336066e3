"""Map building from the simulator and the waypoint x option x trial benchmark."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .coarse_loc import CoarseConfig, InitialPose, coarse_pose
from .geometry import Pose2, pose_error
from .grid_map import OccupancyGrid, build_global_map
from .mag_map import FingerprintDatabase, MagGridMap, build_database, build_grid_map
from .scan_match import LocalizationOutcome, MatcherConfig, localize
from .world_sim import (FloorPlan, WorldConfig, drive_route, loop_route, raycast_scan,
                        sample_magnetometer)

OPTIONS = (1, 2, 3)
CSV_HEADER = ["waypoint", "option", "trial", "seed", "declared", "success", "false_positive",
              "time_s", "err_xy_m", "err_theta_rad"]


@dataclass(frozen=True)
class TrialSpec:
    waypoint_id: int
    start_pose: Pose2
    option: int
    seed: int
    trial: int = 0

    def __post_init__(self):
        if self.option not in OPTIONS:
            raise ValueError(f"option must be one of {OPTIONS}, got {self.option}")


@dataclass
class TrialResult:
    spec: TrialSpec
    declared: bool
    success: bool
    time_s: float | None = None
    translation_error: float | None = None
    heading_error: float | None = None

    @property
    def false_positive(self) -> bool:
        return self.declared and not self.success


@dataclass
class TrialSettings:
    speed: float = 0.3
    scan_period: float = 0.1
    duration: float = 10.0
    mag_samples: int = 16  # stationary readings averaged before the robot moves
    success_radius: float = 0.15  # 3 map cells at 0.05 m
    coarse: CoarseConfig = field(default_factory=CoarseConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)


def trial_seed(base_seed: int, waypoint_id: int, option: int, trial: int) -> int:
    """Per-trial seed that depends only on its own coordinates."""
    ss = np.random.SeedSequence([base_seed, waypoint_id, option, trial])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def compute_rmse(errors) -> float:
    e = np.asarray(list(errors), dtype=float)
    if not len(e):
        raise ValueError("RMSE of an empty error list")
    return float(np.sqrt(np.mean(e * e)))


# ---------------------------------------------------------------------------
# offline phase


def collect_fingerprints(plan: FloorPlan, config: WorldConfig, routes, speed: float = 0.5,
                         sample_dt: float = 0.05, seed: int | None = None) -> FingerprintDatabase:
    rng = np.random.default_rng([config.seed if seed is None else seed, 11])
    states, readings = [], []
    for route in routes:
        for st in drive_route(plan, route, speed, sample_dt):
            states.append(st)
            readings.append(sample_magnetometer(config, st.pose, rng))
    return build_database(states, readings)


def build_magmap(plan: FloorPlan, config: WorldConfig, routes, resolution: float = 0.1,
                 seed: int | None = None) -> tuple[MagGridMap, FingerprintDatabase]:
    db = collect_fingerprints(plan, config, routes, seed=seed)
    return build_grid_map(db, resolution, origin=(plan.bounds[0], plan.bounds[1])), db


def build_gridmap(plan: FloorPlan, config: WorldConfig, routes, resolution: float = 0.05,
                  scan_spacing: float = 0.5, seed: int | None = None) -> OccupancyGrid:
    """Occupancy grid from scans taken every ``scan_spacing`` meters along the routes.

    Free-space rays stop two cells short of each hit.
    """
    rng = np.random.default_rng([config.seed if seed is None else seed, 12])
    scans, poses = [], []
    for route in routes:
        for st in drive_route(plan, route, 1.0, scan_spacing):
            scans.append(raycast_scan(plan, st.pose, config, rng))
            poses.append(st.pose)
    return build_global_map(scans, poses, resolution, bounds=plan.bounds, anchor=plan.origin,
                            miss_margin=2 * resolution)


# ---------------------------------------------------------------------------
# online phase


def initial_pose_for(option: int, magmap: MagGridMap, reading, coarse: CoarseConfig) -> InitialPose:
    if option == 3:
        return InitialPose()
    est = coarse_pose(None, magmap, reading, coarse)
    if option == 1:
        return est
    return InitialPose(est.location, 0.0, True, False, est.diagnostics)


def scan_stream(plan: FloorPlan, config: WorldConfig, start: Pose2, settings: TrialSettings,
                rng: np.random.Generator):
    """Lazy (time, scan, truth) triples as the robot drives the loop from ``start``."""
    waypoints = loop_route(plan, start, settings.speed * settings.duration)
    for st in drive_route(plan, waypoints, settings.speed, settings.scan_period):
        yield st.time, raycast_scan(plan, st.pose, config, rng), st.pose


def run_trial(spec: TrialSpec, plan: FloorPlan, config: WorldConfig, magmap: MagGridMap,
              grid: OccupancyGrid, settings: TrialSettings = TrialSettings(),
              keep_outcome: bool = False):
    """One localization attempt; ``config`` is the world as it is during the trial.

    Magnetometer and lidar draw from separate streams so that changing the
    magnetic world never changes the scans.
    """
    mag_rng = np.random.default_rng([spec.seed, 1])
    lidar_rng = np.random.default_rng([spec.seed, 2])
    reading = np.mean([sample_magnetometer(config, spec.start_pose, mag_rng)
                       for _ in range(settings.mag_samples)], axis=0)
    init = initial_pose_for(spec.option, magmap, reading, settings.coarse)

    truths = {}

    def stream():
        for t, scan, truth in scan_stream(plan, config, spec.start_pose, settings, lidar_rng):
            truths[t] = truth
            yield t, scan

    outcome = localize(grid, stream(), init, settings.matcher)
    result = TrialResult(spec, outcome.declared, False)
    if outcome.declared:
        truth = truths[outcome.time_s + min(truths)]
        dxy, dth = pose_error(outcome.pose, truth)
        result.time_s = outcome.time_s
        result.translation_error = dxy
        result.heading_error = dth
        result.success = dxy <= settings.success_radius
    if keep_outcome:
        return result, outcome, init
    return result


def trial_specs(waypoints, trials: int, base_seed: int, options=OPTIONS) -> list[TrialSpec]:
    specs = []
    for wp_id, pose in waypoints:
        for option in options:
            for k in range(trials):
                specs.append(TrialSpec(wp_id, pose, option, trial_seed(base_seed, wp_id, option, k), k))
    return specs


def run_bench(plan: FloorPlan, config: WorldConfig, magmap: MagGridMap, grid: OccupancyGrid,
              waypoints, trials: int = 10, base_seed: int = 0, settings: TrialSettings = TrialSettings(),
              options=OPTIONS, workers: int = 1, progress=None) -> list[TrialResult]:
    """All trials, returned in (waypoint, option, trial) order regardless of ``workers``."""
    specs = trial_specs(waypoints, trials, base_seed, options)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(run_trial, s, plan, config, magmap, grid, settings) for s in specs]
            results = [f.result() for f in futures]
    else:
        results = []
        for s in specs:
            results.append(run_trial(s, plan, config, magmap, grid, settings))
            if progress:
                progress(results[-1])
    return results


# ---------------------------------------------------------------------------
# reporting


def _fmt(v):
    return "" if v is None else repr(float(v))


def results_csv(results: Iterable[TrialResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in results:
        s = r.spec
        w.writerow([s.waypoint_id, s.option, s.trial, s.seed, int(r.declared), int(r.success),
                    int(r.false_positive), _fmt(r.time_s), _fmt(r.translation_error),
                    _fmt(None if r.heading_error is None else abs(r.heading_error))])
    return buf.getvalue()


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class OptionStats:
    trials: int = 0
    successes: int = 0
    false_positives: int = 0
    times: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    @property
    def mean_time(self) -> float | None:
        return float(np.mean(self.times)) if self.times else None

    @property
    def rmse(self) -> float | None:
        return compute_rmse(self.errors) if self.errors else None

    def add(self, r: TrialResult):
        self.trials += 1
        self.false_positives += r.false_positive
        if r.success:
            self.successes += 1
            self.times.append(r.time_s)
            self.errors.append(r.translation_error)


@dataclass
class BenchmarkReport:
    per_waypoint: dict  # (waypoint, option) -> OptionStats
    per_option: dict  # option -> OptionStats

    @classmethod
    def from_results(cls, results: Iterable[TrialResult]) -> "BenchmarkReport":
        per_wp, per_opt = {}, {}
        for r in results:
            key = (r.spec.waypoint_id, r.spec.option)
            per_wp.setdefault(key, OptionStats()).add(r)
            per_opt.setdefault(r.spec.option, OptionStats()).add(r)
        return cls(per_wp, per_opt)

    def success_rate(self, option: int, waypoint: int | None = None) -> float:
        stats = self.per_option if waypoint is None else self.per_waypoint
        key = option if waypoint is None else (waypoint, option)
        return stats[key].success_rate if key in stats else 0.0

    def text(self) -> str:
        lines = ["Localization benchmark (times in simulated seconds, F = no correct localization)", ""]
        head = f"{'WP':>3} {'Opt':>3} {'Success':>8} {'Fastest':>8} {'Slowest':>8} {'Average':>8} {'RMSE(m)':>8} {'FalsePos':>8}"
        lines += [head, "-" * len(head)]
        for (wp, opt), st in sorted(self.per_waypoint.items()):
            if st.successes:
                t = st.times
                cols = [f"{min(t):8.2f}", f"{max(t):8.2f}", f"{np.mean(t):8.2f}", f"{st.rmse:8.3f}"]
            else:
                cols = [f"{'F':>8}"] * 4
            lines.append(f"{wp:>3} {opt:>3} {st.successes:>3}/{st.trials:<4} " + " ".join(cols)
                         + f" {st.false_positives:>8}")
        lines += ["", "Overall"]
        for opt, st in sorted(self.per_option.items()):
            mt = "F" if st.mean_time is None else f"{st.mean_time:.2f} s"
            rm = "F" if st.rmse is None else f"{st.rmse:.3f} m"
            lines.append(f"  option {opt}: success {st.success_rate:.0%} ({st.successes}/{st.trials}), "
                         f"mean time {mt}, RMSE {rm}, false positives {st.false_positives}")
        return "\n".join(lines) + "\n"


def write_bench_outputs(out_dir, results) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, report_path = out / "results.csv", out / "report.txt"
    csv_path.write_text(results_csv(results))
    report_path.write_text(BenchmarkReport.from_results(results).text())
    return csv_path, report_path
