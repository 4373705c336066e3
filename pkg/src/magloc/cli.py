"""Command-line entry points: map building, single trials and the benchmark."""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

from .bench import (TrialSettings, TrialSpec, BenchmarkReport, build_gridmap, build_magmap, run_bench,
                    run_trial, trial_seed, write_bench_outputs)
from .geometry import Pose2
from .grid_map import load_grid, save_grid
from .mag_map import load_grid_map, save_grid_map
from .world_sim import (default_routes, default_waypoints, default_world, interference_dipole, load_routes,
                        load_waypoints, load_world, save_routes, save_waypoints, save_world)


class CliError(Exception):
    pass


def _world(args):
    return load_world(_need(args, "world"))


def _need(args, name):
    value = getattr(args, name)
    if value is None:
        raise CliError(f"--{name} is required for {args.command}")
    return value


def _check_routes(plan, routes):
    for r, route in enumerate(routes):
        for i, p in enumerate(route):
            if not plan.is_free(p):
                raise CliError(f"route {r}: point {i} {tuple(p)} is outside free space")


def cmd_make_world(args) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    plan, config = default_world(args.seed if args.seed is not None else 7)
    save_world(out / "world.txt", plan, config)
    save_routes(out / "routes.txt", default_routes(plan))
    save_waypoints(out / "waypoints.txt", default_waypoints())
    print(f"wrote world.txt, routes.txt and waypoints.txt to {out}")
    return 0


def cmd_build_magmap(args) -> int:
    plan, config = _world(args)
    routes = load_routes(_need(args, "routes"))
    _check_routes(plan, routes)
    magmap, db = build_magmap(plan, config, routes, seed=args.seed)
    out = Path(_need(args, "out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grid_map(out, magmap)
    print(f"{len(db)} fingerprints, {int(magmap.observed.sum())} observed nodes, "
          f"{int(magmap.present.sum())}/{magmap.nx * magmap.ny} nodes filled "
          f"(coverage {magmap.coverage():.1%}) -> {out}")
    return 0


def cmd_build_gridmap(args) -> int:
    plan, config = _world(args)
    routes = load_routes(_need(args, "routes"))
    _check_routes(plan, routes)
    grid = build_gridmap(plan, config, routes, seed=args.seed)
    out = Path(_need(args, "out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    pgm, meta, _ = save_grid(out, grid)
    xmin, ymin, xmax, ymax = grid.bounds()
    print(f"{grid.nx}x{grid.ny} cells at {grid.resolution} m, extent "
          f"({xmin:.2f}, {ymin:.2f})-({xmax:.2f}, {ymax:.2f}) -> {pgm}, {meta}")
    return 0


def _load_maps(args, plan):
    magmap = load_grid_map(_need(args, "magmap"))
    grid = load_grid(_need(args, "gridmap"))
    gx0, gy0, gx1, gy1 = grid.bounds()
    px0, py0, px1, py1 = plan.bounds
    if gx0 > px0 + 1e-6 or gy0 > py0 + 1e-6 or gx1 < px1 - 1e-6 or gy1 < py1 - 1e-6:
        raise CliError("occupancy grid does not cover the world bounds; maps and world do not match")
    if not magmap.present.any():
        raise CliError("magnetic map has no filled nodes")
    return magmap, grid


def _with_interference(config, waypoints, wp_id):
    if wp_id is None:
        return config
    poses = dict(waypoints)
    if wp_id not in poses:
        raise CliError(f"--interference: no waypoint {wp_id}")
    return config.with_dipole(interference_dipole(poses[wp_id]))


def cmd_localize(args) -> int:
    plan, config = _world(args)
    magmap, grid = _load_maps(args, plan)
    start = Pose2(*_need(args, "start"))
    if not plan.is_free(start.xy):
        raise CliError(f"start {start.xy} is outside free space")
    seed = args.seed if args.seed is not None else 0
    spec = TrialSpec(0, start, args.option, trial_seed(seed, 0, args.option, 0))
    result, outcome, init = run_trial(spec, plan, config, magmap, grid, TrialSettings(), keep_outcome=True)
    if args.verbose:
        if init.has_location:
            head = f"{init.heading:.4f}" if init.has_heading else "unknown (0)"
            print(f"initial pose: ({init.location[0]:.3f}, {init.location[1]:.3f}) heading {head}")
            for h, d in init.diagnostics.get("heading_scores", {}).items():
                print(f"  heading {h:+.4f}: mean neighbour distance {d:.3f} uT")
        else:
            print("initial pose: none (multi-start)")
    if result.declared:
        p = outcome.pose
        verdict = "success" if result.success else "false positive"
        print(f"declared after {result.time_s:.2f} s at ({p.x:.3f}, {p.y:.3f}, {p.heading:.4f}): {verdict}, "
              f"error {result.translation_error:.3f} m / {abs(result.heading_error):.4f} rad, score {outcome.score:.3f}")
    else:
        print(f"F: not localized after {outcome.scans_used} scans (best score {outcome.score:.3f})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "trace.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s", "track", "x", "y", "heading", "score"])
            w.writerows(outcome.trace)
    return 0


def cmd_bench(args) -> int:
    plan, config = _world(args)
    magmap, grid = _load_maps(args, plan)
    waypoints = load_waypoints(_need(args, "waypoints"))
    if not waypoints:
        raise CliError("waypoint file lists no waypoints")
    for wp_id, pose in waypoints:
        if not plan.is_free(pose.xy):
            raise CliError(f"waypoint {wp_id} is outside free space")
    config = _with_interference(config, waypoints, args.interference)
    options = (args.option,) if args.option else (1, 2, 3)
    progress = None
    if args.verbose:
        def progress(r):
            s = r.spec
            print(f"wp {s.waypoint_id} opt {s.option} trial {s.trial}: "
                  f"{'success' if r.success else 'declared' if r.declared else 'F'}", file=sys.stderr)
    t0 = time.perf_counter()
    results = run_bench(plan, config, magmap, grid, waypoints, args.trials,
                        args.seed if args.seed is not None else 0, options=options,
                        workers=args.workers, progress=progress)
    csv_path, report_path = write_bench_outputs(_need(args, "out"), results)
    print(BenchmarkReport.from_results(results).text(), end="")
    print(f"\n{len(results)} trials in {time.perf_counter() - t0:.1f} s -> {csv_path}, {report_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magloc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--world", help="world description file")
        sp.add_argument("--seed", type=int, help="base random seed")
        sp.add_argument("--out", help="output file or directory")
        sp.add_argument("--verbose", action="store_true")
        return sp

    mw = common(sub.add_parser("make-world", help="write the default world, routes and waypoints"))
    mw.set_defaults(func=cmd_make_world)
    for name, func, what in (("build-magmap", cmd_build_magmap, "magnetic grid map"),
                             ("build-gridmap", cmd_build_gridmap, "occupancy grid (PGM + metadata)")):
        sp = common(sub.add_parser(name, help=f"drive the routes and save a {what}"))
        sp.add_argument("--routes", help="routes file")
        sp.set_defaults(func=func)

    for name, func in (("localize", cmd_localize), ("bench", cmd_bench)):
        sp = common(sub.add_parser(name))
        sp.add_argument("--magmap", help="magnetic grid map file")
        sp.add_argument("--gridmap", help="occupancy grid (.pgm or .meta path)")
        sp.add_argument("--option", type=int, choices=(1, 2, 3))
        sp.set_defaults(func=func)
    loc = sub.choices["localize"]
    loc.help = "run one localization trial"
    loc.add_argument("--start", type=float, nargs=3, metavar=("X", "Y", "HEADING"))
    loc.set_defaults(option=1)
    bench = sub.choices["bench"]
    bench.add_argument("--waypoints", help="waypoints file")
    bench.add_argument("--trials", type=int, default=10)
    bench.add_argument("--workers", type=int, default=1)
    bench.add_argument("--interference", type=int, metavar="WP",
                       help="add a strong dipole next to this waypoint during the trials")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"magloc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
