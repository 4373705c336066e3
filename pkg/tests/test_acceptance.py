"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that pytest prints in its terminal
summary, then asserts. The benchmark criteria share one full run.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from magloc.bench import BenchmarkReport, results_csv, run_bench
from magloc.coarse_loc import CARDINAL_HEADINGS, CoarseConfig, estimate_heading, knn_locate
from magloc.geometry import Pose2, pose_error
from magloc.mag_map import FingerprintDatabase, MagFingerprint, bilinear_interpolate
from magloc.scan_match import match_cost, optimize_pose
from magloc.world_sim import WorldConfig, default_waypoints, interference_dipole, raycast_scan, rotate_z, \
    sample_magnetometer
from test_mag_map import literal_bilinear
from test_scan_match import corner_pose, fd_gradient

INTERFERENCE_WP = 4


def record(n: int, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_1_interpolation_exactness():
    rng = np.random.default_rng(101)
    worst_lit = worst_aff = 0.0
    t0 = time.perf_counter()
    for _ in range(1000):
        x1, y1 = rng.uniform(-50, 50, 2)
        x2, y2 = x1 + rng.uniform(0.01, 2), y1 + rng.uniform(0.01, 2)
        b = rng.normal(0, 40, (4, 3))
        q = (rng.uniform(x1, x2), rng.uniform(y1, y2))
        corners = [MagFingerprint((x1, y1), tuple(b[0])), MagFingerprint((x2, y1), tuple(b[1])),
                   MagFingerprint((x1, y2), tuple(b[2])), MagFingerprint((x2, y2), tuple(b[3]))]
        got = bilinear_interpolate(corners, q)
        ref = literal_bilinear(x1, x2, y1, y2, *b, *q)
        worst_lit = max(worst_lit, np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-300))
        a, c = rng.normal(0, 5, (3, 2)), rng.normal(0, 40, 3)
        f = lambda p: a @ np.asarray(p) + c
        corners = [MagFingerprint(p, tuple(f(p))) for p in ((x1, y1), (x2, y1), (x1, y2), (x2, y2))]
        exact = f(q)
        worst_aff = max(worst_aff, np.max(np.abs(bilinear_interpolate(corners, q) - exact))
                        / max(np.max(np.abs(exact)), 1.0))
    elapsed = time.perf_counter() - t0
    record(1, worst_lit <= 1e-12 and worst_aff <= 1e-9 and elapsed < 1.0,
           f"max rel err {worst_lit:.2e} vs exact oracle, {worst_aff:.2e} on affine fields, {elapsed:.2f} s")


def test_2_knn_matches_linear_scan():
    rng = np.random.default_rng(202)
    fields = rng.normal([0, 40, -10], 10, (10_000, 3))
    db = FingerprintDatabase(rng.uniform(0, 20, (10_000, 2)), fields)
    queries = rng.normal([0, 40, -10], 10, (100, 3))
    rows = [tuple(map(float, f)) for f in fields]
    orders = []
    for q in queries:
        qt = tuple(map(float, q))
        d = [math.dist(r, qt) for r in rows]
        orders.append(sorted(range(len(rows)), key=lambda i: (d[i], i)))
    mismatches = 0
    t0 = time.perf_counter()
    for k in (1, 3, 5):
        for q, order in zip(queries, orders):
            got = knn_locate(db, q, CoarseConfig(k=k)).neighbors
            mismatches += set(got.tolist()) != set(order[:k])
    elapsed = time.perf_counter() - t0
    record(2, mismatches == 0 and elapsed < 10.0,
           f"{300 - mismatches}/300 neighbour sets equal to linear scan (k=1,3,5), {elapsed:.2f} s")


def test_3_heading_round_trip():
    ambient = np.array([0.0, 40.0, -10.0])
    ambient *= 40.0 / np.linalg.norm(ambient)
    exact = 0
    for h in CARDINAL_HEADINGS:
        cfg = WorldConfig(ambient_field=tuple(ambient), mag_noise_sigma=0.0)
        exact += estimate_heading(sample_magnetometer(cfg, Pose2(0, 0, h), np.random.default_rng(0)), ambient) == h
    rng = np.random.default_rng(303)
    hits = 0
    for _ in range(10_000):
        h = CARDINAL_HEADINGS[rng.integers(4)]
        hits += estimate_heading(rotate_z(ambient, -h) + rng.normal(0, 0.5, 3), ambient) == h
    record(3, exact == 4 and hits >= 9_900,
           f"{exact}/4 noise-free headings exact, {hits / 100:.2f}% correct at 0.5 uT noise on 40 uT")


def test_4_matcher_gradient_and_convergence(maps):
    plan, cfg, _, grid = maps
    rng = np.random.default_rng(404)
    worst_grad = 0.0
    for _ in range(100):
        truth = corner_pose(rng)
        scan = raycast_scan(plan, truth, cfg, rng)
        pose = Pose2(truth.x + rng.uniform(-0.3, 0.3), truth.y + rng.uniform(-0.3, 0.3),
                     truth.heading + rng.uniform(-0.2, 0.2))
        _, grad = match_cost(grid, scan, pose)
        fd = fd_gradient(grid, scan, pose)
        worst_grad = max(worst_grad, np.linalg.norm(grad - fd) / np.linalg.norm(fd))
    recovered = 0
    increases = 0
    for _ in range(100):
        truth = corner_pose(rng)
        scan = raycast_scan(plan, truth, cfg, rng)
        start = Pose2(truth.x + rng.uniform(-0.3, 0.3), truth.y + rng.uniform(-0.3, 0.3),
                      truth.heading + math.radians(rng.uniform(-10, 10)))
        res = optimize_pose(grid, scan, start)
        dxy, dth = pose_error(res.pose, truth)
        recovered += dxy <= 0.05 and abs(dth) <= math.radians(1)
        increases += res.cost > res.initial_cost
        for level in {t[0] for t in res.trace}:
            costs = [t[5] for t in res.trace if t[0] == level]
            increases += any(b > a for a, b in zip(costs, costs[1:]))
    record(4, worst_grad <= 1e-4 and recovered >= 95 and increases == 0,
           f"gradient max rel err {worst_grad:.1e}, {recovered}/100 recoveries within (0.05 m, 1 deg), "
           f"{increases} cost increases")


@pytest.fixture(scope="module")
def full_bench(maps):
    plan, cfg, magmap, grid = maps
    t0 = time.perf_counter()
    results = run_bench(plan, cfg, magmap, grid, default_waypoints(), trials=10, base_seed=0)
    return results, time.perf_counter() - t0


def test_5_success_ordering(full_bench):
    results, elapsed = full_bench
    rep = BenchmarkReport.from_results(results)
    s = {o: rep.success_rate(o) for o in (1, 2, 3)}
    ok = s[1] >= 0.8 and s[1] > s[2] and s[1] > s[3] and elapsed < 600
    record(5, ok, f"success option1 {s[1]:.0%}, option2 {s[2]:.0%}, option3 {s[3]:.0%} "
                  f"(reference 88/35/40), bench {elapsed:.0f} s")


def test_6_time_ordering(full_bench):
    rep = BenchmarkReport.from_results(full_bench[0])
    t1, t3 = rep.per_option[1].mean_time, rep.per_option[3].mean_time
    ok = t1 is not None and (t3 is None or t1 < t3)
    fmt = lambda t: "F" if t is None else f"{t:.2f} s"
    record(6, ok, f"mean time to localize option1 {fmt(t1)}, option3 {fmt(t3)} (reference 6.6 vs 11.03 s)")


def test_7_accuracy(full_bench):
    rep = BenchmarkReport.from_results(full_bench[0])
    rmse = rep.per_option[1].rmse
    record(7, rmse is not None and rmse <= 0.2,
           f"option-1 RMSE {rmse:.3f} m over {rep.per_option[1].successes} successes (bound 0.2 m)")


def test_8_interference(maps, full_bench):
    plan, cfg, magmap, grid = maps
    wp = dict(default_waypoints())
    noisy = cfg.with_dipole(interference_dipole(wp[INTERFERENCE_WP]))
    results = run_bench(plan, noisy, magmap, grid, [(INTERFERENCE_WP, wp[INTERFERENCE_WP])], trials=10,
                        base_seed=0, options=(1, 3))
    quiet = BenchmarkReport.from_results(full_bench[0]).per_waypoint
    loud = BenchmarkReport.from_results(results).per_waypoint
    q1, l1 = quiet[(INTERFERENCE_WP, 1)].successes, loud[(INTERFERENCE_WP, 1)].successes
    q3, l3 = quiet[(INTERFERENCE_WP, 3)].successes, loud[(INTERFERENCE_WP, 3)].successes
    record(8, l1 < q1 and abs(l3 - q3) <= 1,
           f"waypoint {INTERFERENCE_WP} option1 {q1}/10 -> {l1}/10, option3 {q3}/10 -> {l3}/10 with interference")


def test_9_determinism(maps, full_bench):
    plan, cfg, magmap, grid = maps
    again = run_bench(plan, cfg, magmap, grid, default_waypoints(), trials=10, base_seed=0)
    a, b = results_csv(full_bench[0]).encode(), results_csv(again).encode()
    record(9, a == b, f"second full bench results.csv {'byte-identical' if a == b else 'differs'} "
                      f"({len(a)} bytes)")
