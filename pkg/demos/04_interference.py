"""A strong magnet next to waypoint 4 spoils the magnetic prior.

The maps are built without it, so option 1 starts from a wrong guess, while
option 3 never reads the magnetometer and carries on as before.
"""

from magloc.bench import BenchmarkReport, build_gridmap, build_magmap, run_bench
from magloc.world_sim import default_routes, default_waypoints, default_world, interference_dipole

WP = 4
TRIALS = 5

plan, config = default_world()
routes = default_routes(plan)
magmap, _ = build_magmap(plan, config, routes)
grid = build_gridmap(plan, config, routes)
waypoint = [(WP, dict(default_waypoints())[WP])]

for label, cfg in (("quiet", config), ("magnet", config.with_dipole(interference_dipole(waypoint[0][1])))):
    rep = BenchmarkReport.from_results(run_bench(plan, cfg, magmap, grid, waypoint, TRIALS, options=(1, 3)))
    print(f"{label:>6}: option 1 {rep.per_waypoint[(WP, 1)].successes}/{TRIALS}, "
          f"option 3 {rep.per_waypoint[(WP, 3)].successes}/{TRIALS}")
