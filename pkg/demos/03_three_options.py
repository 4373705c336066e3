"""One trial of each initialization option from the same waypoint.

Option 1 seeds the matcher with the magnetic pose, option 2 with the
magnetic location only, option 3 with nothing (a lattice sweep).
"""

from magloc.bench import TrialSpec, build_gridmap, build_magmap, run_trial, trial_seed
from magloc.world_sim import default_routes, default_waypoints, default_world

plan, config = default_world()
routes = default_routes(plan)
magmap, _ = build_magmap(plan, config, routes)
grid = build_gridmap(plan, config, routes)

wp_id, start = default_waypoints()[6]
print(f"waypoint {wp_id} at ({start.x}, {start.y})")
for option in (1, 2, 3):
    spec = TrialSpec(wp_id, start, option, trial_seed(0, wp_id, option, 0))
    result, outcome, init = run_trial(spec, plan, config, magmap, grid, keep_outcome=True)
    prior = "none" if not init.has_location else (
        f"({init.location[0]:.2f}, {init.location[1]:.2f})" + ("" if init.has_heading else ", no heading"))
    if result.declared:
        what = f"declared at {result.time_s:.1f} s, error {result.translation_error:.3f} m"
    else:
        what = f"not localized in {outcome.scans_used} scans"
    print(f"  option {option}: prior {prior:28s} {what}")
