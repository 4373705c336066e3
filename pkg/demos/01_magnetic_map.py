"""Survey the magnetic field, then guess a pose from a single reading.

The robot drives the survey routes once, the readings become a fingerprint
grid, and a stationary reading at each waypoint is matched back against it.
"""

import math

import numpy as np

from magloc.bench import build_magmap
from magloc.coarse_loc import coarse_pose
from magloc.world_sim import default_routes, default_waypoints, default_world, sample_magnetometer

plan, config = default_world()
magmap, db = build_magmap(plan, config, default_routes(plan))
print(f"{len(db)} fingerprints -> {magmap.nx}x{magmap.ny} node grid, {magmap.coverage():.0%} filled")

rng = np.random.default_rng(0)
print("\n wp   true (x, y, deg)        estimate (x, y, deg)     error (m)")
for wp, pose in default_waypoints():
    reading = np.mean([sample_magnetometer(config, pose, rng) for _ in range(16)], axis=0)
    est = coarse_pose(None, magmap, reading)
    err = math.dist(est.location, pose.xy)
    print(f"{wp:>3}   ({pose.x:5.1f}, {pose.y:4.1f}, {math.degrees(pose.heading):5.0f})   "
          f"({est.location[0]:5.2f}, {est.location[1]:5.2f}, {math.degrees(est.heading):5.0f})   {err:8.2f}")
