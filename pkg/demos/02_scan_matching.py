"""Build the occupancy grid and pull a perturbed pose back onto a scan.

Prints the optimizer's path through the resolution pyramid: coarse levels
move the pose a long way cheaply, the finest level polishes it.
"""

import math

import numpy as np

from magloc.bench import build_gridmap
from magloc.geometry import Pose2, pose_error
from magloc.scan_match import optimize_pose
from magloc.world_sim import default_routes, default_world, raycast_scan

plan, config = default_world()
grid = build_gridmap(plan, config, default_routes(plan))
print(f"grid {grid.nx}x{grid.ny} at {grid.resolution} m")

truth = Pose2(18.2, 1.3, math.radians(20))
scan = raycast_scan(plan, truth, config, np.random.default_rng(1))
start = Pose2(truth.x - 0.25, truth.y + 0.2, truth.heading + math.radians(8))
res = optimize_pose(grid, scan, start)

print("\nlevel iter       x       y   heading      cost")
for lvl, it, x, y, h, cost in res.trace:
    print(f"{lvl:>5} {it:>4} {x:7.3f} {y:7.3f} {math.degrees(h):8.2f} {cost:9.3f}")
dxy, dth = pose_error(res.pose, truth)
print(f"\nscore {res.score:.3f}, error {dxy * 100:.1f} cm / {math.degrees(abs(dth)):.2f} deg, "
      f"converged={res.converged}")
