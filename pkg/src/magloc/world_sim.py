"""Synthetic building, robot and sensors.

The world is a set of wall segments plus a magnetic field made of a uniform
ambient vector and a handful of point dipoles standing in for steel structure.
A raycast lidar and a noisy magnetometer sample it along driven routes.

World files are plain text, one record per line (``#`` starts a comment)::

    bounds xmin ymin xmax ymax
    origin x y
    ambient bx by bz            # microtesla, global frame
    declination 0.0             # radians
    sensor_height 0.3
    mag_noise_sigma 0.5
    lidar_max_range 30
    lidar_beam_count 1081
    lidar_fov 4.71238898
    lidar_range_sigma 0.01
    seed 0
    segment x1 y1 x2 y2
    dipole px py pz mx my mz    # meters, ampere square meters
    loop x1 y1 x2 y2 ...        # closed driving loop used by trials
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Pose2, wrap_angle
from .grid_map import LaserScan

# mu0 / 4pi in microtesla * m / A
MU0_4PI_UT = 0.1


@dataclass(frozen=True)
class FloorPlan:
    segments: np.ndarray
    bounds: tuple[float, float, float, float]
    origin: tuple[float, float] = (0.0, 0.0)
    loop: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        segs = np.asarray(self.segments, dtype=float).reshape(-1, 4)
        object.__setattr__(self, "segments", segs)
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise ValueError(f"empty bounds {self.bounds}")
        lengths = np.hypot(segs[:, 2] - segs[:, 0], segs[:, 3] - segs[:, 1])
        if np.any(lengths <= 0):
            raise ValueError("zero-length wall segment")
        if len(segs) and (segs[:, [0, 2]].min() < xmin or segs[:, [0, 2]].max() > xmax
                          or segs[:, [1, 3]].min() < ymin or segs[:, [1, 3]].max() > ymax):
            raise ValueError("wall segment outside bounds")

    @property
    def closed(self) -> bool:
        """True when every segment endpoint is shared by an even number of segments."""
        if not len(self.segments):
            return False
        pts = np.round(self.segments.reshape(-1, 2), 9)
        _, counts = np.unique(pts, axis=0, return_counts=True)
        return bool(np.all(counts % 2 == 0))

    def distance_to_walls(self, point) -> float:
        if not len(self.segments):
            return math.inf
        p = np.asarray(point, dtype=float)
        a = self.segments[:, :2]
        d = self.segments[:, 2:] - a
        t = np.clip(((p - a) * d).sum(1) / (d * d).sum(1), 0.0, 1.0)
        closest = a + t[:, None] * d
        return float(np.min(np.hypot(*(closest - p).T)))

    def is_free(self, point, clearance: float = 0.05) -> bool:
        """Inside bounds, away from walls and, for closed plans, inside the walls.

        Closed plans use crossing parity: free space is where a ray towards +x
        crosses an odd number of walls (inside the outer loop, outside inner blocks).
        """
        x, y = float(point[0]), float(point[1])
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmin <= x <= xmax and ymin <= y <= ymax):
            return False
        if self.distance_to_walls((x, y)) < clearance:
            return False
        if self.closed:
            x1, y1, x2, y2 = self.segments.T
            straddle = (y1 > y) != (y2 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            crossings = int(np.count_nonzero(straddle & (xc > x)))
            return crossings % 2 == 1
        return True

    def segment_is_free(self, a, b) -> bool:
        """True when the straight path a->b crosses no wall."""
        if not len(self.segments):
            return True
        t = _ray_segment_hits(np.asarray(a, float), np.asarray(b, float) - np.asarray(a, float), self.segments)
        return not np.any(t <= 1.0)


@dataclass(frozen=True)
class DipoleSource:
    position: tuple[float, float, float]
    moment: tuple[float, float, float]

    def __post_init__(self):
        if not np.all(np.isfinite(self.position)):
            raise ValueError("dipole position must be finite")
        if not np.linalg.norm(self.moment) > 0:
            raise ValueError("dipole moment must be nonzero")


@dataclass(frozen=True)
class WorldConfig:
    ambient_field: tuple[float, float, float] = (0.0, 40.0, -10.0)
    declination_delta: float = 0.0
    dipoles: tuple[DipoleSource, ...] = ()
    mag_noise_sigma: float = 0.5
    lidar_max_range: float = 30.0
    lidar_beam_count: int = 1081
    lidar_fov: float = math.radians(270.0)
    lidar_range_sigma: float = 0.01
    sensor_height: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not np.linalg.norm(self.ambient_field) > 0:
            raise ValueError("ambient field must be nonzero")
        if self.mag_noise_sigma < 0 or self.lidar_range_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if self.lidar_beam_count < 2:
            raise ValueError("need at least two lidar beams")
        if not self.lidar_max_range > 0:
            raise ValueError("lidar max range must be positive")
        object.__setattr__(self, "dipoles", tuple(self.dipoles))

    def with_dipole(self, dipole: DipoleSource) -> "WorldConfig":
        return replace(self, dipoles=self.dipoles + (dipole,))


@dataclass(frozen=True)
class GroundTruthState:
    pose: Pose2
    time: float


def field_at(config: WorldConfig, point) -> np.ndarray:
    """Noise-free field (microtesla, global frame) at a 3-D point."""
    p = np.asarray(point, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError(f"expected a finite 3-D point, got {point!r}")
    return field_at_many(config, p[None, :])[0]


def field_at_many(config: WorldConfig, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    out = np.tile(np.asarray(config.ambient_field, dtype=float), (len(pts), 1))
    if not config.dipoles:
        return out
    pos = np.array([d.position for d in config.dipoles], dtype=float)
    mom = np.array([d.moment for d in config.dipoles], dtype=float)
    r = pts[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.einsum("ndk,ndk->nd", r, r))
    if np.any(dist == 0):
        n, d = np.argwhere(dist == 0)[0]
        raise ValueError(f"field evaluated at dipole position {config.dipoles[d].position}")
    rhat = r / dist[..., None]
    mr = np.einsum("ndk,dk->nd", rhat, mom)
    contrib = (3.0 * mr[..., None] * rhat - mom[None]) / dist[..., None] ** 3
    return out + MU0_4PI_UT * contrib.sum(axis=1)


def rotate_z(vec, angle: float) -> np.ndarray:
    """Rotate a 3-D vector by ``angle`` about the vertical axis."""
    c, s = math.cos(angle), math.sin(angle)
    v = np.asarray(vec, dtype=float)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]])


def sample_magnetometer(config: WorldConfig, pose: Pose2, rng: np.random.Generator) -> np.ndarray:
    """Body-frame magnetometer reading at ``pose``, sensor at ``config.sensor_height``."""
    b_global = field_at(config, (pose.x, pose.y, config.sensor_height))
    b_body = rotate_z(b_global, -pose.heading)
    noise = rng.normal(0.0, 1.0, 3) * config.mag_noise_sigma
    return b_body + noise


def _ray_segment_hits(origin: np.ndarray, directions: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Ray parameter of the nearest hit per direction (inf where nothing is hit).

    ``directions`` may be (2,) or (N, 2); distances are in units of |direction|.
    """
    d = np.atleast_2d(directions)[:, None, :]
    a = segments[None, :, :2]
    e = segments[None, :, 2:] - segments[None, :, :2]
    denom = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
    w = a - origin
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t = (w[..., 0] * e[..., 1] - w[..., 1] * e[..., 0]) / denom
        u = (w[..., 0] * d[..., 1] - w[..., 1] * d[..., 0]) / denom
    valid = (np.abs(denom) > 1e-15) & (t >= 0) & (u >= 0) & (u <= 1)
    t = np.where(valid, t, np.inf)
    return t.min(axis=1) if t.shape[1] else np.full(d.shape[0], np.inf)


def beam_angles(config: WorldConfig) -> np.ndarray:
    n = config.lidar_beam_count
    if config.lidar_fov >= 2 * math.pi - 1e-9:
        return -math.pi + 2 * math.pi * np.arange(n) / n
    return np.linspace(-config.lidar_fov / 2, config.lidar_fov / 2, n)


def raycast_scan(plan: FloorPlan, pose: Pose2, config: WorldConfig,
                 rng: np.random.Generator | None = None) -> LaserScan:
    angles = beam_angles(config)
    world = angles + pose.heading
    dirs = np.stack([np.cos(world), np.sin(world)], axis=1)
    if len(plan.segments):
        ranges = _ray_segment_hits(np.array([pose.x, pose.y]), dirs, plan.segments)
    else:
        ranges = np.full(len(angles), np.inf)
    max_range = config.lidar_max_range
    hit = ranges < max_range
    ranges = np.where(hit, ranges, max_range)
    if rng is not None and config.lidar_range_sigma > 0:
        noise = rng.normal(0.0, config.lidar_range_sigma, len(angles))
        ranges = np.where(hit, ranges + noise, ranges)
    ranges = np.clip(ranges, 0.0, max_range)
    no_return = ~hit | (ranges >= max_range)
    return LaserScan(angles=angles, ranges=ranges, no_return=no_return, max_range=max_range)


def _snap_cardinal(angle: float) -> float:
    return wrap_angle(round(angle / (math.pi / 2)) * (math.pi / 2))


def drive_route(plan: FloorPlan, waypoints, speed: float, sample_dt: float,
                snap_heading: bool = True, start_time: float = 0.0) -> list[GroundTruthState]:
    """Constant-speed piecewise-linear drive through ``waypoints``."""
    if speed <= 0 or sample_dt <= 0:
        raise ValueError("speed and sample_dt must be positive")
    pts = [np.array([w.x, w.y]) if isinstance(w, Pose2) else np.asarray(w, float)[:2] for w in waypoints]
    if not pts:
        raise ValueError("route needs at least one waypoint")
    for i, p in enumerate(pts):
        if not plan.is_free(p, clearance=0.0):
            raise ValueError(f"waypoint {i} at {tuple(p)} is outside free space")
    for i in range(len(pts) - 1):
        if not plan.segment_is_free(pts[i], pts[i + 1]):
            raise ValueError(f"route leg {i}->{i + 1} crosses a wall")

    if len(pts) == 1:
        w = waypoints[0]
        heading = w.heading if isinstance(w, Pose2) else 0.0
        return [GroundTruthState(Pose2(pts[0][0], pts[0][1], heading), start_time)]

    legs = [(a, b) for a, b in zip(pts[:-1], pts[1:]) if np.linalg.norm(b - a) > 0]
    if not legs:
        raise ValueError("route has no extent")
    lengths = np.array([np.linalg.norm(b - a) for a, b in legs])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    total_t = cum[-1] / speed
    n = int(math.floor(total_t / sample_dt + 1e-9))
    times = [k * sample_dt for k in range(n + 1)]
    if total_t - times[-1] > 1e-9:
        times.append(total_t)

    states = []
    for t in times:
        s = min(t * speed, cum[-1])
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(legs) - 1)
        a, b = legs[i]
        frac = (s - cum[i]) / lengths[i]
        pos = a + frac * (b - a)
        heading = math.atan2(b[1] - a[1], b[0] - a[0])
        if snap_heading:
            heading = _snap_cardinal(heading)
        states.append(GroundTruthState(Pose2(pos[0], pos[1], heading), start_time + t))
    return states


def route_length(waypoints) -> float:
    pts = np.array([[w.x, w.y] if isinstance(w, Pose2) else w[:2] for w in waypoints], float)
    return float(np.sum(np.hypot(*np.diff(pts, axis=0).T))) if len(pts) > 1 else 0.0


def loop_route(plan: FloorPlan, start: Pose2, distance: float, loop=None) -> list[tuple[float, float]]:
    """Waypoints following the closed driving loop from ``start`` for ``distance`` meters.

    Direction of travel is the loop direction closest to the start heading.
    """
    loop = np.asarray(loop if loop is not None else plan.loop, dtype=float)
    if len(loop) < 3:
        raise ValueError("floor plan has no driving loop")
    n = len(loop)
    p = start.xy
    best = None
    for i in range(n):
        a, b = loop[i], loop[(i + 1) % n]
        d = b - a
        t = float(np.clip(np.dot(p - a, d) / np.dot(d, d), 0.0, 1.0))
        dist = float(np.linalg.norm(a + t * d - p))
        if best is None or dist < best[0] - 1e-12:
            best = (dist, i, t)
    _, i, t = best
    seg_dir = loop[(i + 1) % n] - loop[i]
    forward = math.cos(start.heading) * seg_dir[0] + math.sin(start.heading) * seg_dir[1] >= 0
    if not forward:
        loop = loop[::-1]
        i = n - 1 - ((i + 1) % n)
        t = 1.0 - t

    out = [(start.x, start.y)]
    cur = p.copy()
    remaining = distance
    j = (i + 1) % n
    while remaining > 1e-12:
        nxt = loop[j]
        step = float(np.linalg.norm(nxt - cur))
        if step >= remaining:
            cur = cur + (nxt - cur) * (remaining / step)
            out.append((float(cur[0]), float(cur[1])))
            break
        if step > 0:
            out.append((float(nxt[0]), float(nxt[1])))
        remaining -= step
        cur = nxt.copy()
        j = (j + 1) % n
    return out


# ---------------------------------------------------------------------------
# text files

_SCALAR_KEYS = {
    "declination": ("declination_delta", float),
    "mag_noise_sigma": ("mag_noise_sigma", float),
    "lidar_max_range": ("lidar_max_range", float),
    "lidar_beam_count": ("lidar_beam_count", int),
    "lidar_fov": ("lidar_fov", float),
    "lidar_range_sigma": ("lidar_range_sigma", float),
    "sensor_height": ("sensor_height", float),
    "seed": ("seed", int),
}


def _records(text: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def parse_world(text: str) -> tuple[FloorPlan, WorldConfig]:
    segments, dipoles, loop = [], [], []
    bounds = origin = None
    kwargs = {}
    for lineno, tok in _records(text):
        key, vals = tok[0], tok[1:]
        try:
            if key == "segment":
                segments.append([float(v) for v in vals[:4]]) if len(vals) == 4 else _bad(lineno, key)
            elif key == "dipole":
                if len(vals) != 6:
                    _bad(lineno, key)
                v = [float(x) for x in vals]
                dipoles.append(DipoleSource(tuple(v[:3]), tuple(v[3:])))
            elif key == "bounds":
                if len(vals) != 4:
                    _bad(lineno, key)
                bounds = tuple(float(v) for v in vals)
            elif key == "origin":
                origin = (float(vals[0]), float(vals[1]))
            elif key == "ambient":
                if len(vals) != 3:
                    _bad(lineno, key)
                kwargs["ambient_field"] = tuple(float(v) for v in vals)
            elif key == "loop":
                if len(vals) < 6 or len(vals) % 2:
                    _bad(lineno, key)
                v = [float(x) for x in vals]
                loop = [(v[k], v[k + 1]) for k in range(0, len(v), 2)]
            elif key in _SCALAR_KEYS:
                name, conv = _SCALAR_KEYS[key]
                kwargs[name] = conv(vals[0])
            else:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
        except (IndexError, TypeError, ValueError) as exc:
            if str(exc).startswith(f"line {lineno}:"):
                raise
            raise ValueError(f"line {lineno}: malformed {key!r} record ({exc})") from exc
    if bounds is None:
        if not segments:
            raise ValueError("world file needs 'bounds' or at least one segment")
        s = np.array(segments)
        bounds = (s[:, [0, 2]].min(), s[:, [1, 3]].min(), s[:, [0, 2]].max(), s[:, [1, 3]].max())
    plan = FloorPlan(np.array(segments, float).reshape(-1, 4), bounds,
                     origin if origin is not None else (bounds[0], bounds[1]), tuple(loop))
    kwargs["dipoles"] = tuple(dipoles)
    return plan, WorldConfig(**kwargs)


def _bad(lineno, key):
    raise ValueError(f"line {lineno}: malformed {key!r} record")


def format_world(plan: FloorPlan, config: WorldConfig) -> str:
    r = repr
    lines = [
        "bounds " + " ".join(r(float(v)) for v in plan.bounds),
        "origin " + " ".join(r(float(v)) for v in plan.origin),
        "ambient " + " ".join(r(float(v)) for v in config.ambient_field),
    ]
    for key, (name, conv) in _SCALAR_KEYS.items():
        lines.append(f"{key} {r(conv(getattr(config, name)))}")
    for seg in plan.segments:
        lines.append("segment " + " ".join(r(float(v)) for v in seg))
    for dip in config.dipoles:
        lines.append("dipole " + " ".join(r(float(v)) for v in (*dip.position, *dip.moment)))
    if plan.loop:
        lines.append("loop " + " ".join(r(float(c)) for p in plan.loop for c in p))
    return "\n".join(lines) + "\n"


def load_world(path) -> tuple[FloorPlan, WorldConfig]:
    return parse_world(Path(path).read_text())


def save_world(path, plan: FloorPlan, config: WorldConfig) -> None:
    Path(path).write_text(format_world(plan, config))


def load_routes(path) -> list[list[tuple[float, float]]]:
    """Routes file: ``route <name>`` headers each followed by ``x y`` lines."""
    routes: list[list[tuple[float, float]]] = []
    for lineno, tok in _records(Path(path).read_text()):
        if tok[0] == "route":
            routes.append([])
        elif len(tok) == 2 and routes:
            routes[-1].append((float(tok[0]), float(tok[1])))
        else:
            raise ValueError(f"{path}: line {lineno}: expected 'route' or 'x y'")
    if not routes or not all(routes):
        raise ValueError(f"{path}: no routes")
    return routes


def save_routes(path, routes) -> None:
    lines = []
    for k, route in enumerate(routes):
        lines.append(f"route r{k}")
        lines += [f"{float(x)!r} {float(y)!r}" for x, y in route]
    Path(path).write_text("\n".join(lines) + "\n")


def load_waypoints(path) -> list[tuple[int, Pose2]]:
    """Waypoints file: ``waypoint <id> x y heading`` per line."""
    out = []
    for lineno, tok in _records(Path(path).read_text()):
        if tok[0] != "waypoint" or len(tok) != 5:
            raise ValueError(f"{path}: line {lineno}: expected 'waypoint id x y heading'")
        out.append((int(tok[1]), Pose2(float(tok[2]), float(tok[3]), float(tok[4]))))
    if not out:
        raise ValueError(f"{path}: no waypoints")
    return out


def save_waypoints(path, waypoints) -> None:
    Path(path).write_text("".join(f"waypoint {int(i)} {float(p.x)!r} {float(p.y)!r} {float(p.heading)!r}\n" for i, p in waypoints))


# ---------------------------------------------------------------------------
# default desk-scale world: 20 m x 8 m corridor loop around a 16 m x 4 m block

def _rect(x0, y0, x1, y1):
    return [[x0, y0, x1, y0], [x1, y0, x1, y1], [x1, y1, x0, y1], [x0, y1, x0, y0]]


def default_plan() -> FloorPlan:
    segs = _rect(0.0, 0.0, 20.0, 8.0) + _rect(2.0, 2.0, 18.0, 6.0)
    loop = ((1.0, 1.0), (19.0, 1.0), (19.0, 7.0), (1.0, 7.0))
    return FloorPlan(np.array(segs, float), (0.0, 0.0, 20.0, 8.0), (0.0, 0.0), loop)


def default_world(seed: int = 7) -> tuple[FloorPlan, WorldConfig]:
    """Corridor loop with steel-like dipoles embedded in the walls.

    Lidar is scaled down with the building (10 m range, 181 beams over 270 deg).
    """
    plan = default_plan()
    rng = np.random.default_rng(seed)
    # one source per meter of wall face, just behind the surface
    outer_x, outer_y, inner_x, inner_y = (-0.15, 8.15), (-0.15, 20.15), (2.15, 5.85), (2.15, 17.85)
    anchors = []
    for x in np.arange(0.5, 20.0, 1.0):
        anchors += [(x, outer_x[0]), (x, outer_x[1])]
    for y in np.arange(0.5, 8.0, 1.0):
        anchors += [(outer_y[0], y), (outer_y[1], y)]
    for x in np.arange(2.5, 18.0, 1.0):
        anchors += [(x, inner_x[0]), (x, inner_x[1])]
    for y in np.arange(2.5, 6.0, 1.0):
        anchors += [(inner_y[0], y), (inner_y[1], y)]
    dipoles = []
    for ax, ay in anchors:
        jitter = rng.uniform(-0.3, 0.3, 2)
        z = rng.uniform(-0.2, 1.0)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        moment = direction * rng.uniform(50.0, 150.0)
        # slide along the wall only
        along_x = ay in outer_x + inner_x
        px, py = (ax + jitter[0], ay) if along_x else (ax, ay + jitter[1])
        dipoles.append(DipoleSource((float(px), float(py), float(z)), tuple(float(m) for m in moment)))
    config = WorldConfig(
        ambient_field=(0.0, 40.0, -10.0),
        dipoles=tuple(dipoles),
        mag_noise_sigma=0.5,
        lidar_max_range=10.0,
        lidar_beam_count=181,
        lidar_fov=math.radians(270.0),
        lidar_range_sigma=0.01,
        sensor_height=0.3,
        seed=seed,
    )
    return plan, config


ROUTE_SPACING = 0.38


def default_routes(plan: FloorPlan | None = None, spacing: float = ROUTE_SPACING) -> list[list[tuple[float, float]]]:
    """Three closed loops parallel to the walls, ``spacing`` apart, each driven both ways."""
    routes = []
    for off in (-spacing, 0.0, spacing):
        x0, y0, x1, y1 = 1.0 + off, 1.0 + off, 19.0 - off, 7.0 - off
        ccw = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
        routes.append(ccw)
        routes.append(ccw[::-1])
    return routes


def default_waypoints() -> list[tuple[int, Pose2]]:
    """Ten starting poses on the corridor centerline with wall-parallel headings."""
    h = math.pi / 2
    poses = [
        (1.0, 3.0, h), (1.0, 6.0, h), (4.0, 7.0, 0.0), (8.5, 7.0, math.pi), (13.5, 7.0, 0.0),
        (19.0, 5.5, -h), (19.0, 2.5, h), (16.0, 1.0, math.pi), (10.5, 1.0, 0.0), (5.0, 1.0, math.pi),
    ]
    return [(i + 1, Pose2(x, y, th)) for i, (x, y, th) in enumerate(poses)]


def interference_dipole(near: Pose2, moment: float = 3000.0) -> DipoleSource:
    """A strong source (lift machinery) just behind the wall closest to ``near``."""
    return DipoleSource((near.x, near.y + 1.4 if near.y > 4 else near.y - 1.4, 0.5), (0.0, 0.0, moment))
