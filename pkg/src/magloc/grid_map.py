"""Occupancy grids built from scans at known poses, and the smoothed lookup used
by the scan matcher.

Cells are indexed ``[ix, iy]``; cell ``(ix, iy)`` is centered at
``origin + (ix + 0.5, iy + 0.5) * resolution``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose2, transform_points

P_MIN, P_MAX = 0.02, 0.98
P_UNKNOWN = 0.5
HIT_PROBABILITY = 0.6
MISS_PROBABILITY = 0.4
OCCUPIED_THRESH = 0.65
FREE_THRESH = 0.196


def _odds(p):
    return p / (1.0 - p)


@dataclass
class LaserScan:
    angles: np.ndarray
    ranges: np.ndarray
    no_return: np.ndarray
    max_range: float

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        self.ranges = np.asarray(self.ranges, dtype=float)
        self.no_return = np.asarray(self.no_return, dtype=bool)
        if not (self.angles.shape == self.ranges.shape == self.no_return.shape):
            raise ValueError("angles, ranges and no_return must align")
        if len(self.angles) > 1 and np.any(np.diff(self.angles) <= 0):
            raise ValueError("beam angles must be strictly increasing")
        if np.any(self.ranges < 0) or np.any(self.ranges > self.max_range):
            raise ValueError("ranges must lie in [0, max_range]")


def scan_endpoints(scan: LaserScan) -> np.ndarray:
    """Body-frame endpoints of the returning beams, shape (J, 2)."""
    keep = ~scan.no_return
    r, a = scan.ranges[keep], scan.angles[keep]
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


class OccupancyGrid:
    def __init__(self, origin, resolution: float, nx: int, ny: int, probs: np.ndarray | None = None):
        if not resolution > 0:
            raise ValueError("resolution must be positive")
        self.origin = (float(origin[0]), float(origin[1]))
        self.resolution = float(resolution)
        if probs is None:
            probs = np.full((nx, ny), P_UNKNOWN)
        probs = np.asarray(probs, dtype=float)
        if probs.shape != (nx, ny):
            raise ValueError(f"cell array shape {probs.shape} != ({nx}, {ny})")
        if np.any(probs < 0) or np.any(probs > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        self.probs = probs
        self._pyramid = None
        self._version = 0

    @property
    def nx(self) -> int:
        return self.probs.shape[0]

    @property
    def ny(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def covering(cls, xmin, ymin, xmax, ymax, resolution: float, anchor=(0.0, 0.0)) -> "OccupancyGrid":
        """Unknown grid over a rectangle whose cell centers fall on ``anchor + k*resolution``."""
        ax, ay = anchor
        ox = ax + (math.floor((xmin - ax) / resolution) - 0.5) * resolution
        oy = ay + (math.floor((ymin - ay) / resolution) - 0.5) * resolution
        nx = int(math.ceil((xmax - ox) / resolution)) + 1
        ny = int(math.ceil((ymax - oy) / resolution)) + 1
        return cls((ox, oy), resolution, nx, ny)

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.origin, self.resolution, self.nx, self.ny, self.probs.copy())

    def to_cell_coords(self, points) -> np.ndarray:
        """Continuous cell coordinates: integer values at cell corners."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return (pts - np.array(self.origin)) / self.resolution

    def cell_of(self, points) -> np.ndarray:
        return np.floor(self.to_cell_coords(points)).astype(int)

    def cell_center(self, ix, iy) -> np.ndarray:
        idx = np.stack(np.broadcast_arrays(ix, iy), axis=-1).astype(float)
        return np.array(self.origin) + (idx + 0.5) * self.resolution

    def bounds(self) -> tuple[float, float, float, float]:
        ox, oy = self.origin
        return ox, oy, ox + self.nx * self.resolution, oy + self.ny * self.resolution

    def ensure_contains(self, points) -> None:
        """Grow the grid in whole cells so every point falls inside it."""
        cells = self.cell_of(points)
        if not len(cells):
            return
        lo = np.minimum(cells.min(axis=0), 0)
        hi = np.maximum(cells.max(axis=0) + 1, [self.nx, self.ny])
        pad_lo = -lo
        pad_hi = hi - np.array([self.nx, self.ny])
        if np.any(pad_lo) or np.any(pad_hi):
            self.probs = np.pad(self.probs, ((pad_lo[0], pad_hi[0]), (pad_lo[1], pad_hi[1])),
                                constant_values=P_UNKNOWN)
            self.origin = (self.origin[0] - pad_lo[0] * self.resolution,
                           self.origin[1] - pad_lo[1] * self.resolution)
            self.touch()

    def value(self, ix, iy):
        """Cell probability; out-of-grid cells read as unknown."""
        padded = self.padded()
        ix = np.clip(np.asarray(ix) + 1, 0, self.nx + 1)
        iy = np.clip(np.asarray(iy) + 1, 0, self.ny + 1)
        return padded[ix, iy]

    def padded(self) -> np.ndarray:
        """Probabilities with a one-cell unknown border, rebuilt when the grid changes."""
        cached = getattr(self, "_padded", None)
        if cached is None or cached[0] is not self.probs or cached[1] != self._version:
            arr = np.pad(self.probs, 1, constant_values=P_UNKNOWN)
            self._padded = cached = (self.probs, self._version, arr)
        return cached[2]

    def touch(self) -> None:
        """Invalidate derived caches after editing ``probs`` in place."""
        self._version += 1
        self._pyramid = None

    def coarsened(self, factor: int) -> "OccupancyGrid":
        """Max-pooled copy with ``factor``-times larger cells (walls stay present)."""
        if factor == 1:
            return self
        nx = -(-self.nx // factor)
        ny = -(-self.ny // factor)
        padded = np.full((nx * factor, ny * factor), P_UNKNOWN)
        padded[: self.nx, : self.ny] = self.probs
        pooled = padded.reshape(nx, factor, ny, factor).max(axis=(1, 3))
        return OccupancyGrid(self.origin, self.resolution * factor, nx, ny, pooled)

    def pyramid(self, levels: int) -> list["OccupancyGrid"]:
        """``[self, 2x, 4x, ...]`` with ``levels`` entries, cached."""
        if self._pyramid is None or len(self._pyramid) < levels:
            self._pyramid = [self] + [self.coarsened(2 ** k) for k in range(1, levels)]
        return self._pyramid[:levels]

    def __eq__(self, other):
        return (isinstance(other, OccupancyGrid) and self.origin == other.origin
                and self.resolution == other.resolution and np.array_equal(self.probs, other.probs))


def m_smooth(grid: OccupancyGrid, points, with_gradient: bool = False):
    """Bilinear probability lookup between cell centers.

    Returns values of shape (N,), plus (N, 2) gradients in probability per
    meter when ``with_gradient`` is set.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    u = grid.to_cell_coords(pts) - 0.5
    i0 = np.floor(u)
    f = u - i0
    # shift into the padded array; anything beyond the border reads the unknown border
    padded = grid.padded()
    w = padded.shape[1]
    ix = np.minimum(np.maximum(i0[:, 0].astype(np.intp) + 1, 0), grid.nx + 1)
    iy = np.minimum(np.maximum(i0[:, 1].astype(np.intp) + 1, 0), grid.ny + 1)
    ix1 = np.minimum(np.maximum(i0[:, 0].astype(np.intp) + 2, 0), grid.nx + 1)
    iy1 = np.minimum(np.maximum(i0[:, 1].astype(np.intp) + 2, 0), grid.ny + 1)
    flat = padded.ravel()
    v00 = flat[ix * w + iy]
    v10 = flat[ix1 * w + iy]
    v01 = flat[ix * w + iy1]
    v11 = flat[ix1 * w + iy1]
    fx, fy = f[:, 0], f[:, 1]
    val = (1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11)
    if not with_gradient:
        return val[0] if single else val
    gx = ((1 - fy) * (v10 - v00) + fy * (v11 - v01)) / grid.resolution
    gy = ((1 - fx) * (v01 - v00) + fx * (v11 - v10)) / grid.resolution
    grad = np.stack([gx, gy], axis=1)
    if single:
        return val[0], grad[0]
    return val, grad


def trace_cells(grid: OccupancyGrid, start, ends) -> tuple[np.ndarray, np.ndarray]:
    """Cells crossed by segments start->end, excluding each end cell.

    Exact grid traversal: every crossing of a cell boundary along each segment
    is found, and the cell between consecutive crossings is reported. Returns
    flat (ix, iy) arrays with duplicates removed.
    """
    s = grid.to_cell_coords(start)[0]
    e = grid.to_cell_coords(ends)
    d = e - s
    first = np.floor(s).astype(np.int64)
    last = np.floor(e).astype(np.int64)
    ts = [np.zeros(len(e)), np.ones(len(e))]
    beams = [np.arange(len(e)), np.arange(len(e))]
    for axis in (0, 1):
        n = np.abs(last[:, axis] - first[axis])
        beam = np.repeat(np.arange(len(e)), n)
        k = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        step = np.sign(d[beam, axis])
        # boundary lines first + 1, first + 2, ... going up; first, first - 1, ... going down
        line = first[axis] + np.where(step > 0, k + 1, -k)
        ts.append((line - s[axis]) / d[beam, axis])
        beams.append(beam)
    t = np.concatenate(ts)
    beam = np.concatenate(beams)
    order = np.lexsort((t, beam))
    t, beam = t[order], beam[order]
    same = beam[1:] == beam[:-1]
    lo, hi, b = t[:-1][same], t[1:][same], beam[:-1][same]
    span = hi > lo
    mid = 0.5 * (lo[span] + hi[span])
    b = b[span]
    cells = np.floor(s + mid[:, None] * d[b]).astype(np.int64)
    keep = np.any(cells != last[b], axis=1)
    cells = cells[keep]
    if not len(cells):
        return np.zeros(0, int), np.zeros(0, int)
    flat = np.unique(_cell_keys(cells))
    return (flat // _KEY).astype(int), (flat % _KEY).astype(int)


_KEY = 1 << 20


def _cell_keys(cells) -> np.ndarray:
    # cells are inside the grid, so indices are non-negative
    return cells[:, 0].astype(np.int64) * _KEY + cells[:, 1]


@dataclass
class Submap:
    grid: OccupancyGrid
    pose: Pose2 = field(default_factory=lambda: Pose2(0.0, 0.0, 0.0))
    scan_count: int = 0


def _apply(grid: OccupancyGrid, ix, iy, p_step: float) -> None:
    p = grid.probs[ix, iy]
    o = _odds(p) * _odds(p_step)
    grid.probs[ix, iy] = np.clip(o / (1.0 + o), P_MIN, P_MAX)


def insert_scan(submap: Submap, scan: LaserScan, pose: Pose2,
                hit_probability: float = HIT_PROBABILITY,
                miss_probability: float = MISS_PROBABILITY, miss_margin: float = 0.0) -> Submap:
    """Odds update of hit and traversed cells; each cell is updated at most once per scan.

    Traversed cells that also receive a hit in the same scan are only counted as hits.
    """
    grid = submap.grid
    ends = transform_points(pose, scan_endpoints(scan))
    # no-return beams still clear space up to max range
    free_mask = scan.no_return
    free_ends = transform_points(pose, np.stack(
        [scan.max_range * np.cos(scan.angles[free_mask]), scan.max_range * np.sin(scan.angles[free_mask])], axis=1))
    grid.ensure_contains(np.vstack([ends, free_ends, [[pose.x, pose.y]]]))
    hit_cells = np.unique(grid.cell_of(ends), axis=0) if len(ends) else np.zeros((0, 2), int)
    ray_ends = ends
    if miss_margin > 0 and len(ends):
        # stop free-space rays short of the hit so grazing beams do not erode walls
        body = scan_endpoints(scan)
        r = np.linalg.norm(body, axis=1)
        shrink = np.clip((r - miss_margin) / np.where(r > 0, r, 1.0), 0.0, 1.0)
        ray_ends = transform_points(pose, body * shrink[:, None])
    all_ends = np.vstack([ray_ends, free_ends])
    if len(all_ends):
        mx, my = trace_cells(grid, (pose.x, pose.y), all_ends)
        if len(hit_cells):
            keep = ~np.isin(mx.astype(np.int64) * _KEY + my, _cell_keys(hit_cells))
            mx, my = mx[keep], my[keep]
        _apply(grid, mx, my, miss_probability)
    if len(hit_cells):
        _apply(grid, hit_cells[:, 0], hit_cells[:, 1], hit_probability)
    grid.touch()
    submap.scan_count += 1
    return submap


def build_global_map(scans, poses, resolution: float = 0.05, bounds=None, anchor=(0.0, 0.0),
                     **insert_options) -> OccupancyGrid:
    """Accumulate scans taken at known poses into a single grid."""
    scans = list(scans)
    poses = list(poses)
    if not scans:
        raise ValueError("no scans to build a map from")
    if len(scans) != len(poses):
        raise ValueError("scans and poses differ in length")
    if bounds is None:
        xs = [p.x for p in poses]
        ys = [p.y for p in poses]
        bounds = (min(xs), min(ys), max(xs), max(ys))
    grid = OccupancyGrid.covering(*bounds, resolution, anchor=anchor)
    submap = Submap(grid)
    for scan, pose in zip(scans, poses):
        insert_scan(submap, scan, pose, **insert_options)
    return submap.grid


# ---------------------------------------------------------------------------
# files: 8-bit PGM image + text metadata + lossless .npy probabilities


def _paths(path):
    path = Path(path)
    stem = path.with_suffix("")
    return stem.with_suffix(".pgm"), stem.with_suffix(".meta"), stem.with_suffix(".npy")


def grid_to_image(grid: OccupancyGrid) -> np.ndarray:
    """Trinary 8-bit image, row 0 at the top (max y)."""
    img = np.full(grid.probs.shape, 205, dtype=np.uint8)
    img[grid.probs >= OCCUPIED_THRESH] = 0
    img[grid.probs <= FREE_THRESH] = 254
    return np.ascontiguousarray(img.T[::-1])


def save_grid(path, grid: OccupancyGrid) -> tuple[Path, Path, Path]:
    pgm, meta, npy = _paths(path)
    img = grid_to_image(grid)
    h, w = img.shape
    pgm.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    meta.write_text(
        f"image {pgm.name}\n"
        f"resolution {float(grid.resolution)!r}\n"
        f"origin_x {float(grid.origin[0])!r}\n"
        f"origin_y {float(grid.origin[1])!r}\n"
        f"occupied_thresh {OCCUPIED_THRESH}\n"
        f"free_thresh {FREE_THRESH}\n"
    )
    with open(npy, "wb") as fh:
        np.save(fh, grid.probs, allow_pickle=False)
    return pgm, meta, npy


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pixels = np.frombuffer(data[pos + 1: pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError(f"{path}: truncated image data")
    return pixels.reshape(h, w)


def load_grid(path) -> OccupancyGrid:
    """Load a saved grid; exact probabilities come from the .npy file when present."""
    pgm, meta, npy = _paths(path)
    info = {}
    for line in Path(meta).read_text().splitlines():
        parts = line.split()
        if len(parts) == 2:
            info[parts[0]] = parts[1]
    try:
        resolution = float(info["resolution"])
        origin = (float(info["origin_x"]), float(info["origin_y"]))
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{meta}: missing or malformed metadata") from exc
    if npy.exists():
        probs = np.load(npy, allow_pickle=False)
    else:
        img = read_pgm(pgm).T[:, ::-1]
        probs = np.full(img.shape, P_UNKNOWN)
        probs[img == 0] = P_MAX
        probs[img == 254] = P_MIN
    if probs.ndim != 2:
        raise ValueError(f"{npy}: expected a 2-D array")
    return OccupancyGrid(origin, resolution, probs.shape[0], probs.shape[1], probs)
