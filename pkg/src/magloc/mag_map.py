"""Magnetic fingerprint database and the interpolated field map built from it."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .world_sim import GroundTruthState, rotate_z


@dataclass(frozen=True)
class MagFingerprint:
    location: tuple[float, float]
    field: tuple[float, float, float]

    def __post_init__(self):
        if not (np.all(np.isfinite(self.location)) and np.all(np.isfinite(self.field))):
            raise ValueError("fingerprint coordinates must be finite")
        if not np.linalg.norm(self.field) > 0:
            raise ValueError("fingerprint field must be nonzero")


class FingerprintDatabase:
    """Ordered fingerprints; the row index is the tie-break key during matching."""

    def __init__(self, locations, fields, frame: str = "global"):
        self.locations = np.asarray(locations, dtype=float).reshape(-1, 2)
        self.fields = np.asarray(fields, dtype=float).reshape(-1, 3)
        if len(self.locations) != len(self.fields):
            raise ValueError("locations and fields differ in length")
        self.frame = frame

    def __len__(self):
        return len(self.locations)

    def __getitem__(self, i) -> MagFingerprint:
        return MagFingerprint(tuple(self.locations[i]), tuple(self.fields[i]))

    @classmethod
    def from_fingerprints(cls, prints, frame: str = "global") -> "FingerprintDatabase":
        prints = list(prints)
        return cls([p.location for p in prints], [p.field for p in prints], frame)


def build_database(states: list[GroundTruthState], readings) -> FingerprintDatabase:
    """Pair body-frame readings with ground-truth poses, storing fields in the global frame."""
    readings = np.asarray(readings, dtype=float).reshape(-1, 3) if len(readings) else np.zeros((0, 3))
    if len(states) != len(readings):
        raise ValueError(f"{len(states)} states but {len(readings)} readings")
    if not len(states):
        raise ValueError("cannot build a fingerprint database from no samples")
    locs = np.array([[s.pose.x, s.pose.y] for s in states])
    fields = np.array([rotate_z(r, s.pose.heading) for s, r in zip(states, readings)])
    return FingerprintDatabase(locs, fields)


def bilinear_interpolate(corners, query) -> np.ndarray:
    """Field at ``query`` from four fingerprints on the corners of an axis-aligned cell.

    ``corners`` may come in any order; they must span exactly two x and two y values.
    """
    pts = np.array([c.location for c in corners], dtype=float)
    vals = np.array([c.field for c in corners], dtype=float)
    xs = np.unique(pts[:, 0])
    ys = np.unique(pts[:, 1])
    if len(corners) != 4 or len(xs) != 2 or len(ys) != 2:
        raise ValueError("corners must form a non-degenerate axis-aligned cell")
    (x1, x2), (y1, y2) = xs, ys

    def at(x, y):
        idx = np.flatnonzero((pts[:, 0] == x) & (pts[:, 1] == y))
        if len(idx) != 1:
            raise ValueError("corners must form a non-degenerate axis-aligned cell")
        return vals[idx[0]]

    x, y = float(query[0]), float(query[1])
    if not (x1 <= x <= x2 and y1 <= y <= y2):
        raise ValueError(f"query {query} outside cell [{x1}, {x2}] x [{y1}, {y2}]")
    return _bilerp(x1, x2, y1, y2, at(x1, y1), at(x2, y1), at(x1, y2), at(x2, y2), x, y)


def _bilerp(x1, x2, y1, y2, b11, b21, b12, b22, x, y):
    """Vectorized bilinear blend; b11 at (x1, y1), b21 at (x2, y1) and so on."""
    wx = ((x - x1) / (x2 - x1))[..., None] if np.ndim(x) else (x - x1) / (x2 - x1)
    wy = ((y - y1) / (y2 - y1))[..., None] if np.ndim(y) else (y - y1) / (y2 - y1)
    lower = (1 - wx) * b11 + wx * b21
    upper = (1 - wx) * b12 + wx * b22
    return (1 - wy) * lower + wy * upper


@dataclass
class MagGridMap:
    origin: tuple[float, float]
    resolution: float
    cells: np.ndarray  # (nx, ny, 3), NaN rows mark absent nodes
    observed: np.ndarray = field(default=None)  # (nx, ny) bool

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        self.cells = np.asarray(self.cells, dtype=float)
        if self.cells.ndim != 3 or self.cells.shape[2] != 3:
            raise ValueError("cells must have shape (nx, ny, 3)")
        if self.observed is None:
            self.observed = self.present.copy()

    @property
    def nx(self) -> int:
        return self.cells.shape[0]

    @property
    def ny(self) -> int:
        return self.cells.shape[1]

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.cells[..., 0])

    def node_xy(self, ix, iy) -> np.ndarray:
        return np.array(self.origin) + np.stack([np.asarray(ix), np.asarray(iy)], -1) * self.resolution

    def coverage(self) -> float:
        return float(self.present.mean())

    def to_database(self) -> FingerprintDatabase:
        """Present nodes as a fingerprint set, in x-major node order."""
        ix, iy = np.nonzero(self.present)
        return FingerprintDatabase(self.node_xy(ix, iy), self.cells[ix, iy])

    def __eq__(self, other):
        return (isinstance(other, MagGridMap) and self.origin == other.origin
                and self.resolution == other.resolution
                and np.array_equal(self.cells, other.cells, equal_nan=True))


def build_grid_map(db: FingerprintDatabase, resolution: float = 0.1, max_gap: float = 1.0,
                   origin=None) -> MagGridMap:
    """Bin fingerprints to the nearest node, then fill bracketed gaps bilinearly.

    An empty node is filled when it lies inside an axis-aligned rectangle whose
    four corners are observed nodes, no side longer than ``max_gap``. The
    smallest such rectangle is used (ties: smaller perimeter, then lower
    corner indices). Everything else stays absent.
    """
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    if not len(db):
        raise ValueError("empty fingerprint database")
    locs = db.locations
    if origin is None:
        origin = (math.floor(locs[:, 0].min() / resolution) * resolution,
                  math.floor(locs[:, 1].min() / resolution) * resolution)
    origin = (float(origin[0]), float(origin[1]))
    idx = np.rint((locs - np.array(origin)) / resolution).astype(int)
    if np.any(idx < 0):
        raise ValueError("fingerprints lie below the map origin")
    nx, ny = idx.max(axis=0) + 1
    sums = np.zeros((nx, ny, 3))
    counts = np.zeros((nx, ny))
    np.add.at(sums, (idx[:, 0], idx[:, 1]), db.fields)
    np.add.at(counts, (idx[:, 0], idx[:, 1]), 1)
    observed = counts > 0
    cells = np.full((nx, ny, 3), np.nan)
    cells[observed] = sums[observed] / counts[observed][:, None]

    rect = _bracketing_rectangles(observed, max(1, int(math.floor(max_gap / resolution + 1e-9))))
    fill = ~observed & (rect[..., 0] >= 0)
    fx, fy = np.nonzero(fill)
    if len(fx):
        i1, i2, j1, j2 = rect[fx, fy].T
        cells[fx, fy] = _bilerp(i1.astype(float), i2.astype(float), j1.astype(float), j2.astype(float),
                                cells[i1, j1], cells[i2, j1], cells[i1, j2], cells[i2, j2],
                                fx.astype(float), fy.astype(float))
    return MagGridMap(origin, float(resolution), cells, observed)


def _bracketing_rectangles(observed: np.ndarray, max_span: int) -> np.ndarray:
    """Per node, (i1, i2, j1, j2) of the smallest all-observed-corner rectangle around it, or -1."""
    nx, ny = observed.shape
    best = np.full((nx, ny, 4), -1, dtype=int)
    best_key = np.full((nx, ny), np.inf)
    cols = np.arange(nx)
    for j1 in range(ny):
        for j2 in range(j1 + 1, min(ny, j1 + max_span + 1)):
            both = observed[:, j1] & observed[:, j2]
            if both.sum() < 2:
                continue
            # nearest column at or left of i, and at or right of i, with both corners observed
            left = np.where(both, cols, -1)
            left = np.maximum.accumulate(left)
            right = np.where(both, cols, nx)
            right = np.minimum.accumulate(right[::-1])[::-1]
            # a node sitting on an observed column may pair with either neighbour column
            cand = []
            prev = np.concatenate([[-1], left[:-1]])
            nxt = np.concatenate([right[1:], [nx]])
            cand.append((left, np.where(right == left, nxt, right)))
            cand.append((np.where(right == left, prev, left), right))
            span_y = j2 - j1
            for a, b in cand:
                ok = (a >= 0) & (b < nx) & (a < b) & (b - a <= max_span)
                area = np.where(ok, (b - a) * span_y, np.inf)
                perim = (b - a) + span_y
                key = area * 1e6 + perim * 1e3
                for j in range(j1, j2 + 1):
                    better = key < best_key[:, j]
                    if np.any(better):
                        best_key[better, j] = key[better]
                        best[better, j] = np.stack([a, b, np.full(nx, j1), np.full(nx, j2)], 1)[better]
    return best


def query_field(grid: MagGridMap, point):
    """Bilinear field at a 2-D point, or None when any surrounding node is absent.

    A point sitting exactly on a present node returns that node's field.
    """
    u = (np.asarray(point, dtype=float) - np.array(grid.origin)) / grid.resolution
    k = np.rint(u).astype(int)
    if np.array_equal(u, k) and 0 <= k[0] < grid.nx and 0 <= k[1] < grid.ny:
        return grid.cells[k[0], k[1]].copy() if grid.present[k[0], k[1]] else None
    i0 = np.floor(u).astype(int)
    ix, iy = int(i0[0]), int(i0[1])
    if ix < 0 or iy < 0 or ix + 1 >= grid.nx or iy + 1 >= grid.ny:
        if grid.nx == 1 or grid.ny == 1:
            return _degenerate_query(grid, u)
        return None
    corner = grid.cells[ix:ix + 2, iy:iy + 2]
    if np.isnan(corner[..., 0]).any():
        return None
    fxy = u - i0
    return _bilerp(0.0, 1.0, 0.0, 1.0, corner[0, 0], corner[1, 0], corner[0, 1], corner[1, 1],
                   float(fxy[0]), float(fxy[1]))


def _degenerate_query(grid: MagGridMap, u):
    k = np.rint(u).astype(int)
    if np.allclose(u, k) and 0 <= k[0] < grid.nx and 0 <= k[1] < grid.ny and grid.present[k[0], k[1]]:
        return grid.cells[k[0], k[1]].copy()
    return None


# ---------------------------------------------------------------------------
# files


def save_fingerprints(path, db: FingerprintDatabase) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "bx", "by", "bz"])
        for (x, y), (bx, by, bz) in zip(db.locations, db.fields):
            w.writerow([repr(float(v)) for v in (x, y, bx, by, bz)])


def load_fingerprints(path) -> FingerprintDatabase:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["x", "y", "bx", "by", "bz"]:
            raise ValueError(f"{path}: expected header x,y,bx,by,bz")
        rows = [[float(r[k]) for k in ("x", "y", "bx", "by", "bz")] for r in reader]
    arr = np.array(rows, dtype=float).reshape(-1, 5)
    return FingerprintDatabase(arr[:, :2], arr[:, 2:])


def save_grid_map(path, grid: MagGridMap) -> None:
    lines = [f"{float(grid.origin[0])!r} {float(grid.origin[1])!r} {float(grid.resolution)!r} {grid.nx} {grid.ny}"]
    for j in range(grid.ny):
        row = []
        for i in range(grid.nx):
            b = grid.cells[i, j]
            row.append("-" if np.isnan(b[0]) else ",".join(repr(float(v)) for v in b))
        lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_grid_map(path) -> MagGridMap:
    text = Path(path).read_text().splitlines()
    try:
        head = text[0].split()
        ox, oy, res = (float(v) for v in head[:3])
        nx, ny = int(head[3]), int(head[4])
        cells = np.full((nx, ny, 3), np.nan)
        if len(text) - 1 < ny:
            raise ValueError("too few rows")
        for j in range(ny):
            entries = text[1 + j].split()
            if len(entries) != nx:
                raise ValueError(f"row {j} has {len(entries)} entries, expected {nx}")
            for i, e in enumerate(entries):
                if e != "-":
                    cells[i, j] = [float(v) for v in e.split(",")]
    except (IndexError, ValueError) as exc:
        raise ValueError(f"{path}: malformed magnetic grid map ({exc})") from exc
    return MagGridMap((ox, oy), res, cells)
