"""Coarse pose from a single magnetometer reading: k-NN location and cardinal heading."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angle
from .mag_map import FingerprintDatabase, MagGridMap
from .world_sim import rotate_z

CARDINAL_HEADINGS = (0.0, math.pi / 2, math.pi, -math.pi / 2)


@dataclass(frozen=True)
class CoarseConfig:
    k: int = 3
    heading_candidates: tuple[float, ...] = CARDINAL_HEADINGS
    cluster_radius: float = 0.1
    declination: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not self.heading_candidates:
            raise ValueError("need at least one heading candidate")


@dataclass(frozen=True)
class InitialPose:
    location: tuple[float, float] = (0.0, 0.0)
    heading: float = 0.0
    has_location: bool = False
    has_heading: bool = False
    diagnostics: dict = field(default_factory=dict, compare=False, repr=False)


@dataclass(frozen=True)
class KnnResult:
    location: np.ndarray
    neighbors: np.ndarray
    distances: np.ndarray
    cluster: np.ndarray  # indices into ``neighbors`` of the winning cluster

    @property
    def mean_distance(self) -> float:
        return float(self.distances.mean())


def mag_distance(a, b) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(math.sqrt(float(np.dot(d, d))))


def nearest_fingerprints(db: FingerprintDatabase, query, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and distances of the k closest fields; equal distances resolve to the lower index."""
    if not len(db):
        raise ValueError("empty fingerprint database")
    if k > len(db):
        raise ValueError(f"k={k} exceeds database size {len(db)}")
    diff = db.fields - np.asarray(query, dtype=float)
    d2 = np.einsum("ij,ij->i", diff, diff)
    if k < len(db):
        part = np.argpartition(d2, k - 1)
        kth = d2[part[k - 1]]
        cand = np.flatnonzero(d2 <= kth)
    else:
        cand = np.arange(len(db))
    order = cand[np.lexsort((cand, d2[cand]))][:k]
    return order, np.sqrt(d2[order])


def _clusters(points: np.ndarray, radius: float) -> list[list[int]]:
    """Single-linkage groups of points closer than ``radius``, in first-member order."""
    n = len(points)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if np.hypot(*(points[i] - points[j])) <= radius + 1e-12:
                parent[find(j)] = find(i)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def knn_locate(db: FingerprintDatabase, query, cfg: CoarseConfig = CoarseConfig()) -> KnnResult:
    """Majority location among the k nearest fingerprints.

    Neighbours are grouped by spatial proximity; the largest group wins (ties
    go to the group with the smaller mean field distance) and its centroid is
    returned.
    """
    idx, dist = nearest_fingerprints(db, query, cfg.k)
    locs = db.locations[idx]
    groups = _clusters(locs, cfg.cluster_radius)
    best = min(groups, key=lambda g: (-len(g), float(dist[g].mean())))
    best = np.array(sorted(best))
    return KnnResult(locs[best].mean(axis=0), idx, dist, best)


def estimate_heading(b_body, b_global, cfg: CoarseConfig = CoarseConfig()) -> float:
    """Cardinal heading that best explains the rotation taking ``b_body`` onto ``b_global``.

    The rotation angle is the angle between the two vectors and its axis is
    their normalized cross product. For each candidate heading h the reading
    expected at that heading is ``R_z(-h) b_global``; the candidate whose
    expected angle is closest to the measured one wins, with the sign of the
    axis' vertical component separating +pi/2 from -pi/2 (axis up means the
    body frame is turned counter-clockwise from the global frame).
    """
    bl = np.asarray(b_body, dtype=float)
    bg = np.asarray(b_global, dtype=float)
    nl, ng = np.linalg.norm(bl), np.linalg.norm(bg)
    if not (nl > 0 and ng > 0):
        raise ValueError("field vectors must be nonzero")
    phi = math.acos(float(np.clip(np.dot(bl, bg) / (nl * ng), -1.0, 1.0)))
    cross = np.cross(bl, bg)
    cn = np.linalg.norm(cross)
    degenerate = phi < 1e-6 or math.pi - phi < 1e-6 or cn == 0
    axis_z = 0.0 if degenerate else cross[2] / cn

    best, best_cost = None, math.inf
    for h in cfg.heading_candidates:
        expected = rotate_z(bg, -h)
        phi_h = math.acos(float(np.clip(np.dot(expected, bg) / ng ** 2, -1.0, 1.0)))
        cost = abs(phi - phi_h)
        turn = math.sin(wrap_angle(h))
        if not degenerate and abs(turn) > 1e-9 and np.sign(turn) != np.sign(axis_z):
            cost += math.pi
        if cost < best_cost - 1e-12:
            best, best_cost = h, cost
    # the heading above is relative to magnetic north; report it against the map frame
    return _snap(best - cfg.declination, cfg.heading_candidates)


def _snap(angle: float, candidates) -> float:
    return min(candidates, key=lambda c: abs(wrap_angle(angle - c)))


def coarse_pose(db: FingerprintDatabase | None, grid: MagGridMap | None, b_body,
                cfg: CoarseConfig = CoarseConfig()) -> InitialPose:
    """Joint heading and location hypothesis from one body-frame reading.

    Each candidate heading rotates the reading into the global frame and runs
    k-NN against the interpolated map nodes (or the raw database when no map
    is given); the candidate with the smallest mean neighbour distance wins.
    """
    train = grid.to_database() if grid is not None else db
    if train is None or not len(train):
        raise ValueError("empty fingerprint database")
    scores = {}
    best = None
    for h in cfg.heading_candidates:
        res = knn_locate(train, rotate_z(b_body, h), cfg)
        scores[h] = res.mean_distance
        if best is None or res.mean_distance < best[1].mean_distance:
            best = (h, res)
    h, res = best
    return InitialPose((float(res.location[0]), float(res.location[1])), h, True, True,
                       {"heading_scores": scores, "neighbors": res.neighbors.tolist(),
                        "distances": res.distances.tolist()})
