# SECTION: Necessary imports
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.path import Path as PolygonPath

from .errors import PreconditionError
from .grid import SdfGrid
from .ingest import Scan, write_scan_log
#!SECTION

# SECTION: Constants
OUTER = 'outer'
OBSTACLE = 'obstacle'
SDF_CHUNK = 4096
#!SECTION

# SECTION: Geometry helpers
def signed_area(points):
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def segments_cross(p, q, A, B):
    '''
    Whether segment pq properly crosses or touches any of the segments A[k]B[k].
    '''
    r, s = q - p, B - A
    denom = cross2(r, s)
    ap = A - p
    with np.errstate(divide='ignore', invalid='ignore'):
        t = cross2(ap, s) / denom
        u = cross2(ap, r) / denom
    hit = (np.abs(denom) > 1e-15) & (t >= 0.0) & (t <= 1.0) & (u >= 0.0) & (u <= 1.0)
    return bool(np.any(hit))


def point_segment_distance(P, A, B):
    '''
    Distances between every point and every segment.

    Returns:
        [len(P), len(A)] distances
    '''
    AB = B - A
    AP = P[:, None, :] - A[None, :, :]
    length2 = np.sum(AB * AB, axis=1)
    t = np.clip(np.sum(AP * AB[None], axis=2) / np.where(length2 > 0, length2, 1.0), 0.0, 1.0)
    closest = A[None] + t[..., None] * AB[None]
    return np.linalg.norm(P[:, None, :] - closest, axis=2)
#!SECTION

# SECTION: World
@dataclass
class Polygon:
    points: np.ndarray
    role: str

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.role not in (OUTER, OBSTACLE):
            raise PreconditionError(f"Unknown polygon role {self.role!r}")
        if len(self.points) < 3:
            raise PreconditionError(f"A polygon needs at least 3 vertices, got {len(self.points)}")
        if abs(signed_area(self.points)) < 1e-12:
            raise PreconditionError("Degenerate polygon with zero area")
        # Outer boundaries are stored counterclockwise
        if self.role == OUTER and signed_area(self.points) < 0:
            self.points = self.points[::-1].copy()

    @property
    def segments(self):
        return self.points, np.roll(self.points, -1, axis=0)


class World:
    '''
    Closed polygons: at most one outer boundary (free space inside) and any number of obstacles
    (free space outside). Containment is even-odd over all polygons.
    '''
    def __init__(self, polygons):
        self.polygons = list(polygons)
        if not self.polygons:
            raise PreconditionError("A world needs at least one polygon")
        if sum(p.role == OUTER for p in self.polygons) > 1:
            raise PreconditionError("A world has at most one outer boundary")
        self.has_outer = any(p.role == OUTER for p in self.polygons)
        self.seg_a = np.concatenate([p.segments[0] for p in self.polygons])
        self.seg_b = np.concatenate([p.segments[1] for p in self.polygons])
        self._paths = [PolygonPath(p.points, closed=False) for p in self.polygons]
        self._check_simple()

    def _check_simple(self):
        for k, poly in enumerate(self.polygons):
            A, B = poly.segments
            n = len(A)
            for i in range(n):
                # Skip the segment itself and its two neighbors, which share endpoints with it
                others = [j for j in range(n) if j not in (i, (i - 1) % n, (i + 1) % n)]
                if others and segments_cross(A[i], B[i], A[others], B[others]):
                    raise PreconditionError(f"Polygon {k} ({poly.role}) intersects itself at edge {i}")

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            with path.open('r', encoding='utf-8') as f:
                obj = json.load(f)
            polygons = [Polygon(p['points'], p['role']) for p in obj['polygons']]
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise PreconditionError(f"{path}: malformed world file ({err})") from err
        return cls(polygons)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        obj = {'polygons': [{'role': p.role, 'points': p.points.tolist()} for p in self.polygons]}
        with path.open('w', encoding='utf-8') as f:
            json.dump(obj, f, indent=2)

    @property
    def bounds(self):
        pts = np.concatenate([p.points for p in self.polygons])
        return pts.min(axis=0), pts.max(axis=0)

    def is_free(self, P):
        P = np.asarray(P, dtype=np.float64).reshape(-1, 2)
        inside = np.zeros(len(P), dtype=np.int64)
        for path in self._paths:
            inside += path.contains_points(P)
        # The plane outside every polygon is free only when there is no outer boundary
        return (inside % 2) == (1 if self.has_outer else 0)

    def wall_distance(self, P):
        P = np.asarray(P, dtype=np.float64).reshape(-1, 2)
        out = np.empty(len(P))
        for start in range(0, len(P), SDF_CHUNK):
            chunk = P[start:start + SDF_CHUNK]
            out[start:start + SDF_CHUNK] = point_segment_distance(chunk, self.seg_a, self.seg_b).min(axis=1)
        return out


def square_room(size=10.0, center=(0.0, 0.0)):
    """Square room with the given side length, walls only."""
    h = 0.5 * size
    cx, cy = center
    outer = [[cx - h, cy - h], [cx + h, cy - h], [cx + h, cy + h], [cx - h, cy + h]]
    return World([Polygon(outer, OUTER)])
#!SECTION

# SECTION: Scan simulation
@dataclass(frozen=True)
class ScanParams:
    angle_min_deg: float = -135.0
    angle_max_deg: float = 135.0
    angle_increment_deg: float = 1.0
    range_max: float = 30.0

    def __post_init__(self):
        if not self.angle_increment_deg > 0.0:
            raise ValueError(f"Invalid angle_increment_deg: {self.angle_increment_deg}")
        if not self.angle_max_deg >= self.angle_min_deg:
            raise ValueError(f"angle_max_deg {self.angle_max_deg} below angle_min_deg {self.angle_min_deg}")
        if not self.range_max > 0.0:
            raise ValueError(f"Invalid range_max: {self.range_max}")

    @property
    def n_rays(self):
        return int(math.floor((self.angle_max_deg - self.angle_min_deg) / self.angle_increment_deg + 1e-9)) + 1

    @property
    def angle_min(self):
        return math.radians(self.angle_min_deg)

    @property
    def angle_increment(self):
        return math.radians(self.angle_increment_deg)


def raycast(w, pose, params, noise_sigma, rng_seed, scan_index=0):
    '''
    Simulated scan from `pose`. Each ray returns the distance to the nearest wall plus Gaussian
    noise, clamped to (0, range_max]; rays that hit nothing return range_max. The noise stream
    is keyed by (rng_seed, scan_index) and consumed one draw per ray.
    '''
    x, y, heading = (float(v) for v in pose)
    if not w.is_free([x, y])[0]:
        raise PreconditionError(f"Pose ({x}, {y}) is not in free space")

    angles = heading + params.angle_min + np.arange(params.n_rays) * params.angle_increment
    D = np.stack([np.cos(angles), np.sin(angles)], axis=1)                       # [R, 2]
    S = w.seg_b - w.seg_a                                                        # [K, 2]
    AP = w.seg_a - np.array([x, y])                                              # [K, 2]

    denom = D[:, None, 0] * S[None, :, 1] - D[:, None, 1] * S[None, :, 0]        # [R, K]
    with np.errstate(divide='ignore', invalid='ignore'):
        t = cross2(AP, S)[None, :] / denom
        u = (AP[None, :, 0] * D[:, None, 1] - AP[None, :, 1] * D[:, None, 0]) / denom
    valid = (np.abs(denom) > 1e-15) & (t > 0.0) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf).min(axis=1)

    hit = t <= params.range_max
    ranges = np.full(params.n_rays, params.range_max)
    if noise_sigma > 0.0:
        noise = np.random.default_rng([rng_seed, scan_index]).normal(0.0, noise_sigma, params.n_rays)
    else:
        noise = np.zeros(params.n_rays)
    ranges[hit] = np.clip(t[hit] + noise[hit], 1e-6, params.range_max)
    return Scan(0.0, (x, y, heading), params.angle_min, params.angle_increment, ranges, params.range_max)
#!SECTION

# SECTION: Ground truth
def ground_truth_sdf(w, g):
    """Exact Euclidean signed distance at every cell center, positive in free space."""
    centers = g.centers()
    dist = w.wall_distance(centers)
    sign = np.where(w.is_free(centers), 1.0, -1.0)
    return SdfGrid(g, (sign * dist).reshape(g.shape))
#!SECTION

# SECTION: Trajectories and datasets
def trajectory_poses(waypoints, spacing):
    '''
    Poses every `spacing` meters along the waypoint polyline, heading along the motion.
    A path of zero length yields a single pose at the first waypoint.
    '''
    wp = np.asarray(waypoints, dtype=np.float64).reshape(-1, 2)
    if len(wp) == 0:
        raise PreconditionError("A trajectory needs at least one waypoint")
    seg = np.diff(wp, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    moving = np.flatnonzero(lengths > 0)
    total = float(lengths.sum())
    if total == 0.0:
        return np.array([[wp[0, 0], wp[0, 1], 0.0]])

    n = int(math.floor(total / spacing + 1e-9)) + 1
    s = np.minimum(np.arange(n) * spacing, total)
    cum = np.concatenate([[0.0], np.cumsum(lengths[moving])])
    k = np.clip(np.searchsorted(cum, s, side='right') - 1, 0, len(moving) - 1)
    segs = moving[k]
    frac = (s - cum[k]) / lengths[segs]
    xy = wp[segs] + frac[:, None] * seg[segs]
    heading = np.arctan2(seg[segs, 1], seg[segs, 0])
    return np.column_stack([xy, heading])


def check_trajectory(w, waypoints):
    wp = np.asarray(waypoints, dtype=np.float64).reshape(-1, 2)
    free = w.is_free(wp)
    for i in range(len(wp)):
        if not free[i]:
            raise PreconditionError(f"Waypoint {i} {wp[i].tolist()} is not in free space")
    for i in range(len(wp) - 1):
        if segments_cross(wp[i], wp[i + 1], w.seg_a, w.seg_b):
            raise PreconditionError(f"Trajectory segment {i} {wp[i].tolist()} -> {wp[i + 1].tolist()} leaves free space")


def generate_dataset(w, waypoints, speed, scan_rate, params, noise_sigma, seed, path=None):
    '''
    Simulated scan log along a waypoint path traversed at constant speed.

    Args:
        w: World
        waypoints: [N, 2] path vertices
        speed: m/s
        scan_rate: scans per second
        params: ScanParams
        noise_sigma: range noise standard deviation (m)
        seed: base seed of the noise streams
        path: scan log to write, if given

    Returns:
        list of Scans
    '''
    if not speed > 0.0:
        raise ValueError(f"Invalid speed: {speed}")
    if not scan_rate > 0.0:
        raise ValueError(f"Invalid scan_rate: {scan_rate}")
    check_trajectory(w, waypoints)

    scans = []
    for k, pose in enumerate(trajectory_poses(waypoints, speed / scan_rate)):
        scan = raycast(w, pose, params, noise_sigma, seed, scan_index=k)
        scan.t = k / scan_rate
        scans.append(scan)
    if path is not None:
        write_scan_log(path, scans)
    return scans
#!SECTION
