# SECTION: Necessary imports
from collections import defaultdict

import numpy as np
import scipy.spatial as sp

from .errors import PreconditionError
#!SECTION

# SECTION: Constants
SITE_JITTER = 1e-9      # meters, deterministic perturbation against degenerate (cocircular) site sets
BOX_MARGIN = 1.0        # meters added around the sites' bounding box when clipping Voronoi edges
TIE_TOL = 1e-12
#!SECTION

# SECTION: Geometry helpers
def clip_line_to_box(m, d, t_lo, t_hi, lo, hi):
    '''
    Liang-Barsky clipping of the parametric segment m + t d, t in [t_lo, t_hi], to the box [lo, hi].
    Returns the clipped parameter interval or None when the segment misses the box.
    '''
    for k in range(2):
        if abs(d[k]) < 1e-15:
            if m[k] < lo[k] or m[k] > hi[k]:
                return None
            continue
        t0 = (lo[k] - m[k]) / d[k]
        t1 = (hi[k] - m[k]) / d[k]
        if t0 > t1:
            t0, t1 = t1, t0
        t_lo, t_hi = max(t_lo, t0), min(t_hi, t1)
    if t_hi <= t_lo:
        return None
    return t_lo, t_hi
#!SECTION

# SECTION: Partition index over all primary pseudo-inputs
class PartitionIndex:
    '''
    Areas of responsibility as the Voronoi cells of every primary PI in the ensemble.

    Args:
        sites: [N, 2] primary PI locations
        owners: [N] expert id owning each site
    '''
    def __init__(self, sites, owners):
        self.sites = np.asarray(sites, dtype=np.float64).reshape(-1, 2)
        self.owners = np.asarray(owners, dtype=np.int64).reshape(-1)
        assert len(self.sites) == len(self.owners), "Every site needs exactly one owner"
        if len(self.sites) == 0:
            raise PreconditionError("A partition index needs at least one site")

        self.expert_ids = sorted(set(self.owners.tolist()))
        self.tree = sp.cKDTree(self.sites)
        self.expert_trees = {i: sp.cKDTree(self.sites[self.owners == i]) for i in self.expert_ids}
        self.box_lo = self.sites.min(axis=0) - BOX_MARGIN
        self.box_hi = self.sites.max(axis=0) + BOX_MARGIN
        self._adjacency, self._ridges = self._build_adjacency()

    @classmethod
    def from_experts(cls, experts):
        """Builds the index from a mapping expert id -> Expert."""
        sites, owners = [], []
        for eid in sorted(experts):
            primary = experts[eid].primary_pis
            sites.append(primary)
            owners.append(np.full(len(primary), eid, dtype=np.int64))
        return cls(np.concatenate(sites), np.concatenate(owners))

    def __len__(self):
        return len(self.sites)

    # SECTION: Nearest-site queries
    def responsible_experts(self, P):
        '''
        Owner of the nearest site for every row of P. Ties go to the lowest expert id, then the
        lowest site index, however many sites are tied.
        '''
        P = np.asarray(P, dtype=np.float64).reshape(-1, 2)
        if len(P) == 0:
            return np.zeros(0, dtype=np.int64)
        dists, idx = self.tree.query(P)
        radius = dists + TIE_TOL * np.maximum(1.0, dists)
        best = np.empty(len(P), dtype=np.int64)
        for i, tied in enumerate(self.tree.query_ball_point(P, radius)):
            tied = np.asarray(tied, dtype=np.int64) if len(tied) else np.array([idx[i]])
            best[i] = tied[np.lexsort((tied, self.owners[tied]))[0]]
        return self.owners[best]

    def responsible_expert(self, p):
        return int(self.responsible_experts(np.asarray(p).reshape(1, 2))[0])

    def nearest_distance(self, P):
        """Distance from every row of P to the nearest site of any expert."""
        P = np.asarray(P, dtype=np.float64).reshape(-1, 2)
        if len(P) == 0:
            return np.zeros(0)
        return self.tree.query(P)[0]

    def expert_distance(self, P, eid):
        """Distance from every row of P to the nearest site of expert `eid`."""
        self._check_expert(eid)
        P = np.asarray(P, dtype=np.float64).reshape(-1, 2)
        if len(P) == 0:
            return np.zeros(0)
        return self.expert_trees[eid].query(P)[0]
    #!SECTION

    # SECTION: Voronoi adjacency and boundary sampling
    def _build_adjacency(self):
        adjacency = defaultdict(set)
        ridges = defaultdict(list)
        self._vertices = np.zeros((0, 2))
        self._center = 0.5 * (self.box_lo + self.box_hi)
        if len(self.expert_ids) < 2:
            return adjacency, ridges

        n = len(self.sites)
        jitter = np.random.default_rng(n).uniform(-SITE_JITTER, SITE_JITTER, size=(n, 2))

        # Four far-away ghost sites keep Qhull happy for 1, 2 or collinear sites and make every
        # ridge between two real sites finite
        far = 10.0 * (np.max(self.box_hi - self.box_lo) + 10.0)
        ghosts = self._center + far * np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        vor = sp.Voronoi(np.vstack([self.sites + jitter, ghosts]))
        self._vertices = vor.vertices

        for (a, b), verts in zip(vor.ridge_points, vor.ridge_vertices):
            if a >= n or b >= n or self.owners[a] == self.owners[b]:
                continue
            i, j = int(self.owners[a]), int(self.owners[b])
            adjacency[i].add(j)
            adjacency[j].add(i)
            ridges[(min(i, j), max(i, j))].append((int(a), int(b), list(verts)))
        return adjacency, ridges

    def _check_expert(self, eid):
        if eid not in self.expert_trees:
            raise PreconditionError(f"Expert {eid} owns no site in the partition")

    def neighbors(self, eid):
        self._check_expert(eid)
        return set(self._adjacency.get(eid, set()))

    def _edge_interval(self, a, b, verts):
        # Exact perpendicular bisector of the two sites, parametrized as m + t d
        pa, pb = self.sites[a], self.sites[b]
        m = 0.5 * (pa + pb)
        axis = pb - pa
        d = np.array([-axis[1], axis[0]]) / np.linalg.norm(axis)

        finite = [v for v in verts if v >= 0]
        ts = [float(np.dot(self._vertices[v] - m, d)) for v in finite]
        if len(finite) == 2:
            t_lo, t_hi = min(ts), max(ts)
        elif len(finite) == 1:
            # Infinite ridge: runs from its finite vertex away from the site set
            if np.dot(m - self._center, d) >= 0:
                t_lo, t_hi = ts[0], np.inf
            else:
                t_lo, t_hi = -np.inf, ts[0]
        else:
            t_lo, t_hi = -np.inf, np.inf
        clipped = clip_line_to_box(m, d, t_lo, t_hi, self.box_lo, self.box_hi)
        return m, d, clipped

    def boundary_edges(self, i, j):
        '''
        Clipped Voronoi edges between the cells of experts i and j, as a list of
        (site of i, site of j, start point, end point).
        '''
        if j not in self.neighbors(i):
            raise PreconditionError(f"Experts {i} and {j} are not neighbors")
        edges = []
        for a, b, verts in self._ridges[(min(i, j), max(i, j))]:
            if self.owners[a] != i:
                a, b = b, a
            m, d, clipped = self._edge_interval(a, b, verts)
            if clipped is None:
                continue
            t_lo, t_hi = clipped
            edges.append((a, b, m + t_lo * d, m + t_hi * d))
        return edges

    def boundary_samples(self, i, j, k_per_edge):
        '''
        `k_per_edge` points uniformly spaced on every clipped Voronoi edge separating a site of
        expert i from a site of expert j.

        Returns:
            [N, 2] sample locations
        '''
        assert k_per_edge >= 1, f"k_per_edge must be positive, got {k_per_edge}"
        positions = (np.arange(k_per_edge) + 0.5) / k_per_edge
        samples = [start + positions[:, None] * (end - start) for _, _, start, end in self.boundary_edges(i, j)]
        if not samples:
            return np.zeros((0, 2))
        return np.concatenate(samples)
    #!SECTION
#!SECTION
