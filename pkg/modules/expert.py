# SECTION: Necessary imports
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.spatial as sp
import torch
from scipy.cluster.hierarchy import linkage, to_tree
from lightning.pytorch.utilities.rank_zero import rank_zero_debug, rank_zero_info

from .errors import PreconditionError
from .kernels import KernelParams, NoiseParams
from .sparse_gp import SparseGP
#!SECTION

# SECTION: Algorithm configuration
@dataclass
class EnsembleConfig:
    sigma2: float = 0.01
    t_add: float = 0.02
    t_del: float = 0.01
    min_pi_dist: float = 0.1
    n_min: int = 10
    n_new: int = 50
    n_max: int = 100
    kernel_R: float = 20.0
    aux_offset: float = 0.1
    scan_stride: int = 100
    k_per_edge: int = 5
    n_secondary_per_neighbor: int = 10
    update_margin: float = 1.0
    mix_radius: float = 2.0
    n_init: int = 50

    def __post_init__(self):
        for name in ('sigma2', 'min_pi_dist', 'kernel_R', 'aux_offset', 'update_margin', 'mix_radius'):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"Invalid {name}: {getattr(self, name)}")
        if not 0.0 <= self.t_add:
            raise ValueError(f"Invalid t_add: {self.t_add}")
        if not 0.0 <= self.t_del:
            raise ValueError(f"Invalid t_del: {self.t_del}")
        if not 1 <= self.n_min < self.n_new <= self.n_max:
            raise ValueError(f"Invalid expert sizes: need 1 <= n_min < n_new <= n_max, got {self.n_min}, {self.n_new}, {self.n_max}")
        for name in ('scan_stride', 'k_per_edge', 'n_secondary_per_neighbor', 'n_init'):
            if not getattr(self, name) >= 1:
                raise ValueError(f"Invalid {name}: {getattr(self, name)}")

    @property
    def kp(self):
        return KernelParams(self.kernel_R)

    @property
    def noise(self):
        return NoiseParams(self.sigma2)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]
#!SECTION

# SECTION: Expert
@dataclass
class Expert:
    '''
    A local sparse GP. The first `primary_count` PIs of `gp` are primary (they define the expert's
    area of responsibility); the rest are secondary copies of neighbors' primary PIs, with
    `secondary_origin` naming the neighbor each one came from.
    '''
    id: int
    gp: SparseGP
    primary_count: int
    secondary_origin: list = field(default_factory=list)

    def __post_init__(self):
        assert 1 <= self.primary_count <= len(self.gp), \
            f"Expert {self.id}: primary_count {self.primary_count} outside [1, {len(self.gp)}]"
        assert len(self.secondary_origin) == len(self.gp) - self.primary_count, \
            f"Expert {self.id}: {len(self.secondary_origin)} origins for {len(self.gp) - self.primary_count} secondary PIs"

    @property
    def primary_pis(self):
        return self.gp.pis[:self.primary_count].numpy()

    @property
    def secondary_pis(self):
        return self.gp.pis[self.primary_count:].numpy()

    @property
    def n_secondary(self):
        return len(self.gp) - self.primary_count

    def to_dict(self):
        return {
            'id': self.id,
            'primary_count': self.primary_count,
            'secondary_origin': list(self.secondary_origin),
            **self.gp.to_dict(),
        }

    @classmethod
    def from_dict(cls, state, cfg):
        gp = SparseGP.from_dict(state, cfg.kp, cfg.noise)
        return cls(int(state['id']), gp, int(state['primary_count']), [int(o) for o in state['secondary_origin']])
#!SECTION

# SECTION: Extension
def extend(e, batch, idx, cfg):
    '''
    Greedily turns the worst-predicted measurements of the expert's region into new primary PIs
    until every remaining candidate is predicted within t_add.

    Returns:
        (new Expert, indices of the batch entries consumed as PIs)
    '''
    if len(batch) == 0:
        return e, []
    owners = idx.responsible_experts(batch.locations)
    own_dist = sp.cKDTree(e.primary_pis).query(batch.locations)[0]
    all_dist = sp.cKDTree(e.gp.pis.numpy()).query(batch.locations)[0]
    candidates = np.flatnonzero((owners == e.id) & (own_dist >= cfg.min_pi_dist) & (all_dist > 1e-9))

    gp, primary_count, consumed = e.gp, e.primary_count, []
    while len(candidates):
        mu = gp.predict_mean(batch.locations[candidates]).numpy()
        errors = np.abs(batch.values[candidates] - mu)
        best = int(np.argmax(errors))
        if errors[best] < cfg.t_add:
            break

        j = int(candidates[best])
        x, y = batch.locations[j], batch.values[j]
        gp = gp.insert(x, position=primary_count).update(x, y)
        primary_count += 1
        consumed.append(j)

        # NOTE: the chosen entry itself is at distance 0 and drops out here too
        far_enough = np.linalg.norm(batch.locations[candidates] - x, axis=1) >= cfg.min_pi_dist
        candidates = candidates[far_enough]

    if consumed:
        rank_zero_debug(f"Expert {e.id}: inserted {len(consumed)} primary PIs")
    return Expert(e.id, gp, primary_count, list(e.secondary_origin)), consumed
#!SECTION

# SECTION: Update
def update_mask(e, batch, idx, cfg):
    """Entries within the expert's region dilated by update_margin."""
    own_dist = sp.cKDTree(e.primary_pis).query(batch.locations)[0]
    return own_dist - idx.nearest_distance(batch.locations) <= cfg.update_margin


def update_expert(e, batch, idx, cfg, exclude=()):
    '''
    Conditions the expert on every batch entry near its region, in batch order, skipping the
    entries it consumed as PIs during extension.
    '''
    if len(batch) == 0:
        return e
    mask = update_mask(e, batch, idx, cfg)
    mask[list(exclude)] = False
    selected = np.flatnonzero(mask)
    if len(selected) == 0:
        return e
    rank_zero_debug(f"Expert {e.id}: applying {len(selected)} updates")
    gp = e.gp.update_many(batch.locations[selected], batch.values[selected])
    return Expert(e.id, gp, e.primary_count, list(e.secondary_origin))
#!SECTION

# SECTION: Contraction
def removal_errors(gp, primary_count, X_ref, targets):
    '''
    Mean absolute error against `targets` at `X_ref` of every model with one primary PI removed.

    Returns:
        [primary_count] errors
    '''
    preds = gp.removal_predictions(X_ref, list(range(primary_count))).numpy()
    return np.mean(np.abs(targets[:, None] - preds), axis=0)


def contract(e, batch, idx, cfg):
    '''
    Greedily removes the primary PI whose removal changes the predictions least, as long as that
    change stays below t_del and more than n_min primary PIs remain.

    The reference set is the expert's primary PIs at entry (with their posterior means at entry)
    plus the batch entries in the expert's region (with their measured values). Only experts
    that received measurements in their region are contracted.
    '''
    if e.primary_count <= cfg.n_min or len(batch) == 0:
        return e
    in_region = idx.responsible_experts(batch.locations) == e.id
    if not in_region.any():
        return e
    X_meas, y_meas = batch.locations[in_region], batch.values[in_region]

    gp, primary_count = e.gp, e.primary_count
    X_star = e.primary_pis.copy()
    mu_star = e.gp.mean[:primary_count].numpy().copy()
    removed = 0
    while primary_count > cfg.n_min:
        X_ref = np.concatenate([X_star, X_meas])
        targets = np.concatenate([mu_star, y_meas])
        errors = removal_errors(gp, primary_count, X_ref, targets)
        best = int(np.argmin(errors))
        if not errors[best] < cfg.t_del:
            break
        gp = gp.remove(best)
        primary_count -= 1
        X_star = np.delete(X_star, best, axis=0)
        mu_star = np.delete(mu_star, best)
        removed += 1

    if removed == 0:
        return e
    rank_zero_debug(f"Expert {e.id}: removed {removed} primary PIs")
    return Expert(e.id, gp, primary_count, list(e.secondary_origin))
#!SECTION

# SECTION: Subdivision
def ward_clusters(points, max_size):
    '''
    Ward agglomerative clustering, with the dendrogram split top-down until no cluster has more
    than `max_size` members.

    Returns:
        list of sorted index arrays, in dendrogram pre-order
    '''
    if len(points) <= max_size:
        return [np.arange(len(points))]
    root = to_tree(linkage(points, method='ward'))
    clusters, stack = [], [root]
    while stack:
        node = stack.pop()
        if node.get_count() <= max_size:
            clusters.append(np.sort(np.asarray(node.pre_order(), dtype=np.int64)))
        else:
            stack.extend([node.get_right(), node.get_left()])
    return clusters


def subdivide(e, cfg, first_id):
    '''
    Splits an expert with more than n_max primary PIs into experts of at most n_new primary PIs.
    Secondary PIs and cross-cluster covariances are dropped.

    Args:
        e: the expert
        cfg: EnsembleConfig
        first_id: id of the first new expert; further ones count up from it

    Returns:
        list of Experts ([e] itself when no split is needed)
    '''
    if e.primary_count <= cfg.n_max:
        return [e]
    clusters = ward_clusters(e.primary_pis, cfg.n_new)
    experts = [Expert(first_id + k, e.gp.select(members), len(members)) for k, members in enumerate(clusters)]
    rank_zero_info(f"Expert {e.id} with {e.primary_count} primary PIs subdivided into experts "
                   f"{[x.id for x in experts]} of sizes {[x.primary_count for x in experts]}")
    return experts
#!SECTION

# SECTION: Harmonization
def boundary_discrepancy(e, j, ens, cfg):
    '''
    Absolute differences between the posterior means of expert `e` and neighbor `j` at samples
    on their shared Voronoi boundary.

    Args:
        e: the expert
        j: id of a neighbor of e
        ens: anything with `experts` (id -> Expert) and `idx` (PartitionIndex) attributes

    Returns:
        [N] per-sample absolute errors
    '''
    samples = ens.idx.boundary_samples(e.id, j, cfg.k_per_edge)
    if len(samples) == 0:
        return np.zeros(0)
    mine = e.gp.predict_mean(samples)
    theirs = ens.experts[j].gp.predict_mean(samples)
    return torch.abs(mine - theirs).numpy()


def pooled_discrepancy(e, ens, cfg):
    """Average boundary error over all neighbors' samples pooled together; 0 without neighbors."""
    errors = [boundary_discrepancy(e, j, ens, cfg) for j in sorted(ens.idx.neighbors(e.id))]
    errors = np.concatenate(errors) if errors else np.zeros(0)
    return float(errors.mean()) if len(errors) else 0.0


def farthest_point_subsample(points, seed_index, k):
    # Greedy max-min selection starting at seed_index
    chosen = [seed_index]
    dist = np.linalg.norm(points - points[seed_index], axis=1)
    while len(chosen) < min(k, len(points)):
        nxt = int(np.argmax(dist))
        if dist[nxt] <= 0.0:
            break
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def harmonize(e, ens, cfg, snapshot=None):
    '''
    Replaces the expert's secondary PIs with fresh copies of its neighbors' primary PIs, each
    conditioned on the neighbor's posterior mean at that location.

    Args:
        e: the expert
        ens: anything with `experts` and `idx` attributes
        cfg: EnsembleConfig
        snapshot: id -> Expert to read neighbor models from (default: ens.experts)
    '''
    experts = ens.experts if snapshot is None else snapshot
    gp = e.gp.select(list(range(e.primary_count))) if e.n_secondary else e.gp
    origins = []

    for j in sorted(ens.idx.neighbors(e.id)):
        neighbor = experts[j]
        candidates = neighbor.primary_pis
        keep = sp.cKDTree(gp.pis.numpy()).query(candidates)[0] >= cfg.min_pi_dist
        candidates = candidates[keep]
        if len(candidates) == 0:
            continue

        samples = ens.idx.boundary_samples(e.id, j, cfg.k_per_edge)
        if len(samples):
            seed_index = int(np.argmin(sp.cKDTree(samples).query(candidates)[0]))
        else:
            seed_index = int(np.argmin(np.linalg.norm(candidates - e.primary_pis.mean(axis=0), axis=1)))
        chosen = candidates[farthest_point_subsample(candidates, seed_index, cfg.n_secondary_per_neighbor)]

        targets = neighbor.gp.predict_mean(chosen)
        for x, y in zip(chosen, targets.tolist()):
            gp = gp.insert(x).update(x, y)
            origins.append(j)

    rank_zero_info(f"Expert {e.id} harmonized with {len(origins)} secondary PIs")
    return Expert(e.id, gp, e.primary_count, origins)
#!SECTION
