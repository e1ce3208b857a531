# SECTION: Necessary imports
from dataclasses import asdict

import numpy as np
from lightning.pytorch.utilities.rank_zero import rank_zero_debug

from .errors import NumericalFailure, PreconditionError
from .expert import EnsembleConfig, Expert, contract, extend, harmonize, pooled_discrepancy, subdivide, update_expert
from .partition import PartitionIndex
from .sparse_gp import SparseGP
#!SECTION

# SECTION: Constants
MIX_EPS = 1e-6
#!SECTION

# SECTION: Helpers
def thin_points(points, min_dist):
    """Greedy thinning in input order: keeps a point only if it is min_dist away from every kept one."""
    kept = []
    for k, p in enumerate(points):
        if all(np.linalg.norm(p - points[q]) >= min_dist for q in kept):
            kept.append(k)
    return np.asarray(kept, dtype=np.int64)


def init_indices(n, n_init):
    """n_init entries spread evenly over n by a fixed stride (all of them when n <= n_init)."""
    if n <= n_init:
        return np.arange(n)
    return (np.arange(n_init) * n) // n_init
#!SECTION

# SECTION: Ensemble of local experts
class Ensemble:
    '''
    All local experts plus the partition of the plane into their areas of responsibility.
    The ensemble only holds models: no raw measurement history is kept between scans.
    '''
    def __init__(self, experts, cfg, scan_counter=0, next_id=None):
        self.experts = {e.id: e for e in experts}
        assert len(self.experts) == len(experts), "Expert ids must be unique"
        self.cfg = cfg
        self.scan_counter = scan_counter
        self.next_id = max(self.experts) + 1 if next_id is None else next_id
        self.rebuild_index()

    @classmethod
    def init(cls, first_batch, cfg):
        '''
        One expert fit to (up to) cfg.n_init entries of the first batch. Its primary PIs are the
        surface locations among those entries, thinned to cfg.min_pi_dist.
        '''
        if len(first_batch) == 0:
            raise PreconditionError("Cannot initialize an ensemble from an empty batch")
        subset = first_batch.subset(init_indices(len(first_batch), cfg.n_init))
        surface = subset.locations[subset.surface_mask]
        if len(surface) == 0:
            surface = subset.locations
        pis = surface[thin_points(surface, cfg.min_pi_dist)]
        try:
            gp = SparseGP.fitc_init(pis, subset, cfg.noise, cfg.kp)
        except NumericalFailure as err:
            raise err.with_context(expert_id=0) from err
        return cls([Expert(0, gp, len(pis))], cfg, next_id=1)

    def rebuild_index(self):
        self.idx = PartitionIndex.from_experts(self.experts)

    # SECTION: Bookkeeping
    @property
    def ids(self):
        return sorted(self.experts)

    @property
    def n_pi_total(self):
        return sum(len(e.gp) for e in self.experts.values())

    @property
    def n_pi_primary(self):
        return sum(e.primary_count for e in self.experts.values())

    def _each_expert(self, op):
        # Applies op to every expert in ascending id order, attaching the id to numerical failures
        for eid in self.ids:
            try:
                self.experts[eid] = op(self.experts[eid])
            except NumericalFailure as err:
                raise err.with_context(expert_id=eid) from err
    #!SECTION

    # SECTION: Per-scan algorithm
    def step(self, batch):
        '''
        Processes one measurement batch: extend, update, contract, subdivide, harmonize, with the
        partition rebuilt after extension, contraction and subdivision.
        '''
        cfg = self.cfg

        # Extension against the partition as it was before this scan
        consumed = {}
        def _extend(e):
            new, used = extend(e, batch, self.idx, cfg)
            consumed[e.id] = used
            return new
        self._each_expert(_extend)
        self.rebuild_index()

        # Update, then contraction
        self._each_expert(lambda e: update_expert(e, batch, self.idx, cfg, exclude=consumed.get(e.id, ())))
        self._each_expert(lambda e: contract(e, batch, self.idx, cfg))
        self.rebuild_index()

        # Subdivision
        for eid in self.ids:
            e = self.experts[eid]
            if e.primary_count <= cfg.n_max:
                continue
            parts = subdivide(e, cfg, self.next_id)
            self.next_id += len(parts)
            del self.experts[eid]
            for part in parts:
                self.experts[part.id] = part
        self.rebuild_index()

        self.harmonize_round()
        self.scan_counter += 1
        return self

    def harmonize_round(self):
        '''
        Harmonizes every expert whose pooled boundary discrepancy exceeds t_del against a
        snapshot of the neighbors taken before any of them changes.

        Returns:
            ids of the harmonized experts
        '''
        cfg = self.cfg
        snapshot = dict(self.experts)
        view = _EnsembleView(snapshot, self.idx)
        harmonized = []
        for eid in self.ids:
            try:
                e = self.experts[eid]
                disc = pooled_discrepancy(e, view, cfg)
                if disc > cfg.t_del:
                    rank_zero_debug(f"Expert {eid}: boundary discrepancy {disc:.4f} above t_del")
                    self.experts[eid] = harmonize(e, view, cfg, snapshot=snapshot)
                    harmonized.append(eid)
            except NumericalFailure as err:
                raise err.with_context(expert_id=eid) from err
        return harmonized
    #!SECTION

    # SECTION: Map prediction
    def predict_individual(self, Xs, return_owners=False):
        '''
        Every trial point is served by the posterior mean of its responsible expert.

        Returns:
            [S] means, plus the [S] responsible expert ids if return_owners is True
        '''
        Xs = np.asarray(Xs, dtype=np.float64).reshape(-1, 2)
        owners = self.idx.responsible_experts(Xs)
        mean = np.zeros(len(Xs))
        for eid in self.ids:
            mask = owners == eid
            if mask.any():
                mean[mask] = self.experts[eid].gp.predict_mean(Xs[mask]).numpy()
        if return_owners:
            return mean, owners
        return mean

    def mixture_weights(self, Xs):
        '''
        Normalized inverse-squared-distance weights of every expert at every trial point. Experts
        contribute when their nearest primary PI is within mix_radius; the responsible expert
        always does.

        Returns:
            ([S, E] weights, list of the E expert ids in column order)
        '''
        Xs = np.asarray(Xs, dtype=np.float64).reshape(-1, 2)
        ids = self.ids
        owners = self.idx.responsible_experts(Xs)
        weights = np.zeros((len(Xs), len(ids)))
        for col, eid in enumerate(ids):
            d = self.idx.expert_distance(Xs, eid)
            contributes = (d <= self.cfg.mix_radius) | (owners == eid)
            weights[:, col] = np.where(contributes, 1.0 / (d * d + MIX_EPS), 0.0)
        return weights / weights.sum(axis=1, keepdims=True), ids

    def predict_mixture(self, Xs):
        Xs = np.asarray(Xs, dtype=np.float64).reshape(-1, 2)
        weights, ids = self.mixture_weights(Xs)
        mean = np.zeros(len(Xs))
        for col, eid in enumerate(ids):
            mask = weights[:, col] > 0.0
            if mask.any():
                mean[mask] += weights[mask, col] * self.experts[eid].gp.predict_mean(Xs[mask]).numpy()
        return mean

    def predict(self, Xs, mode='individual'):
        if mode == 'individual':
            return self.predict_individual(Xs)
        if mode == 'mixture':
            return self.predict_mixture(Xs)
        raise ValueError(f"Unknown prediction mode: {mode}")
    #!SECTION

    # SECTION: Serialization
    def to_dict(self):
        return {
            'config': asdict(self.cfg),
            'scan_counter': self.scan_counter,
            'next_id': self.next_id,
            'experts': [self.experts[eid].to_dict() for eid in self.ids],
        }

    @classmethod
    def from_dict(cls, state):
        cfg = EnsembleConfig(**state['config'])
        experts = [Expert.from_dict(s, cfg) for s in state['experts']]
        if not experts:
            raise PreconditionError("A checkpoint must hold at least one expert")
        return cls(experts, cfg, scan_counter=int(state['scan_counter']), next_id=state.get('next_id'))
    #!SECTION
#!SECTION

# SECTION: Read-only view used during harmonization
class _EnsembleView:
    def __init__(self, experts, idx):
        self.experts = experts
        self.idx = idx
#!SECTION
