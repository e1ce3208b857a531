import numpy as np
import pytest
import torch
from scipy.spatial.distance import pdist

from modules.ensemble import Ensemble
from modules.errors import PreconditionError
from modules.expert import (
    EnsembleConfig,
    Expert,
    boundary_discrepancy,
    contract,
    extend,
    farthest_point_subsample,
    harmonize,
    pooled_discrepancy,
    removal_errors,
    subdivide,
    update_expert,
    update_mask,
)
from modules.measurements import MeasurementBatch
from modules.partition import PartitionIndex
from modules.sparse_gp import SparseGP


def single_expert(pis, batch=None, cfg=None):
    cfg = cfg or EnsembleConfig()
    pis = np.asarray(pis, dtype=np.float64)
    if batch is None:
        gp = SparseGP.prior(pis, cfg.kp, cfg.noise)
    else:
        gp = SparseGP.fitc_init(pis, batch, cfg.noise, cfg.kp)
    e = Expert(0, gp, len(pis))
    return e, PartitionIndex.from_experts({0: e})


class TestConfig:
    """Algorithm parameters."""

    def test_defaults(self):
        """Defaults of the mapping algorithm."""
        cfg = EnsembleConfig()
        assert (cfg.sigma2, cfg.t_add, cfg.t_del, cfg.min_pi_dist) == (0.01, 0.02, 0.01, 0.1)
        assert (cfg.n_min, cfg.n_new, cfg.n_max, cfg.kernel_R) == (10, 50, 100, 20.0)
        assert cfg.kp.R == 20.0 and cfg.noise.sigma2 == 0.01

    @pytest.mark.parametrize("overrides", [
        {'n_min': 50}, {'n_new': 120}, {'sigma2': 0.0}, {'min_pi_dist': -0.1}, {'k_per_edge': 0},
    ])
    def test_invalid(self, overrides):
        """Inconsistent sizes and non-positive lengths are rejected."""
        with pytest.raises(ValueError):
            EnsembleConfig(**overrides)


class TestExtend:
    """Greedy insertion of primary PIs."""

    def test_surface_candidate_of_prior(self):
        """A prior expert already predicts a surface entry (y = 0) exactly: no insertion."""
        e, idx = single_expert([[0.0, 0.0]])
        batch = MeasurementBatch.from_points([[1.0, 0.0]], [0.0])
        new, consumed = extend(e, batch, idx, EnsembleConfig())
        assert consumed == [] and new.primary_count == 1

    def test_auxiliary_candidate_of_prior(self):
        """An auxiliary entry (y = 0.1) is off by more than t_add and becomes a PI."""
        e, idx = single_expert([[0.0, 0.0]])
        batch = MeasurementBatch.from_points([[1.0, 0.0]], [0.1])
        new, consumed = extend(e, batch, idx, EnsembleConfig())
        assert consumed == [0]
        assert new.primary_count == 2
        np.testing.assert_array_equal(new.primary_pis[1], [1.0, 0.0])
        assert abs(new.gp.predict_mean([[1.0, 0.0]]).item() - 0.1) < 0.1

    def test_well_predicted_batch(self, wall_batch):
        """A batch the expert already predicts within t_add leaves it unchanged."""
        batch = wall_batch(jitter=0.0)
        pis = np.column_stack([np.arange(0.25, 4.0, 0.25), np.zeros(15)])
        e, idx = single_expert(pis, batch)
        cfg = EnsembleConfig(t_add=1.0)
        new, consumed = extend(e, batch, idx, cfg)
        assert consumed == []
        assert torch.equal(new.gp.pis, e.gp.pis)

    @pytest.mark.parametrize("seed", range(3))
    def test_min_distance(self, wall_batch, seed):
        """New primary PIs keep min_pi_dist from each other and from the existing ones."""
        cfg = EnsembleConfig()
        e, idx = single_expert([[0.0, 0.0]])
        new, consumed = extend(e, wall_batch(seed), idx, cfg)
        assert len(consumed) > 0
        assert new.primary_count == 1 + len(consumed)
        assert np.min(pdist(new.primary_pis)) >= cfg.min_pi_dist - 1e-12

    def test_only_own_region(self):
        """Entries in another expert's region are never consumed."""
        cfg = EnsembleConfig()
        e0 = Expert(0, SparseGP.prior([[0.0, 0.0]], cfg.kp, cfg.noise), 1)
        e1 = Expert(1, SparseGP.prior([[4.0, 0.0]], cfg.kp, cfg.noise), 1)
        idx = PartitionIndex.from_experts({0: e0, 1: e1})
        batch = MeasurementBatch.from_points([[3.5, 0.0], [0.5, 0.0]], [0.1, 0.1])
        _, consumed = extend(e0, batch, idx, cfg)
        assert consumed == [1]

    def test_empty_batch(self):
        """An empty batch is a no-op."""
        e, idx = single_expert([[0.0, 0.0]])
        new, consumed = extend(e, MeasurementBatch.empty(), idx, EnsembleConfig())
        assert new is e and consumed == []


class TestUpdate:
    """Conditioning an expert on the batch."""

    def test_empty_batch(self):
        """An empty batch leaves the expert unchanged."""
        e, idx = single_expert([[0.0, 0.0]])
        assert update_expert(e, MeasurementBatch.empty(), idx, EnsembleConfig()) is e

    def test_consumed_entry_is_skipped(self):
        """An entry consumed as a PI is not applied again, although applying it would change the model."""
        cfg = EnsembleConfig()
        e, idx = single_expert([[0.0, 0.0]])
        batch = MeasurementBatch.from_points([[1.0, 0.0]], [0.1])
        grown, consumed = extend(e, batch, idx, cfg)
        idx = PartitionIndex.from_experts({0: grown})

        updated = update_expert(grown, batch, idx, cfg, exclude=consumed)
        torch.testing.assert_close(updated.gp.mean, grown.gp.mean, atol=0.0, rtol=0.0)
        again = grown.gp.update([1.0, 0.0], 0.1)
        assert torch.max(torch.abs(again.mean - grown.gp.mean)).item() > 1e-9

    def test_margin(self):
        """An entry far outside the expert's region is skipped; the owner takes it."""
        cfg = EnsembleConfig(update_margin=1.0)
        e0 = Expert(0, SparseGP.prior([[0.0, 0.0]], cfg.kp, cfg.noise), 1)
        e1 = Expert(1, SparseGP.prior([[10.0, 0.0]], cfg.kp, cfg.noise), 1)
        idx = PartitionIndex.from_experts({0: e0, 1: e1})
        batch = MeasurementBatch.from_points([[10.0, 5.0], [5.5, 0.0]], [0.1, 0.1])

        np.testing.assert_array_equal(update_mask(e0, batch, idx, cfg), [False, True])
        np.testing.assert_array_equal(update_mask(e1, batch, idx, cfg), [True, True])
        far_only = batch.subset([0])
        assert update_expert(e0, far_only, idx, cfg) is e0
        assert not torch.equal(update_expert(e1, far_only, idx, cfg).gp.mean, e1.gp.mean)


class TestContract:
    """Greedy removal of primary PIs."""

    def test_count_guard(self, wall_batch):
        """An expert with n_min primary PIs is left alone."""
        batch = wall_batch()
        e, idx = single_expert([[0.5, 0.0], [1.5, 0.0]], batch)
        assert contract(e, batch, idx, EnsembleConfig(n_min=2, n_new=3, n_max=4)) is e

    def test_empty_batch(self, wall_batch):
        """Without measurements no PI is removed."""
        pis = np.column_stack([np.arange(0.25, 4.0, 0.25), np.zeros(15)])
        e, idx = single_expert(pis, wall_batch())
        assert contract(e, MeasurementBatch.empty(), idx, EnsembleConfig(n_min=2, t_del=10.0)) is e

    def test_expert_without_measurements_kept(self, two_experts):
        """An expert whose region got no measurement of the scan is not contracted."""
        cfg = EnsembleConfig(n_min=2, n_new=20, n_max=40, t_del=10.0)
        ens, wall = two_experts(cfg=cfg)
        batch = wall.subset(np.flatnonzero(wall.locations[:, 0] > 2.5))
        assert np.all(ens.idx.responsible_experts(batch.locations) == 1)
        assert contract(ens.experts[0], batch, ens.idx, cfg) is ens.experts[0]
        assert contract(ens.experts[1], batch, ens.idx, cfg).primary_count == cfg.n_min

    def test_flat_surface_shrinks_to_minimum(self, wall_batch):
        """On surface-only data every removal is free: the expert shrinks to n_min."""
        wall = wall_batch(jitter=0.0)
        batch = wall.subset(np.flatnonzero(wall.surface_mask))
        pis = np.column_stack([np.arange(0.25, 4.0, 0.25), np.zeros(15)])
        e, idx = single_expert(pis, batch)
        cfg = EnsembleConfig(n_min=2, n_new=20, n_max=40)
        new = contract(e, batch, idx, cfg)
        assert new.primary_count == cfg.n_min
        assert new.n_secondary == 0

    def test_zero_threshold(self, wall_batch):
        """With t_del = 0 nothing qualifies for removal."""
        batch = wall_batch()
        pis = np.column_stack([np.arange(0.25, 4.0, 0.25), np.zeros(15)])
        e, idx = single_expert(pis, batch)
        assert contract(e, batch, idx, EnsembleConfig(n_min=2, t_del=0.0)) is e

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        """The removal sequence equals a greedy loop that refits the model for every candidate."""
        rng = np.random.default_rng(seed)
        cfg = EnsembleConfig(n_min=1, n_new=2, n_max=3, t_del=0.05)
        n_pis = int(rng.integers(3, 7))
        grid = np.array([[x, y] for x in range(3) for y in range(2)], dtype=np.float64) * 1.5
        pis = grid[rng.choice(len(grid), n_pis, replace=False)] + rng.uniform(-0.2, 0.2, size=(n_pis, 2))
        X = rng.uniform(0, 6, size=(25, 2))
        batch = MeasurementBatch.from_points(X, 0.05 * X[:, 0] - 0.1 * X[:, 1] + rng.normal(0, 0.01, 25))
        e, idx = single_expert(pis, batch, cfg)

        # Brute force: every candidate removal is refit from scratch
        gp, X_star, mu_star, removed = e.gp, pis.copy(), e.gp.mean.numpy().copy(), []
        X_ref_meas = batch.locations[idx.responsible_experts(batch.locations) == 0]
        y_meas = batch.values[idx.responsible_experts(batch.locations) == 0]
        while len(gp) > cfg.n_min:
            X_ref = np.concatenate([X_star, X_ref_meas])
            targets = np.concatenate([mu_star, y_meas])
            errors = np.array([
                np.mean(np.abs(targets - gp.remove(p).predict_mean(X_ref).numpy())) for p in range(len(gp))
            ])
            np.testing.assert_allclose(removal_errors(gp, len(gp), X_ref, targets), errors, atol=1e-8)
            best = int(np.argmin(errors))
            if not errors[best] < cfg.t_del:
                break
            removed.append(X_star[best].tolist())
            gp = gp.remove(best)
            X_star, mu_star = np.delete(X_star, best, axis=0), np.delete(mu_star, best)

        new = contract(e, batch, idx, cfg)
        np.testing.assert_array_equal(new.primary_pis, X_star)
        assert new.primary_count == n_pis - len(removed)


class TestSubdivide:
    """Splitting oversized experts."""

    def blob_expert(self, n=120):
        rng = np.random.default_rng(0)
        pis = np.concatenate([rng.normal(0, 0.5, size=(n // 2, 2)), rng.normal([10, 0], 0.5, size=(n // 2, 2))])
        cfg = EnsembleConfig()
        gp = SparseGP(pis, np.arange(n, dtype=np.float64), np.eye(n), cfg.kp, cfg.noise)
        return Expert(0, gp, n)

    def test_at_limit(self):
        """primary_count == n_max is not split."""
        e = self.blob_expert(100)
        assert subdivide(e, EnsembleConfig(), first_id=1) == [e]

    def test_two_blobs(self):
        """120 PIs in two blobs split into at least 3 experts of at most 50, conserving PIs and means."""
        e = self.blob_expert()
        parts = subdivide(e, EnsembleConfig(), first_id=5)
        assert len(parts) >= 3
        assert [p.id for p in parts] == list(range(5, 5 + len(parts)))
        assert all(p.primary_count <= 50 and p.n_secondary == 0 for p in parts)

        pis = np.concatenate([p.primary_pis for p in parts])
        means = np.concatenate([p.gp.mean.numpy() for p in parts])
        order = np.argsort(means)
        np.testing.assert_array_equal(means[order], np.arange(120))
        np.testing.assert_array_equal(pis[order], e.primary_pis)

    def test_secondary_pis_dropped(self, two_experts):
        """Secondary PIs do not survive a split."""
        cfg = EnsembleConfig(n_min=2, n_new=3, n_max=6)
        ens, _ = two_experts()
        e = harmonize(ens.experts[0], ens, cfg)
        assert e.n_secondary > 0
        parts = subdivide(e, cfg, first_id=2)
        assert sum(p.primary_count for p in parts) == 7
        assert all(p.n_secondary == 0 for p in parts)


class TestDiscrepancy:
    """Boundary error between neighbors."""

    def test_identical_models(self):
        """Two experts carrying the same model disagree nowhere."""
        cfg = EnsembleConfig()
        gp = SparseGP.prior([[0.0, 0.0], [2.0, 0.0]], cfg.kp, cfg.noise).update([1.0, 0.3], 0.2)
        e0 = Expert(0, gp, 1, [1])
        e1 = Expert(1, gp.select([1, 0]), 1, [0])
        ens = Ensemble([e0, e1], cfg)
        np.testing.assert_allclose(boundary_discrepancy(e0, 1, ens, cfg), 0.0, atol=1e-9)

    def test_constant_offset(self, constant_gp):
        """Constant predictions 0.1 and 0 differ by 0.1 at every boundary sample."""
        cfg = EnsembleConfig()
        e0 = Expert(0, constant_gp([[0.0, 0.0]], 0.1), 1)
        e1 = Expert(1, constant_gp([[2.0, 0.0]], 0.0), 1)
        ens = Ensemble([e0, e1], cfg)
        errors = boundary_discrepancy(e0, 1, ens, cfg)
        assert len(errors) == cfg.k_per_edge
        np.testing.assert_allclose(errors, 0.1)
        assert pooled_discrepancy(e0, ens, cfg) == pytest.approx(0.1)

    def test_pooled_mean(self, constant_gp, monkeypatch):
        """Pooling averages all samples of all neighbors together."""
        cfg = EnsembleConfig()
        experts = [Expert(i, constant_gp([p], 0.0), 1) for i, p in enumerate([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]])]
        ens = Ensemble(experts, cfg)
        fake = {1: np.zeros(5), 2: np.full(5, 0.2)}
        monkeypatch.setattr('modules.expert.boundary_discrepancy', lambda e, j, ens, cfg: fake[j])
        assert pooled_discrepancy(experts[0], ens, cfg) == pytest.approx(0.1)

    def test_non_neighbors(self, constant_gp):
        """Asking for the discrepancy with a non-neighbor is a precondition error."""
        cfg = EnsembleConfig()
        experts = [Expert(i, constant_gp([[float(i), 0.0]], 0.0), 1) for i in range(3)]
        ens = Ensemble(experts, cfg)
        with pytest.raises(PreconditionError):
            boundary_discrepancy(experts[0], 2, ens, cfg)


class TestHarmonize:
    """Secondary PIs copied from neighbors."""

    def test_lone_expert(self, wall_batch):
        """Without neighbors and secondary PIs the model stays as it is."""
        cfg = EnsembleConfig()
        e, _ = single_expert([[0.5, 0.0], [1.5, 0.0]], wall_batch(), cfg)
        ens = Ensemble([e], cfg)
        new = harmonize(e, ens, cfg)
        assert new.n_secondary == 0
        torch.testing.assert_close(new.gp.mean, e.gp.mean)

    @pytest.mark.parametrize("seed", range(5))
    def test_split_wall(self, split_wall, seed):
        '''
        Two experts fit to their own halves of a wall, one raised by 0.03, start above t_del.
        Harmonizing expert 0 keeps its primary PIs, copies secondary PIs from expert 1 that
        predict like it, and lowers the boundary discrepancy.
        '''
        ens, _ = split_wall(seed)
        cfg = ens.cfg
        e = ens.experts[0]
        before = pooled_discrepancy(e, ens, cfg)
        assert before > cfg.t_del
        new = harmonize(e, ens, cfg)

        np.testing.assert_array_equal(new.primary_pis, e.primary_pis)
        assert 0 < new.n_secondary <= cfg.n_secondary_per_neighbor
        assert new.secondary_origin == [1] * new.n_secondary
        ours = new.gp.predict_mean(new.secondary_pis)
        theirs = ens.experts[1].gp.predict_mean(new.secondary_pis)
        assert torch.max(torch.abs(ours - theirs)).item() < 0.05
        assert pooled_discrepancy(new, ens, cfg) <= before

    def test_split_wall_round(self, split_wall):
        """One harmonization round brings the split wall's discrepancy to t_del in at least 4 of 5 seeds."""
        settled = 0
        for seed in range(5):
            ens, _ = split_wall(seed)
            cfg = ens.cfg
            before = pooled_discrepancy(ens.experts[0], ens, cfg)
            assert ens.harmonize_round() == [0, 1]
            after = pooled_discrepancy(ens.experts[0], ens, cfg)
            assert after <= before
            settled += after <= cfg.t_del
        assert settled >= 4

    def test_round_skips_agreeing_experts(self, two_experts):
        """Experts fit to the same data agree on their boundary and are left alone."""
        ens, _ = two_experts()
        assert pooled_discrepancy(ens.experts[0], ens, ens.cfg) <= ens.cfg.t_del
        assert ens.harmonize_round() == []
        assert ens.experts[0].n_secondary == 0

    def test_refresh_replaces_secondaries(self, two_experts):
        """Harmonizing twice does not accumulate secondary PIs."""
        ens, _ = two_experts()
        once = harmonize(ens.experts[0], ens, ens.cfg)
        twice = harmonize(once, ens, ens.cfg)
        assert twice.n_secondary == once.n_secondary
        np.testing.assert_allclose(twice.secondary_pis, once.secondary_pis)

    def test_farthest_point_subsample(self):
        """Greedy max-min selection starting at the seed."""
        points = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 0.0], [2.0, 0.0]])
        assert farthest_point_subsample(points, 0, 3) == [0, 2, 3]
        assert farthest_point_subsample(points, 1, 10) == [1, 2, 0, 3]
