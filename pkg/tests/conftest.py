import json

import numpy as np
import pytest
import torch

from modules.ensemble import Ensemble
from modules.expert import EnsembleConfig, Expert
from modules.kernels import DTYPE, KernelParams, NoiseParams, as_points
from modules.measurements import AUXILIARY, SURFACE, MeasurementBatch
from modules.simulator import OBSTACLE, OUTER, Polygon, World, square_room
from modules.sparse_gp import SparseGP


# SECTION: Fixture builders
def make_wall_batch(seed=0, x_max=4.0, spacing=0.1, jitter=0.005, aux_offset=0.1):
    '''
    Straight wall along y = 0 seen from +y: one surface entry (value 0) and one auxiliary entry
    (value aux_offset) every `spacing` meters, surface locations jittered across the wall.
    '''
    rng = np.random.default_rng(seed)
    xs = np.arange(0.05, x_max, spacing)
    surface = np.column_stack([xs, rng.normal(0.0, jitter, len(xs)) if jitter > 0 else np.zeros(len(xs))])
    locations = np.empty((2 * len(xs), 2))
    locations[0::2] = surface
    locations[1::2] = surface + [0.0, aux_offset]
    values = np.tile([0.0, aux_offset], len(xs))
    kinds = np.tile([SURFACE, AUXILIARY], len(xs))
    return MeasurementBatch(locations, values, kinds)


def make_two_experts(seed=0, cfg=None):
    '''
    Two experts splitting the wall fixture at x = 2: expert 0 owns primary PIs at x = 0.25 ... 1.75
    and expert 1 at x = 2.25 ... 3.75, both fit to the whole wall.
    '''
    cfg = cfg or EnsembleConfig(n_min=2, n_new=20, n_max=40)
    batch = make_wall_batch(seed)
    left = np.column_stack([np.arange(0.25, 2.0, 0.25), np.zeros(7)])
    right = left + [2.0, 0.0]
    experts = [
        Expert(0, SparseGP.fitc_init(left, batch, cfg.noise, cfg.kp), len(left)),
        Expert(1, SparseGP.fitc_init(right, batch, cfg.noise, cfg.kp), len(right)),
    ]
    return Ensemble(experts, cfg), batch


def make_split_wall(seed=0, cfg=None, offset=0.03):
    '''
    The two experts of make_two_experts, each fit only to the wall entries on its own side of
    x = 2, with the right side's values raised by `offset`. The experts disagree by about
    `offset` along their shared boundary.
    '''
    cfg = cfg or EnsembleConfig(n_min=2, n_new=20, n_max=40)
    batch = make_wall_batch(seed)
    on_right = batch.locations[:, 0] > 2.0
    batch.values[on_right] += offset
    left = np.column_stack([np.arange(0.25, 2.0, 0.25), np.zeros(7)])
    right = left + [2.0, 0.0]
    experts = [
        Expert(0, SparseGP.fitc_init(left, batch.subset(np.flatnonzero(~on_right)), cfg.noise, cfg.kp), len(left)),
        Expert(1, SparseGP.fitc_init(right, batch.subset(np.flatnonzero(on_right)), cfg.noise, cfg.kp), len(right)),
    ]
    return Ensemble(experts, cfg), batch


class ConstantGP(SparseGP):
    """Prior sparse GP whose posterior mean is replaced by a constant."""
    def __init__(self, pis, value, kp=KernelParams(), noise=NoiseParams()):
        base = SparseGP.prior(pis, kp, noise)
        super().__init__(base.pis, base.mean, base.cov, kp, noise)
        self.value = value

    def predict_mean(self, Xs):
        return torch.full((as_points(Xs).size(0),), float(self.value), dtype=DTYPE)
#!SECTION

# SECTION: Fixtures
@pytest.fixture
def kp():
    return KernelParams(20.0)


@pytest.fixture
def noise():
    return NoiseParams(0.01)


@pytest.fixture
def cfg():
    return EnsembleConfig()


@pytest.fixture
def room():
    return square_room(10.0)


@pytest.fixture
def room_with_obstacle():
    outer = Polygon([[-5, -5], [5, -5], [5, 5], [-5, 5]], OUTER)
    box = Polygon([[1, 1], [2, 1], [2, 2], [1, 2]], OBSTACLE)
    return World([outer, box])


@pytest.fixture
def wall_batch():
    return make_wall_batch


@pytest.fixture
def two_experts():
    return make_two_experts


@pytest.fixture
def split_wall():
    return make_split_wall


@pytest.fixture
def constant_gp():
    return ConstantGP


@pytest.fixture
def run_config(tmp_path, room):
    '''
    Writes a square-room world and a small run configuration (coarse scans, short path) to
    tmp_path and returns a function producing config files with extra overrides.
    '''
    world_path = tmp_path / 'room.json'
    room.save(world_path)

    def write(name='run.json', **overrides):
        values = {
            'world': 'room.json',
            'waypoints': [[-1.0, 0.0], [1.0, 0.0]],
            'angle_increment_deg': 3.0,
            'scan_stride': 20,
            'checkpoint_every': 2,
            'output': str(tmp_path / name.split('.')[0]),
        }
        values.update(overrides)
        path = tmp_path / name
        with path.open('w', encoding='utf-8') as f:
            json.dump(values, f)
        return path
    return write
#!SECTION
