# SECTION: Necessary imports
import shutil
import time
from pathlib import Path

import pandas as pd
from lightning.pytorch.loggers import CSVLogger
from lightning.pytorch.utilities.rank_zero import rank_zero_info, rank_zero_warn
from tqdm import tqdm

from .checkpoint import save_checkpoint
from .ensemble import Ensemble
from .errors import NumericalFailure, PreconditionError
from .evaluation import hausdorff, predict_grid, rmsd
from .grid import GridSpec
from .ingest import read_scan_log, scan_to_measurements
from .simulator import World, generate_dataset, ground_truth_sdf
#!SECTION

# SECTION: Constants
STATS_COLUMNS = ['scan_index', 'n_experts', 'n_pi_total', 'n_pi_primary', 'n_measurements', 'n_invalid', 'wall_ms']
SCANS_FILE = 'scans.jsonl'
GT_FILE = 'gt.sdf'
MODEL_FILE = 'model.json'
#!SECTION

# SECTION: Simulation
def load_world(cfg):
    if cfg.world is None:
        raise PreconditionError("No world file configured")
    path = Path(cfg.world)
    if not path.is_file():
        raise PreconditionError(f"World file {path} does not exist")
    return World.load(path)


def grid_spec_for(world, cfg):
    '''
    Configured grid if fully specified, else cell centers spanning the world's bounding box.
    Walls along the box then pass through cell centers, and no cell lies beyond the outer walls
    where nothing is ever observed.
    '''
    if cfg.grid_origin is not None and cfg.grid_width is not None and cfg.grid_height is not None:
        return GridSpec(tuple(cfg.grid_origin), cfg.grid_resolution, cfg.grid_width, cfg.grid_height)
    lo, hi = world.bounds
    return GridSpec.spanning(lo, hi, cfg.grid_resolution)


def simulate_run(cfg):
    '''
    Writes the scan log and the ground-truth grid of the configured world under cfg.output.

    Returns:
        (scan log path, ground-truth grid path, number of scans)
    '''
    world = load_world(cfg)
    out = cfg.output_dir
    scans_path, gt_path = out / SCANS_FILE, out / GT_FILE
    scans = generate_dataset(world, cfg.waypoints, cfg.speed, cfg.scan_rate, cfg.scan_params(),
                             cfg.noise_sigma, cfg.seed, path=scans_path)
    ground_truth_sdf(world, grid_spec_for(world, cfg)).write(gt_path)
    return scans_path, gt_path, len(scans)
#!SECTION

# SECTION: Mapping
def _stats_logger(out, cfg):
    # Stale logs of a previous run in the same directory would be appended to
    shutil.rmtree(out / 'stats', ignore_errors=True)
    logger = CSVLogger(out, name='', version='stats')
    logger.log_hyperparams(cfg.to_dict())
    return logger


def _write_stats(logger, out):
    logger.save()
    metrics_path = Path(logger.log_dir) / 'metrics.csv'
    if not metrics_path.is_file():
        stats = pd.DataFrame(columns=STATS_COLUMNS)
    else:
        stats = pd.read_csv(metrics_path)[STATS_COLUMNS]
        stats = stats.astype({c: 'int64' for c in STATS_COLUMNS if c != 'wall_ms'})
    stats.to_csv(out / 'stats.csv', index=False)
    return stats


def map_run(cfg, scans_path, progress=True):
    '''
    Streams the scan log through the ensemble: initialization on the first used scan with
    measurements, one step per later used scan. Checkpoints go to <output>/checkpoints every
    cfg.checkpoint_every used scans, the final model to <output>/model.json and per-scan
    statistics to <output>/stats.csv.

    Returns:
        (Ensemble, summary dict with n_used, wall_s, duration_s, realtime_factor)
    '''
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    ens_cfg = cfg.ensemble_config()
    logger = _stats_logger(out, cfg)

    ens, n_used = None, 0
    t_first = t_last = None
    wall_total = 0.0
    scans = tqdm(read_scan_log(scans_path, with_index=True), desc='Mapping', unit='scan', disable=not progress)
    for index, scan in scans:
        t_first = scan.t if t_first is None else t_first
        t_last = scan.t
        if index % cfg.scan_stride != 0:
            continue

        batch = scan_to_measurements(scan, ens_cfg)
        start = time.perf_counter()
        try:
            if ens is None:
                if len(batch) == 0:
                    rank_zero_warn(f"Scan {index} has no measurements; waiting for one to initialize")
                    continue
                ens = Ensemble.init(batch, ens_cfg)
            else:
                ens.step(batch)
        except NumericalFailure as err:
            raise err.with_context(scan_index=index) from err
        wall_ms = 1000.0 * (time.perf_counter() - start)
        wall_total += wall_ms / 1000.0

        logger.log_metrics({
            'scan_index': index,
            'n_experts': len(ens.experts),
            'n_pi_total': ens.n_pi_total,
            'n_pi_primary': ens.n_pi_primary,
            'n_measurements': len(batch),
            'n_invalid': batch.n_invalid,
            'wall_ms': wall_ms,
        }, step=n_used)
        n_used += 1
        if n_used % cfg.checkpoint_every == 0:
            save_checkpoint(ens, out / 'checkpoints' / f'scan_{index:06d}.json')

    if ens is None:
        raise PreconditionError(f"{scans_path}: no used scan has any measurement")
    _write_stats(logger, out)
    save_checkpoint(ens, out / MODEL_FILE)

    duration = 0.0 if t_first is None else t_last - t_first
    summary = {
        'n_used': n_used,
        'wall_s': wall_total,
        'duration_s': duration,
        'realtime_factor': duration / wall_total if wall_total > 0 else float('inf'),
    }
    rank_zero_info(f"Mapped {n_used} scans in {wall_total:.2f}s")
    return ens, summary
#!SECTION

# SECTION: Evaluation
def evaluate_mode(ens, gt, mode):
    pred = predict_grid(ens, gt.spec, mode=mode)
    return {
        'rmsd': rmsd(pred, gt),
        'hausdorff': hausdorff(pred, gt),
        'n_pi_total': ens.n_pi_total,
        'n_pi_primary': ens.n_pi_primary,
        'n_experts': len(ens.experts),
    }


def evaluate_run(ens, gt, mode='individual'):
    '''
    Metrics of the ensemble's map against a ground-truth grid. For mode 'both' the report holds
    one entry per prediction mode.
    '''
    if mode == 'both':
        return {m: evaluate_mode(ens, gt, m) for m in ('individual', 'mixture')}
    return evaluate_mode(ens, gt, mode)
#!SECTION
