#########################################################################################################################################
# The script in this file runs simulate -> map -> eval for every value of one RunConfig parameter and every seed, and tabulates the
# resulting map quality and model size. Used for the threshold trade-off and noise sensitivity experiments.
#########################################################################################################################################
from pathlib import Path
import argparse
import json
import sys
import time

import lightning as L
import pandas as pd

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))
from modules.config import build_config
from modules.grid import SdfGrid
from modules.pipeline import evaluate_run, map_run, simulate_run


def run_sweep(config_path, param, values, seeds, save_dir, overrides=None):
    '''
    One row per (value, seed) with the individual-prediction metrics of the final map.
    '''
    rows = []
    for value in values:
        for seed in seeds:
            run_dir = save_dir / f"{param}_{value}" / f"seed_{seed}"
            cfg = build_config(config_path, {**(overrides or {}), param: value, 'seed': seed, 'output': str(run_dir)})
            L.seed_everything(seed)
            scans_path, gt_path, _ = simulate_run(cfg)
            start = time.perf_counter()
            ens, _ = map_run(cfg, scans_path, progress=False)
            wall = time.perf_counter() - start
            report = evaluate_run(ens, SdfGrid.read(gt_path), 'individual')
            rows.append({'param': param, 'value': value, 'seed': seed, **report, 'wall_s': wall})
            print(f"{param}={value} seed={seed}: rmsd={report['rmsd']} hausdorff={report['hausdorff']} "
                  f"PIs={report['n_pi_total']} ({report['n_pi_primary']} primary)")
    return pd.DataFrame(rows)


def main():
    # Accepted CLI input arguments
    parser = argparse.ArgumentParser(description="This script sweeps one RunConfig parameter over a list of values and seeds.")
    parser.add_argument("--config", type=str, required=True, help="Base run configuration (JSON or YAML).")
    parser.add_argument("--param", type=str, required=True, help="Name of the RunConfig field to sweep, e.g. t_add.")
    parser.add_argument("--values", type=json.loads, nargs='+', required=True, help="Values of the parameter (parsed as JSON).")
    parser.add_argument("--seeds", type=int, nargs='+', default=[7, 8, 9], help="Seeds to repeat every value with.")
    parser.add_argument("--fix", type=str, nargs='*', default=[], help="Extra key=value overrides (value parsed as JSON), e.g. t_del=0.001.")
    parser.add_argument("--save-dir", type=str, default="./runs/sweep", help="Directory for the runs and the result tables.")
    args = parser.parse_args()

    save_dir = Path(args.save_dir).resolve()
    save_dir.mkdir(parents=True, exist_ok=True)
    overrides = {}
    for item in args.fix:
        key, _, value = item.partition('=')
        if not value:
            raise ValueError(f"Expected key=value, got {item!r}")
        overrides[key] = json.loads(value)

    results = run_sweep(args.config, args.param, args.values, args.seeds, save_dir, overrides)
    results.to_csv(save_dir / f"sweep_{args.param}.csv", index=False)

    # Median over seeds, which is what the trade-off plots use
    summary = results.drop(columns=['param', 'seed']).groupby('value').median(numeric_only=True).reset_index()
    summary.to_csv(save_dir / f"sweep_{args.param}_median.csv", index=False)
    print(summary.to_string(index=False))

if __name__ == "__main__":
    main()
