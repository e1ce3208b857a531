#########################################################################################################################################
# The script in this file fits exact GP regression to random subsamples of a run's measurements and scores the resulting maps against
# the ground truth. This is the reference the sparse ensemble is compared with.
#########################################################################################################################################
from pathlib import Path
import argparse
import sys

import lightning as L
import pandas as pd
from tqdm import tqdm

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))
from modules.baselines import exact_gp_map
from modules.config import build_config
from modules.evaluation import hausdorff, rmsd
from modules.grid import SdfGrid
from modules.ingest import read_scan_log, scan_to_measurements
from modules.pipeline import GT_FILE, SCANS_FILE, simulate_run


def main():
    # Accepted CLI input arguments
    parser = argparse.ArgumentParser(description="This script scores exact GP maps fit to subsampled measurements.")
    parser.add_argument("--config", type=str, required=True, help="Run configuration (JSON or YAML).")
    parser.add_argument("--sizes", type=int, nargs='+', default=[250, 500, 1000], help="Numbers of measurements to draw.")
    parser.add_argument("--repetitions", type=int, default=3, help="Independent draws per size.")
    parser.add_argument("--simulate", action='store_true', help="Simulate the scan log first instead of reusing <output>/scans.jsonl.")
    args = parser.parse_args()

    cfg = build_config(args.config)
    L.seed_everything(cfg.seed)
    out = cfg.output_dir
    if args.simulate or not (out / SCANS_FILE).is_file():
        simulate_run(cfg)
    gt = SdfGrid.read(out / GT_FILE)

    ens_cfg = cfg.ensemble_config()
    batches = [scan_to_measurements(scan, ens_cfg) for scan in read_scan_log(out / SCANS_FILE, stride=cfg.scan_stride)]
    print(f"Pooled {sum(len(b) for b in batches)} measurements from {len(batches)} scans")

    rows = []
    for n_samples in tqdm(args.sizes, desc='Sizes'):
        for rep in range(args.repetitions):
            pred = exact_gp_map(batches, n_samples, cfg.seed + rep, ens_cfg.kp, ens_cfg.noise, gt.spec)
            rows.append({'n_samples': n_samples, 'repetition': rep, 'rmsd': rmsd(pred, gt), 'hausdorff': hausdorff(pred, gt)})

    results = pd.DataFrame(rows, columns=['n_samples', 'repetition', 'rmsd', 'hausdorff'])
    results.to_csv(out / 'baseline_exact_gp.csv', index=False)
    print(results.to_string(index=False))

if __name__ == "__main__":
    main()
