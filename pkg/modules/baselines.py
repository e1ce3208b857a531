# SECTION: Necessary imports
import numpy as np

from .grid import SdfGrid
from .kernels import exact_gp_fit, kernel_matrix
from .measurements import MeasurementBatch
#!SECTION

# SECTION: Exact GP reference map
def exact_gp_map(batches, n_samples, seed, kp, noise, grid, chunk=4096):
    '''
    Exact GP regression on a random subsample of all measurements, predicted on a grid.

    Args:
        batches: MeasurementBatches of the used scans
        n_samples: number of measurements drawn without replacement (all if fewer exist)
        seed: seed of the draw
        kp: KernelParams
        noise: NoiseParams
        grid: GridSpec to predict on
        chunk: number of cell centers predicted at once
    '''
    pooled = MeasurementBatch.concatenate(batches)
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(pooled), size=min(n_samples, len(pooled)), replace=False))
    Xm, _, alpha = exact_gp_fit(pooled.locations[picked], pooled.values[picked], noise, kp,
                                name=f"a {len(picked)}-sample draw")

    centers = grid.centers()
    values = np.empty(len(centers))
    for start in range(0, len(centers), chunk):
        values[start:start + chunk] = (kernel_matrix(centers[start:start + chunk], Xm, kp) @ alpha).numpy()
    return SdfGrid(grid, values.reshape(grid.shape))
#!SECTION
