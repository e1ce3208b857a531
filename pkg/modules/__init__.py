from .errors import MappingError, NumericalFailure, PreconditionError, ScanLogParseError
from .kernels import KernelParams, NoiseParams, exact_gp_predict, kernel_eval, kernel_matrix
from .measurements import MeasurementBatch
from .sparse_gp import SparseGP
from .partition import PartitionIndex
from .expert import EnsembleConfig, Expert
from .ensemble import Ensemble
from .ingest import Scan, read_scan_log, scan_to_measurements, write_scan_log
from .grid import GridSpec, SdfGrid
from .simulator import ScanParams, World, generate_dataset, ground_truth_sdf, raycast
from .evaluation import hausdorff, predict_grid, render, render_regions, rmsd
from .config import RunConfig, build_config
from .checkpoint import load_checkpoint, save_checkpoint
