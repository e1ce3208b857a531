# SECTION: Necessary imports
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from lightning.pytorch.utilities.rank_zero import rank_zero_warn

from .errors import ScanLogParseError
from .measurements import AUXILIARY, SURFACE, MeasurementBatch
#!SECTION

# SECTION: Constants
MAX_RANGE_TOL = 1e-6
SCAN_KEYS = ('t', 'pose', 'angle_min', 'angle_increment', 'range_max', 'ranges')
#!SECTION

# SECTION: Range scan
@dataclass
class Scan:
    '''
    One posed 2D range scan. Ray i points at heading + angle_min + i * angle_increment.
    '''
    t: float
    pose: tuple
    angle_min: float
    angle_increment: float
    ranges: np.ndarray
    range_max: float

    def __post_init__(self):
        self.pose = tuple(float(v) for v in self.pose)
        self.ranges = np.asarray(self.ranges, dtype=np.float64).reshape(-1)
        if len(self.pose) != 3:
            raise ValueError(f"A pose is (x, y, heading), got {self.pose}")
        if len(self.ranges) < 1:
            raise ValueError("A scan needs at least one range")
        if not self.angle_increment > 0.0:
            raise ValueError(f"Invalid angle_increment: {self.angle_increment}")

    @property
    def angles(self):
        """World-frame ray angles."""
        return self.pose[2] + self.angle_min + np.arange(len(self.ranges)) * self.angle_increment

    def to_dict(self):
        return {
            't': float(self.t),
            'pose': list(self.pose),
            'angle_min': float(self.angle_min),
            'angle_increment': float(self.angle_increment),
            'range_max': float(self.range_max),
            'ranges': [float(r) for r in self.ranges],
        }
#!SECTION

# SECTION: Measurement construction
def scan_to_measurements(s, cfg):
    '''
    Surface points (value 0) at every ray hit, each followed by an auxiliary point aux_offset in
    front of it along the ray (value +aux_offset). Max-range returns are dropped; non-finite
    and non-positive ranges are skipped and counted in `n_invalid`.

    Args:
        s: Scan
        cfg: anything with an `aux_offset` attribute (EnsembleConfig, RunConfig)
    '''
    aux = cfg.aux_offset
    ranges = s.ranges
    finite = np.isfinite(ranges) & (ranges > 0.0)
    n_invalid = int(np.sum(~finite))
    if n_invalid:
        rank_zero_warn(f"Scan at t={s.t}: skipped {n_invalid} rays with invalid ranges")

    hit = finite & (np.where(finite, ranges, 0.0) < s.range_max - MAX_RANGE_TOL)
    r = ranges[hit]
    angles = s.angles[hit]
    direction = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    surface = np.asarray(s.pose[:2]) + r[:, None] * direction
    auxiliary = surface - aux * direction
    has_aux = r > aux

    # Ray order: surface point of a ray, then its auxiliary point
    locations, values, kinds = [], [], []
    for k in range(len(r)):
        locations.append(surface[k])
        values.append(0.0)
        kinds.append(SURFACE)
        if has_aux[k]:
            locations.append(auxiliary[k])
            values.append(aux)
            kinds.append(AUXILIARY)
    if not locations:
        batch = MeasurementBatch.empty()
    else:
        batch = MeasurementBatch(np.stack(locations), np.asarray(values), np.asarray(kinds))
    batch.n_invalid = n_invalid
    return batch
#!SECTION

# SECTION: Scan log reading and writing
def parse_scan(line, path, line_number):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as err:
        raise ScanLogParseError(path, line_number, f"invalid JSON ({err.msg})") from err
    if not isinstance(obj, dict):
        raise ScanLogParseError(path, line_number, "expected a JSON object")
    missing = [k for k in SCAN_KEYS if k not in obj]
    if missing:
        raise ScanLogParseError(path, line_number, f"missing keys {missing}")
    try:
        # null ranges are read as NaN so they are counted as invalid rays
        ranges = [math.nan if r is None else float(r) for r in obj['ranges']]
        return Scan(
            t=float(obj['t']),
            pose=[float(v) for v in obj['pose']],
            angle_min=float(obj['angle_min']),
            angle_increment=float(obj['angle_increment']),
            ranges=ranges,
            range_max=float(obj['range_max']),
        )
    except (TypeError, ValueError) as err:
        raise ScanLogParseError(path, line_number, str(err)) from err


def read_scan_log(path, stride=1, with_index=False):
    '''
    Streams the scans of a JSON-lines scan log in file order, keeping every `stride`-th scan
    starting with the first. Blank lines are ignored.

    Args:
        path: scan log path
        stride: keep scans 0, stride, 2*stride, ...
        with_index: yield (scan index in the log, Scan) pairs instead of bare scans
    '''
    assert stride >= 1, f"stride must be positive, got {stride}"
    path = Path(path)
    index = 0
    with path.open('r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            scan = parse_scan(line, path, line_number)
            if index % stride == 0:
                yield (index, scan) if with_index else scan
            index += 1


def write_scan_log(path, scans):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8', newline='\n') as f:
        for scan in scans:
            f.write(json.dumps(scan.to_dict(), separators=(',', ':')) + '\n')
#!SECTION
