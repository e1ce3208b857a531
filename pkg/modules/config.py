# SECTION: Necessary imports
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .expert import EnsembleConfig
from .simulator import ScanParams
#!SECTION

# SECTION: Constants
MODES = ('individual', 'mixture', 'both')
# One loop through a 10 m room centered at the origin. It ends 1 m from the south wall heading
# north, so the last scan of the loop sees every wall but a 2 m stretch behind the sensor.
DEFAULT_WAYPOINTS = [[-3.0, -4.0], [-3.0, 4.0], [3.5, 4.0], [3.5, -4.5], [-3.0, -4.5], [-3.0, -4.0]]
#!SECTION

# SECTION: Run configuration
@dataclass
class RunConfig(EnsembleConfig):
    '''
    Everything one simulate -> map -> eval run needs: the algorithm parameters of EnsembleConfig
    plus the world, trajectory, sensor, grid and output settings.
    '''
    world: str = None
    waypoints: list = field(default_factory=lambda: [list(p) for p in DEFAULT_WAYPOINTS])
    speed: float = 0.5
    scan_rate: float = 10.0
    noise_sigma: float = 0.01
    seed: int = 7
    grid_origin: list = None
    grid_resolution: float = 0.1
    grid_width: int = None
    grid_height: int = None
    mode: str = 'individual'
    checkpoint_every: int = 10
    output: str = './runs/default'
    angle_min_deg: float = -135.0
    angle_max_deg: float = 135.0
    angle_increment_deg: float = 1.0
    range_max: float = 30.0

    def __post_init__(self):
        super().__post_init__()
        if self.mode not in MODES:
            raise ValueError(f"Invalid mode: {self.mode} (expected one of {MODES})")
        if not self.checkpoint_every >= 1:
            raise ValueError(f"Invalid checkpoint_every: {self.checkpoint_every}")
        if not self.grid_resolution > 0.0:
            raise ValueError(f"Invalid grid_resolution: {self.grid_resolution}")
        if not self.noise_sigma >= 0.0:
            raise ValueError(f"Invalid noise_sigma: {self.noise_sigma}")
        if self.grid_origin is not None and len(self.grid_origin) != 2:
            raise ValueError(f"Invalid grid_origin: {self.grid_origin}")
        # Validated here so that a bad sensor setting is a config error, not a simulation error
        self.scan_params()

    def ensemble_config(self):
        return EnsembleConfig(**{name: getattr(self, name) for name in EnsembleConfig.field_names()})

    def scan_params(self):
        return ScanParams(self.angle_min_deg, self.angle_max_deg, self.angle_increment_deg, self.range_max)

    @property
    def output_dir(self):
        return Path(self.output)

    def to_dict(self):
        return asdict(self)
#!SECTION

# SECTION: Loading
def read_config_file(path):
    '''
    Flat JSON, or YAML when the suffix is .yaml/.yml. A relative `world` path is resolved
    against the config file's directory.
    '''
    path = Path(path)
    with path.open('r', encoding='utf-8') as f:
        if path.suffix in ('.yaml', '.yml'):
            values = yaml.safe_load(f) or {}
        else:
            values = json.load(f)
    if not isinstance(values, dict):
        raise ValueError(f"{path}: a config file holds one flat object of settings")
    if values.get('world') is not None and not Path(values['world']).is_absolute():
        values['world'] = str(path.parent / values['world'])
    return values


def build_config(path=None, overrides=None):
    '''
    RunConfig from an optional config file with overrides applied on top. Unknown keys are an
    error; overrides whose value is None are ignored.
    '''
    values = read_config_file(path) if path is not None else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"Unknown config keys: {unknown}")
    return RunConfig(**values)
#!SECTION
