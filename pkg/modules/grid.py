# SECTION: Necessary imports
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PreconditionError
#!SECTION

# SECTION: Grid specification
@dataclass(frozen=True)
class GridSpec:
    '''
    Regular grid anchored at its lower-left corner `origin`. Cell (row, col) has its center at
    origin + ((col + 0.5) * resolution, (row + 0.5) * resolution); rows run along +y.
    '''
    origin: tuple
    resolution: float = 0.1
    width: int = 1
    height: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'origin', (float(self.origin[0]), float(self.origin[1])))
        if not self.resolution > 0.0:
            raise ValueError(f"Invalid grid resolution: {self.resolution}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"Invalid grid size: {self.width}x{self.height}")

    @property
    def shape(self):
        return (self.height, self.width)

    def centers(self):
        """[height * width, 2] cell centers in row-major order."""
        xs = self.origin[0] + (np.arange(self.width) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(self.height) + 0.5) * self.resolution
        X, Y = np.meshgrid(xs, ys)
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def matches(self, other, tol=1e-9):
        return (self.width == other.width and self.height == other.height
                and abs(self.resolution - other.resolution) <= tol
                and all(abs(a - b) <= tol for a, b in zip(self.origin, other.origin)))

    def cell_of(self, points):
        '''
        (row, col) of the cells containing each point; may fall outside the grid.
        '''
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        col = np.floor((points[:, 0] - self.origin[0]) / self.resolution).astype(np.int64)
        row = np.floor((points[:, 1] - self.origin[1]) / self.resolution).astype(np.int64)
        return row, col

    @classmethod
    def spanning(cls, lo, hi, resolution):
        '''
        Smallest grid whose cell centers span the box [lo, hi]: the first center sits on lo, the
        last one on or just past hi.
        '''
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        width = int(np.ceil((hi[0] - lo[0]) / resolution - 1e-9)) + 1
        height = int(np.ceil((hi[1] - lo[1]) / resolution - 1e-9)) + 1
        return cls((lo[0] - 0.5 * resolution, lo[1] - 0.5 * resolution), resolution, width, height)
#!SECTION

# SECTION: Grid of signed distances
@dataclass
class SdfGrid:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.spec.shape)
        assert np.all(np.isfinite(self.values)), "Grid values must be finite"

    def write(self, path):
        '''
        Text format: a header line "x0 y0 resolution width height", then one line of
        space-separated values per grid row, starting with the row at the lowest y.
        '''
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        s = self.spec
        header = f"{s.origin[0]!r} {s.origin[1]!r} {s.resolution!r} {s.width} {s.height}"
        np.savetxt(path, self.values, fmt='%.17g', header=header, comments='')

    @classmethod
    def read(cls, path):
        path = Path(path)
        with path.open('r', encoding='utf-8') as f:
            header = f.readline().split()
            if len(header) != 5:
                raise PreconditionError(f"{path}: grid header must read 'x0 y0 resolution width height'")
            try:
                spec = GridSpec((float(header[0]), float(header[1])), float(header[2]), int(header[3]), int(header[4]))
                values = np.loadtxt(f, dtype=np.float64, ndmin=2)
            except ValueError as err:
                raise PreconditionError(f"{path}: {err}") from err
        if values.shape != spec.shape:
            raise PreconditionError(f"{path}: header announces {spec.shape} cells, found {values.shape}")
        if not np.all(np.isfinite(values)):
            raise PreconditionError(f"{path}: grid values must be finite")
        return cls(spec, values)
#!SECTION
