# SECTION: Necessary imports
from dataclasses import dataclass

import numpy as np
#!SECTION

# SECTION: Measurement kinds
SURFACE = 0
AUXILIARY = 1
KIND_NAMES = {SURFACE: "surface", AUXILIARY: "auxiliary"}
#!SECTION

# SECTION: Measurement batch
@dataclass
class MeasurementBatch:
    '''
    Locations and signed-distance targets extracted from one range scan.

    Args:
        locations: [N, 2] measurement locations in meters
        values: [N] signed distances (0 on the surface, +aux_offset in front of it)
        kinds: [N] SURFACE or AUXILIARY per entry
        n_invalid: number of rays skipped because their range was not finite
    '''
    locations: np.ndarray
    values: np.ndarray
    kinds: np.ndarray
    n_invalid: int = 0

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=np.float64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.kinds = np.asarray(self.kinds, dtype=np.int8).reshape(-1)
        assert len(self.locations) == len(self.values) == len(self.kinds), \
            f"Batch fields disagree in length: {len(self.locations)}, {len(self.values)}, {len(self.kinds)}"

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        counts = ", ".join(f"{name}={int(np.sum(self.kinds == kind))}" for kind, name in KIND_NAMES.items())
        return f"MeasurementBatch({counts}, invalid={self.n_invalid})"

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=np.int8))

    @classmethod
    def from_points(cls, locations, values, kinds=None):
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if kinds is None:
            kinds = np.where(values == 0.0, SURFACE, AUXILIARY)
        return cls(locations, values, kinds)

    @classmethod
    def concatenate(cls, batches):
        batches = list(batches)
        if not batches:
            return cls.empty()
        return cls(
            np.concatenate([b.locations for b in batches]),
            np.concatenate([b.values for b in batches]),
            np.concatenate([b.kinds for b in batches]),
            n_invalid=sum(b.n_invalid for b in batches),
        )

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return MeasurementBatch(self.locations[indices], self.values[indices], self.kinds[indices])

    @property
    def surface_mask(self):
        return self.kinds == SURFACE
#!SECTION
