from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from depthkit.errors import ShapeError

INVALID = 0.0


@dataclass(frozen=True)
class DepthMap:
    """H x W depth in meters with a validity mask.

    Invalid pixels hold the sentinel 0 and are excluded from every
    statistic computed on the map.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2 or values.shape != valid.shape:
            raise ShapeError(f"depth {values.shape} and mask {valid.shape} must be matching 2-D grids")
        object.__setattr__(self, "values", np.where(valid, values, INVALID))
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_array(cls, values, valid=None) -> DepthMap:
        """Wrap an array; by default every finite positive pixel is valid."""
        values = np.asarray(values, dtype=np.float64)
        finite = np.isfinite(values) & (values > 0)
        valid = finite if valid is None else (np.asarray(valid, dtype=bool) & finite)
        return cls(np.where(valid, values, INVALID), valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def valid_values(self) -> np.ndarray:
        return self.values[self.valid]


def as_depth_map(d) -> DepthMap:
    return d if isinstance(d, DepthMap) else DepthMap.from_array(d)
