"""Global raster grids and expert-style presence rasters.

A grid divides the globe into n_rows x n_cols equal-angle cells in
row-major order, row 0 northernmost.  The cell at row r, col c has its
center at

    lat = 90 - (r + 0.5) * 180 / n_rows
    lon = -180 + (c + 0.5) * 360 / n_cols

An optional mask marks which cells participate in evaluation (True
means evaluable).  An ExpertRangeSet carries one binary presence
raster per evaluated species over such a grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = ["GridSpec", "ExpertRangeSet"]


@dataclass(eq=False)
class GridSpec:
    n_rows: int
    n_cols: int
    mask: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError(
                f"grid must be at least 1x1, got {self.n_rows}x{self.n_cols}"
            )
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
            if self.mask.shape != (self.num_cells,):
                raise ValueError(
                    f"mask length {self.mask.shape[0]} != cell count {self.num_cells}"
                )

    @property
    def num_cells(self) -> int:
        return self.n_rows * self.n_cols

    def cell_index(self, row: int, col: int) -> int:
        if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
            raise ValueError(f"cell ({row}, {col}) outside {self.n_rows}x{self.n_cols}")
        return row * self.n_cols + col

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(lons, lats) of every cell center, flat row-major, length num_cells."""
        lats = 90.0 - (np.arange(self.n_rows) + 0.5) * (180.0 / self.n_rows)
        lons = -180.0 + (np.arange(self.n_cols) + 0.5) * (360.0 / self.n_cols)
        lon_grid, lat_grid = np.meshgrid(lons, lats)
        return lon_grid.reshape(-1), lat_grid.reshape(-1)

    def evaluable_indices(self) -> np.ndarray:
        """Flat indices of cells that participate in evaluation."""
        if self.mask is None:
            return np.arange(self.num_cells)
        return np.nonzero(self.mask)[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GridSpec):
            return NotImplemented
        if (self.n_rows, self.n_cols) != (other.n_rows, other.n_cols):
            return False
        if (self.mask is None) != (other.mask is None):
            return False
        return self.mask is None or bool(np.array_equal(self.mask, other.mask))


@dataclass(eq=False)
class ExpertRangeSet:
    """Per-species presence bitsets over a shared grid.

    presence has shape (num_ranges, grid.num_cells); species_ids[i] is
    the model species index scored against presence row i.  Species
    whose presence is empty on the evaluable cells are kept but flagged
    unevaluable (average precision is undefined without a positive).
    """

    grid: GridSpec
    presence: np.ndarray
    species_ids: list[int]

    def __post_init__(self) -> None:
        self.presence = np.asarray(self.presence, dtype=bool)
        if self.presence.ndim != 2:
            raise ValueError("presence must be a 2-d array of bitsets")
        if self.presence.shape[1] != self.grid.num_cells:
            raise ValueError(
                f"bitset length {self.presence.shape[1]} != "
                f"grid cell count {self.grid.num_cells}"
            )
        if len(self.species_ids) != self.presence.shape[0]:
            raise ValueError(
                f"{len(self.species_ids)} species ids for "
                f"{self.presence.shape[0]} bitsets"
            )
        if any(s < 0 for s in self.species_ids):
            raise ValueError("species ids must be >= 0")

    @property
    def num_ranges(self) -> int:
        return self.presence.shape[0]

    def evaluable_mask(self) -> np.ndarray:
        """Per-range flag: has at least one presence cell among evaluable cells."""
        cells = self.grid.evaluable_indices()
        return self.presence[:, cells].any(axis=1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExpertRangeSet):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.species_ids == other.species_ids
            and bool(np.array_equal(self.presence, other.presence))
        )
