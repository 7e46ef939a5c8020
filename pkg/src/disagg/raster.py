"""Pixel grids and rasters.

Arrays are stored with shape ``(ny, nx)``; row 0 is the *bottom* row of the
map (smallest y).  File writers flip to top-to-bottom order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    pixel_size: float = 1.0
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigurationError(f"grid must have at least one pixel, got {self.nx}x{self.ny}")
        if not self.pixel_size > 0:
            raise ConfigurationError(f"pixel_size must be positive, got {self.pixel_size}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.nx, self.ny) * self.pixel_size)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinates as two ``(ny, nx)`` arrays (x, y)."""
        xs = self.origin_x + (np.arange(self.nx) + 0.5) * self.pixel_size
        ys = self.origin_y + (np.arange(self.ny) + 0.5) * self.pixel_size
        return np.meshgrid(xs, ys)


@dataclass
class Raster:
    """A grid of float values; NaN marks missing pixels."""

    values: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ConfigurationError(
                f"raster shape {self.values.shape} does not match grid {self.grid.shape}"
            )

    @classmethod
    def full(cls, grid: GridSpec, value: float) -> "Raster":
        return cls(np.full(grid.shape, value, dtype=float), grid)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def copy(self) -> "Raster":
        return Raster(self.values.copy(), self.grid)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)
