"""Coarse node lattice and its bilinear projection onto pixel centres."""

from __future__ import annotations

import math
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .errors import ConfigurationError
from .raster import GridSpec, Raster


class NodeLattice:
    """Regular lattice of nodes every ``spacing`` pixels, padded by one node
    beyond each grid edge.

    Node ``(a, b)`` sits at ``origin + (a - 1) * spacing * pixel_size`` along
    each axis.  There are ``floor(n / spacing) + 3`` nodes per axis, so the
    first and last nodes lie strictly outside the pixel extent.  A 64-pixel
    axis with spacing 4 gets 19 nodes; a 3-pixel axis with spacing 4 gets 3.
    """

    def __init__(self, grid: GridSpec, spacing: float = 4):
        if not spacing > 0:
            raise ConfigurationError(f"node spacing must be positive, got {spacing}")
        self.grid = grid
        self.spacing = float(spacing)
        self.nx = math.floor(grid.nx / self.spacing) + 3
        self.ny = math.floor(grid.ny / self.spacing) + 3
        step = self.spacing * grid.pixel_size
        self.xs = grid.origin_x + (np.arange(self.nx) - 1) * step
        self.ys = grid.origin_y + (np.arange(self.ny) - 1) * step

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @cached_property
    def coords(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    @cached_property
    def distances(self) -> np.ndarray:
        d = cdist(self.coords, self.coords)
        d.setflags(write=False)
        return d

    def index(self, ix: int, iy: int) -> int:
        return iy * self.nx + ix

    @cached_property
    def projection(self) -> sp.csr_matrix:
        """Sparse ``(n_pixels, n_nodes)`` bilinear interpolation matrix.

        Rows follow the row-major flattening of ``(ny, nx)`` pixel arrays.
        Each row has four non-negative weights summing to one.
        """
        g = self.grid
        fx = (np.arange(g.nx) + 0.5) / self.spacing + 1.0
        fy = (np.arange(g.ny) + 0.5) / self.spacing + 1.0
        ix0 = np.floor(fx).astype(np.int64)
        iy0 = np.floor(fy).astype(np.int64)
        tx = fx - ix0
        ty = fy - iy0
        if ix0.max() + 1 >= self.nx or iy0.max() + 1 >= self.ny:
            raise ConfigurationError("node lattice does not cover the grid")

        IX0, IY0 = np.meshgrid(ix0, iy0)
        TX, TY = np.meshgrid(tx, ty)
        rows = np.repeat(np.arange(g.size), 4)
        cols = np.stack(
            [
                self.index(IX0, IY0),
                self.index(IX0 + 1, IY0),
                self.index(IX0, IY0 + 1),
                self.index(IX0 + 1, IY0 + 1),
            ],
            axis=-1,
        ).reshape(-1)
        vals = np.stack(
            [(1 - TX) * (1 - TY), TX * (1 - TY), (1 - TX) * TY, TX * TY], axis=-1
        ).reshape(-1)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(g.size, self.size))
        A.eliminate_zeros()
        return A

    def to_pixels(self, u: np.ndarray) -> Raster:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.size,):
            raise ConfigurationError(f"expected {self.size} node values, got shape {u.shape}")
        return Raster((self.projection @ u).reshape(self.grid.shape), self.grid)


def latent_field_at_pixels(u: np.ndarray, grid: GridSpec, node_spacing: float = 4) -> Raster:
    """Bilinearly interpolate node values ``u`` to pixel centres."""
    return NodeLattice(grid, node_spacing).to_pixels(u)
