"""Matérn kernel, Gaussian random fields, covariate stacks and populations."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, DegenerateCovariateError, NumericalError
from .lattice import NodeLattice
from .raster import GridSpec, Raster

log = logging.getLogger(__name__)

NU = 1.5
SQRT12 = math.sqrt(8 * NU)

JITTER_START = 1e-10
JITTER_STOP = 1e-4


@dataclass(frozen=True)
class MaternParams:
    rho: float
    sigma: float
    nu: float = NU

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"range must be positive, got {self.rho}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if self.nu != NU:
            raise ValueError("only nu = 3/2 is supported")


def matern_cov(d, p: MaternParams):
    """Matérn(3/2) covariance ``sigma^2 (1 + k d) exp(-k d)``, ``k = sqrt(12)/rho``.

    With this range convention the correlation at ``d = rho`` is about 0.14.
    """
    kd = (SQRT12 / p.rho) * np.asarray(d, dtype=float)
    return p.sigma**2 * (1.0 + kd) * np.exp(-kd)


def matern_corr_dlogrho(d, rho: float):
    """Derivative of the Matérn(3/2) correlation with respect to ``log rho``."""
    kd = (SQRT12 / rho) * np.asarray(d, dtype=float)
    return kd**2 * np.exp(-kd)


def jitter_cholesky(K: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Lower Cholesky factor of ``K``, adding diagonal jitter if needed.

    Jitter starts at ``1e-10 * scale`` and grows tenfold up to
    ``1e-4 * scale``; beyond that a :class:`NumericalError` is raised.
    """
    if not scale > 0:
        raise ValueError(f"jitter scale must be positive, got {scale}")
    try:
        return linalg.cholesky(K, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    jitter = JITTER_START * scale
    eye = np.eye(K.shape[0])
    while jitter <= JITTER_STOP * scale * (1 + 1e-9):
        try:
            L = linalg.cholesky(K + jitter * eye, lower=True, check_finite=False)
            log.debug("added jitter %.3g to covariance diagonal", jitter)
            return L
        except linalg.LinAlgError:
            jitter *= 10
    raise NumericalError("covariance is not positive definite even with maximal jitter")


def simulate_node_values(lattice: NodeLattice, p: MaternParams, rng: np.random.Generator):
    if p.sigma == 0:
        return np.zeros(lattice.size)
    R = matern_cov(lattice.distances, MaternParams(p.rho, 1.0))
    L = jitter_cholesky(R)
    return p.sigma * (L @ rng.standard_normal(lattice.size))


def simulate_grf(
    grid: GridSpec, p: MaternParams, seed: int, node_spacing: float = 4, return_nodes: bool = False
):
    """Zero-mean Matérn field: node draws interpolated to pixel centres.

    Node values are exact draws from the node covariance; bilinear
    interpolation slightly shrinks the pixel variance between nodes.
    """
    lattice = NodeLattice(grid, node_spacing)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x677266]))
    u = simulate_node_values(lattice, p, rng)
    r = lattice.to_pixels(u)
    return (r, u) if return_nodes else r


@dataclass
class CovariateStack:
    names: list
    rasters: list
    standardized: bool = False
    # standardized = (raw - offsets) / scales
    offsets: np.ndarray = field(default=None)
    scales: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(self.names) != len(self.rasters):
            raise ConfigurationError("names and rasters differ in length")
        grids = {r.grid for r in self.rasters}
        if len(grids) > 1:
            raise ConfigurationError("all covariate layers must share one grid")
        k = len(self.rasters)
        if self.offsets is None:
            self.offsets = np.zeros(k)
        if self.scales is None:
            self.scales = np.ones(k)
        self.offsets = np.asarray(self.offsets, dtype=float)
        self.scales = np.asarray(self.scales, dtype=float)

    def __len__(self):
        return len(self.rasters)

    @property
    def grid(self) -> GridSpec | None:
        return self.rasters[0].grid if self.rasters else None

    def matrix(self, grid: GridSpec | None = None) -> np.ndarray:
        """Design matrix ``(n_pixels, K)`` in row-major pixel order."""
        if not self.rasters:
            g = grid if grid is not None else self.grid
            n = g.size if g is not None else 0
            return np.zeros((n, 0))
        return np.column_stack([r.flat for r in self.rasters])

    def select(self, idx) -> "CovariateStack":
        idx = [int(i) for i in idx]
        return CovariateStack(
            names=[self.names[i] for i in idx],
            rasters=[self.rasters[i] for i in idx],
            standardized=self.standardized,
            offsets=self.offsets[idx],
            scales=self.scales[idx],
        )

    def concat(self, other: "CovariateStack") -> "CovariateStack":
        if self.rasters and other.rasters and self.grid != other.grid:
            raise ConfigurationError("cannot concatenate stacks on different grids")
        parts = [s for s in (self, other) if s.rasters] or [self, other]
        return CovariateStack(
            names=list(self.names) + list(other.names),
            rasters=list(self.rasters) + list(other.rasters),
            standardized=all(s.standardized for s in parts),
            offsets=np.concatenate([self.offsets, other.offsets]),
            scales=np.concatenate([self.scales, other.scales]),
        )

    def same_transform(self, other: "CovariateStack") -> bool:
        return (
            list(self.names) == list(other.names)
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.scales, other.scales)
        )


def standardize(stack: CovariateStack) -> CovariateStack:
    """Shift and scale every layer to mean 0 and sd 1 (denominator N)."""
    rasters, offsets, scales = [], [], []
    for name, r, off, sc in zip(stack.names, stack.rasters, stack.offsets, stack.scales):
        v = r.values
        m = v.mean()
        c = v - m
        m2 = c.mean()  # second centring pass removes rounding left by the first
        c -= m2
        m += m2
        s = math.sqrt(float(np.mean(c * c)))
        if not s > 0 or s <= 1e-12 * max(abs(m), 1.0):
            raise DegenerateCovariateError(name)
        rasters.append(Raster(c / s, r.grid))
        offsets.append(off + sc * m)
        scales.append(sc * s)
    return CovariateStack(list(stack.names), rasters, True, np.array(offsets), np.array(scales))


def apply_transform(raw: CovariateStack, reference: CovariateStack) -> CovariateStack:
    """Standardize ``raw`` with the transform recorded on ``reference``."""
    if list(raw.names) != list(reference.names):
        raise ConfigurationError("layer names differ from the reference stack")
    rasters = [
        Raster((r.values - off) / sc, r.grid)
        for r, off, sc in zip(raw.rasters, reference.offsets, reference.scales)
    ]
    return CovariateStack(list(raw.names), rasters, True, reference.offsets.copy(), reference.scales.copy())


def _grf_stack(grid, rhos, seed, prefix, node_spacing):
    names, rasters = [], []
    for i, rho in enumerate(rhos):
        sub = np.random.SeedSequence([int(seed), i]).generate_state(1)[0]
        rasters.append(simulate_grf(grid, MaternParams(float(rho), 1.0), int(sub), node_spacing))
        names.append(f"{prefix}{i:02d}")
    return standardize(CovariateStack(names, rasters)) if rasters else CovariateStack([], [], True)


def _log_uniform(rng, lo, hi, n):
    if not 0 < lo <= hi:
        raise ValueError(f"rho_range must be a positive interval, got ({lo}, {hi})")
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size=n))


def make_mock_covariates(
    grid: GridSpec, count: int, rho_range=None, seed: int = 0, node_spacing: float = 4
) -> CovariateStack:
    """``count`` independent standardized Matérn fields with log-uniform ranges."""
    if count < 0:
        raise ValueError("count must be non-negative")
    lo, hi = rho_range if rho_range is not None else (2.0, grid.nx * grid.pixel_size / 2)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D6F636B]))
    rhos = _log_uniform(rng, lo, hi, count)
    return _grf_stack(grid, rhos, int(seed) * 7919 + 1, "mock_", node_spacing)


def make_real_covariates(
    grid: GridSpec, count: int = 12, rho_range=None, seed: int = 0, node_spacing: float = 4
) -> CovariateStack:
    """Stand-ins for measured covariates: smoother fields than the mock ones.

    Ranges are drawn log-uniformly from the upper half (in log scale) of
    ``rho_range``.
    """
    lo, hi = rho_range if rho_range is not None else (2.0, grid.nx * grid.pixel_size / 2)
    mid = math.sqrt(lo * hi)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7265616C]))
    rhos = _log_uniform(rng, mid, hi, count)
    return _grf_stack(grid, rhos, int(seed) * 7919 + 2, "real_", node_spacing)


def make_population(
    grid: GridSpec,
    total: float,
    clumpiness: float = 1.0,
    rho: float | None = None,
    seed: int = 0,
    node_spacing: float = 4,
) -> Raster:
    """Positive population surface ``exp(GRF)`` rescaled to sum to ``total``."""
    if not total > 0:
        raise ValueError("total population must be positive")
    if clumpiness < 0:
        raise ValueError("clumpiness must be non-negative")
    rho = rho if rho is not None else grid.nx * grid.pixel_size / 8
    if clumpiness == 0:
        w = np.ones(grid.shape)
    else:
        g = simulate_grf(grid, MaternParams(rho, clumpiness), seed, node_spacing)
        z = g.values
        w = np.exp(z - z.max())
    return Raster(total * w / w.sum(), grid)
