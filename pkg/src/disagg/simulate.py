"""Ground-truth risk surfaces, pixel case counts and polygon aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .errors import ConfigurationError, DegeneratePolygonError, SimulationError, ThresholdExhaustedError
from .fields import CovariateStack
from .geometry import PolygonPartition
from .raster import Raster

COEF_SD = 0.5
INTERCEPT_RANGE = (-8.0, -5.0)
DEFAULT_CASE_FRACTION = 0.05

_SCENARIO_LAYOUT = {1: (6, 0, 0), 2: (6, 6, 0), 3: (6, 6, 3)}


@dataclass(frozen=True)
class ScenarioSpec:
    """Misspecification scenario: which covariates generate risk but are hidden."""

    id: int
    n_observed: int = 6
    n_unobserved_real: int = 0
    n_unobserved_mock: int = 0

    @classmethod
    def from_id(cls, sid: int) -> "ScenarioSpec":
        try:
            obs, real, mock = _SCENARIO_LAYOUT[int(sid)]
        except KeyError:
            raise ConfigurationError(f"unknown scenario {sid}; expected 1, 2 or 3") from None
        return cls(int(sid), obs, real, mock)


@dataclass
class SimulatedSurface:
    scenario: ScenarioSpec
    beta0: float
    beta_obs: np.ndarray
    beta_unobs: np.ndarray
    lambda_true: Raster
    cases: Raster
    observed_stack: CovariateStack
    unobserved_stack: CovariateStack
    population: Raster
    seed: int
    attempts: int = 1
    attempt_totals: list = field(default_factory=list)

    @property
    def total_cases(self) -> int:
        return int(self.cases.values.sum())


@dataclass
class AggregatedData:
    partition: PolygonPartition
    observed_ids: frozenset
    counts: np.ndarray  # all polygons
    populations: np.ndarray
    rates: np.ndarray

    @property
    def observed(self) -> np.ndarray:
        return np.array(sorted(self.observed_ids), dtype=np.int64)

    def with_observed(self, ids: Iterable[int]) -> "AggregatedData":
        ids = frozenset(int(i) for i in ids)
        _check_ids(ids, self.partition)
        _check_populations(ids, self.populations)
        return replace(self, observed_ids=ids)

    def with_counts(self, counts) -> "AggregatedData":
        counts = np.asarray(counts, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            rates = counts / self.populations
        return replace(self, counts=counts, rates=rates)


def _rng(seed, tag):
    return np.random.default_rng(np.random.SeedSequence([int(s) for s in np.atleast_1d(seed)] + [tag]))


def draw_coefficients(k: int, seed) -> np.ndarray:
    if k < 0:
        raise ValueError("k must be non-negative")
    return _rng(seed, 0x62657461).normal(0.0, COEF_SD, size=int(k))


def draw_intercept(seed) -> float:
    return float(_rng(seed, 0x62657430).uniform(*INTERCEPT_RANGE))


def build_risk_surface(
    observed: CovariateStack,
    unobserved: CovariateStack,
    beta0: float,
    beta_obs,
    beta_unobs,
) -> Raster:
    """Incidence rate ``exp(beta0 + X_obs beta_obs + X_unobs beta_unobs)``."""
    beta_obs = np.asarray(beta_obs, dtype=float).reshape(-1)
    beta_unobs = np.asarray(beta_unobs, dtype=float).reshape(-1)
    if len(beta_obs) != len(observed) or len(beta_unobs) != len(unobserved):
        raise ValueError(
            f"coefficient lengths ({len(beta_obs)}, {len(beta_unobs)}) do not match "
            f"stack sizes ({len(observed)}, {len(unobserved)})"
        )
    grid = observed.grid or unobserved.grid
    if grid is None:
        raise ValueError("at least one non-empty stack is needed to define the grid")
    if observed.grid and unobserved.grid and observed.grid != unobserved.grid:
        raise ValueError("observed and unobserved stacks are on different grids")
    eta = np.full(grid.shape, float(beta0))
    for b, r in zip(beta_obs, observed.rasters):
        eta = eta + b * r.values
    for b, r in zip(beta_unobs, unobserved.rasters):
        eta = eta + b * r.values
    return Raster(np.exp(eta), grid)


def sample_cases(lam: Raster, population: Raster, seed) -> Raster:
    mu = lam.values * population.values
    if not np.all(np.isfinite(mu)):
        raise SimulationError("non-finite Poisson mean in case simulation")
    if np.any(mu < 0):
        raise SimulationError("negative Poisson mean in case simulation")
    return Raster(_rng(seed, 0x63617365).poisson(mu).astype(float), lam.grid)


def simulate_surface(
    scenario: ScenarioSpec | int,
    real_stack: CovariateStack,
    mock_stack: CovariateStack,
    population: Raster,
    max_total_cases: float | None = None,
    max_attempts: int = 50,
    seed: int = 0,
) -> SimulatedSurface:
    """Simulate one risk surface and its pixel cases.

    The covariate split is drawn once.  Intercept, coefficients and case
    noise are redrawn whenever total cases exceed ``max_total_cases``
    (default: 5% of the total population).
    """
    if not isinstance(scenario, ScenarioSpec):
        scenario = ScenarioSpec.from_id(scenario)
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    if not (real_stack.standardized and (mock_stack.standardized or not len(mock_stack))):
        raise ConfigurationError("covariate stacks must be standardized")
    need_real = scenario.n_observed + scenario.n_unobserved_real
    if len(real_stack) < need_real or len(mock_stack) < scenario.n_unobserved_mock:
        raise ConfigurationError(
            f"scenario {scenario.id} needs {need_real} real and "
            f"{scenario.n_unobserved_mock} mock layers"
        )
    if max_total_cases is None:
        max_total_cases = DEFAULT_CASE_FRACTION * float(population.values.sum())

    split = _rng(seed, 0x73706C74)
    perm = split.permutation(len(real_stack))
    obs_idx = np.sort(perm[: scenario.n_observed])
    real_unobs = np.sort(perm[scenario.n_observed : need_real])
    mock_idx = np.sort(split.choice(len(mock_stack), scenario.n_unobserved_mock, replace=False)) \
        if scenario.n_unobserved_mock else np.array([], dtype=np.int64)
    observed = real_stack.select(obs_idx)
    unobserved = real_stack.select(real_unobs).concat(mock_stack.select(mock_idx))

    totals = []
    for attempt in range(max_attempts):
        sub = (int(seed), attempt)
        beta0 = draw_intercept(sub)
        beta = draw_coefficients(len(observed) + len(unobserved), sub)
        beta_obs, beta_unobs = beta[: len(observed)], beta[len(observed) :]
        lam = build_risk_surface(observed, unobserved, beta0, beta_obs, beta_unobs)
        cases = sample_cases(lam, population, sub)
        total = float(cases.values.sum())
        totals.append(int(total))
        if total <= max_total_cases:
            return SimulatedSurface(
                scenario=scenario,
                beta0=beta0,
                beta_obs=beta_obs,
                beta_unobs=beta_unobs,
                lambda_true=lam,
                cases=cases,
                observed_stack=observed,
                unobserved_stack=unobserved,
                population=population,
                seed=int(seed),
                attempts=attempt + 1,
                attempt_totals=totals,
            )
    raise ThresholdExhaustedError(max_total_cases, totals)


def _check_ids(ids, partition):
    bad = [i for i in ids if not 0 <= i < partition.n_polygons]
    if bad:
        raise ValueError(f"unknown polygon ids {sorted(bad)}")


def _check_populations(ids, populations):
    for i in sorted(ids):
        if not populations[i] > 0:
            raise DegeneratePolygonError(i)


def aggregate_cases(
    cases: Raster,
    population: Raster,
    partition: PolygonPartition,
    observed_ids: Iterable[int] | None = None,
) -> AggregatedData:
    """Sum pixel cases and populations within each polygon."""
    if cases.values.shape != partition.grid_shape or population.values.shape != partition.grid_shape:
        raise ValueError("rasters do not match the partition grid")
    ids = frozenset(range(partition.n_polygons)) if observed_ids is None \
        else frozenset(int(i) for i in observed_ids)
    _check_ids(ids, partition)
    lab = partition.labels.ravel()
    n = partition.n_polygons
    counts = np.bincount(lab, weights=cases.flat, minlength=n)
    pops = np.bincount(lab, weights=population.flat, minlength=n)
    _check_populations(ids, pops)
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = counts / pops
    return AggregatedData(partition, ids, counts, pops, rates)
