"""Experiment sweeps: fine-scale accuracy against polygon size and count
(experiment 1) and polygon-level cross-validation as a proxy for it
(experiment 2).

Every random choice is seeded from the master seed plus the cell's
coordinates, so cells can run in any order or in parallel and a sweep can
resume from a partially written CSV.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DisaggError
from .evaluation import baseline_predict, kfold_cv, pearson, score
from .fields import make_mock_covariates, make_population, make_real_covariates
from .geometry import make_world, polygon_mask, sample_contiguous
from .io import fmt, write_grid_binary
from .model import FitOptions, PriorSpec, fit_map
from .raster import GridSpec
from .simulate import aggregate_cases, simulate_surface

log = logging.getLogger(__name__)

_TAGS = {"world": 1, "real": 2, "mock": 3, "population": 4, "surface": 5, "sample": 6,
         "size": 7, "folds": 8}


def derive_seed(master: int, tag: str, *keys: int) -> int:
    ss = np.random.SeedSequence([int(master), _TAGS[tag]] + [int(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class ExperimentConfig:
    nx: int = 64
    ny: int = 64
    level_shapes: tuple = (4, 16, 64)
    irregularity: float = 0.5
    node_spacing: float = 4
    population_total: float = 1e7
    clumpiness: float = 1.0
    scenarios: tuple = (1, 2, 3)
    n_surfaces: int = 20
    levels: tuple = (1, 2, 3)
    polygon_fractions: tuple = (0.25, 0.5, 1.0)
    min_polygons: int = 2
    max_total_cases_fraction: float = 0.05
    max_attempts: int = 50
    k: int = 5
    exp2_levels: tuple = (2, 3)
    exp2_repeats: int = 5
    exp2_min_polygons: int = 10
    max_iter: int = 500
    grad_tol: float = 1e-6
    seed: int = 0
    out: str = "results"
    threads: int = 1
    save_rasters: bool = False

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            default = known[key].default
            kwargs[key] = _coerce(raw, default)
        return cls(**kwargs)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_lines(self) -> list:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(fmt(x) for x in v)
            out.append(f"{f.name}={v if isinstance(v, str) else fmt(v)}")
        return out

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.nx, self.ny)

    @property
    def fit_options(self) -> FitOptions:
        return FitOptions(max_iter=self.max_iter, grad_tol=self.grad_tol, node_spacing=self.node_spacing)


def _coerce(raw, default):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        conv = type(default[0]) if default else float
        return tuple(conv(x) for x in raw.split(",") if x.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


class Study:
    """World, covariates and population shared by all cells of a sweep."""

    def __init__(self, config: ExperimentConfig):
        self.config = config

    @cached_property
    def world(self):
        c = self.config
        return make_world(c.grid, c.level_shapes, c.irregularity, derive_seed(c.seed, "world"))

    @cached_property
    def real(self):
        c = self.config
        return make_real_covariates(c.grid, 12, seed=derive_seed(c.seed, "real"), node_spacing=c.node_spacing)

    @cached_property
    def mock(self):
        c = self.config
        return make_mock_covariates(c.grid, 12, seed=derive_seed(c.seed, "mock"), node_spacing=c.node_spacing)

    @cached_property
    def population(self):
        c = self.config
        return make_population(c.grid, c.population_total, c.clumpiness,
                               seed=derive_seed(c.seed, "population"), node_spacing=c.node_spacing)

    def prepare(self) -> "Study":
        # build shared state up front; cached_property is not thread-safe
        self.world, self.real, self.mock, self.population
        return self

    def surface(self, repeat: int, scenario: int):
        c = self.config
        return simulate_surface(
            scenario, self.real, self.mock, self.population,
            max_total_cases=c.max_total_cases_fraction * c.population_total,
            max_attempts=c.max_attempts,
            seed=derive_seed(c.seed, "surface", repeat, scenario),
        )

    def polygon_counts(self, level: int) -> list:
        c = self.config
        P = self.world.level(level).n_polygons
        ns = {min(P, max(c.min_polygons, int(round(f * P)))) for f in c.polygon_fractions}
        return sorted(ns)


@dataclass
class ResultRow:
    repeat: int
    scenario: int
    level: int
    n_polygons: int
    mean_polygon_area: float = math.nan
    overall_corr: float = math.nan
    mean_within_corr: float = math.nan
    baseline_corr: float = math.nan
    cv_corr: float = math.nan
    converged: bool = False
    runtime_seconds: float = field(default=0.0, compare=False)
    surface: int = -1
    error: str = ""

    def csv_values(self) -> list:
        return [fmt(getattr(self, name)) if name != "error" else self.error for name in RESULT_COLUMNS]


# runtime_seconds goes to a timings sidecar so that result CSVs are reproducible byte for byte
RESULT_COLUMNS = ["repeat", "surface", "scenario", "level", "n_polygons", "mean_polygon_area",
                  "overall_corr", "mean_within_corr", "baseline_corr", "cv_corr", "converged", "error"]


@dataclass(frozen=True)
class Cell:
    repeat: int
    scenario: int
    level: int
    n_polygons: int | None  # None: size drawn at run time (experiment 2)
    surface: int
    sample: int = 0

    @property
    def key(self):
        return (self.repeat, self.scenario, self.level)


def plan_experiment1(config: ExperimentConfig, study: Study | None = None) -> list:
    study = study or Study(config)
    cells = []
    for r in range(config.n_surfaces):
        for s in config.scenarios:
            for level in config.levels:
                for n in study.polygon_counts(level):
                    cells.append(Cell(r, s, level, n, surface=r))
    return cells


def plan_experiment2(config: ExperimentConfig, study: Study | None = None) -> list:
    cells = []
    idx = 0
    for r in range(config.n_surfaces):
        for level in config.exp2_levels:
            for j in range(config.exp2_repeats):
                cells.append(Cell(idx, 3, level, None, surface=r, sample=j))
                idx += 1
    return cells


def _exp2_size(study: Study, cell: Cell) -> int:
    c = study.config
    P = study.world.level(cell.level).n_polygons
    lo = min(P, max(c.exp2_min_polygons, 2))
    rng = np.random.default_rng(derive_seed(c.seed, "size", cell.repeat, cell.level))
    return int(rng.integers(lo, P + 1))


def _run_cell(study: Study, cell: Cell, with_cv: bool, raster_dir: Path | None) -> ResultRow:
    c = study.config
    t0 = time.perf_counter()
    n = cell.n_polygons if cell.n_polygons is not None else _exp2_size(study, cell)
    row = ResultRow(cell.repeat, cell.scenario, cell.level, n, surface=cell.surface)
    try:
        part = study.world.level(cell.level)
        ids = sample_contiguous(part, n, derive_seed(c.seed, "sample", cell.repeat, cell.scenario, cell.level, n))
        row.mean_polygon_area = float(np.mean(part.areas[sorted(ids)]))
        surf = study.surface(cell.surface, cell.scenario)
        data = aggregate_cases(surf.cases, surf.population, part, ids)
        fit = fit_map(data, surf.observed_stack, surf.population, PriorSpec(), c.fit_options)
        mask = polygon_mask(part, ids)
        base = baseline_predict(data, c.grid)
        rep = score(fit.lambda_pred, surf.lambda_true, mask, part, baseline=base)
        row.overall_corr = rep.overall_corr
        row.mean_within_corr = rep.mean_within_corr
        row.baseline_corr = rep.baseline_corr
        row.converged = fit.converged
        if raster_dir is not None:
            stem = f"r{cell.repeat}_s{cell.scenario}_l{cell.level}_n{n}"
            write_grid_binary(raster_dir / f"{stem}_pred.dgr", fit.lambda_pred)
            write_grid_binary(raster_dir / f"{stem}_truth.dgr", surf.lambda_true)
            np.save(raster_dir / f"{stem}_ids.npy", np.array(sorted(ids)))
        if with_cv:
            k = min(c.k, n)
            cv = kfold_cv(data, surf.observed_stack, surf.population, PriorSpec(), k=k,
                          seed=derive_seed(c.seed, "folds", cell.repeat, cell.level), opts=c.fit_options)
            row.cv_corr = cv.cv_corr
    except (DisaggError, ArithmeticError, ValueError, RuntimeError) as exc:
        log.warning("cell %s failed: %s", cell, exc)
        row.converged = False
        row.error = f"{type(exc).__name__}: {exc}".replace("\n", " ").replace(",", ";")
    row.runtime_seconds = time.perf_counter() - t0
    return row


def _completed(path: Path, key_cols) -> set:
    if not path.exists():
        return set()
    with open(path, newline="") as fh:
        return {tuple(int(r[k]) for k in key_cols) for r in csv.DictReader(fh)}


def _run(config: ExperimentConfig, name: str, cells: list, study: Study, with_cv: bool,
         max_cells: int | None = None) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    raster_dir = None
    if config.save_rasters:
        raster_dir = out / f"{name}_rasters"
        raster_dir.mkdir(exist_ok=True)
    key_cols = ("repeat", "scenario", "level") + (("n_polygons",) if not with_cv else ())
    done = _completed(path, key_cols)

    def key_of(cell):
        return cell.key + ((cell.n_polygons,) if not with_cv else ())

    pending = [cell for cell in cells if key_of(cell) not in done]
    study.prepare()
    if max_cells is not None:
        pending = pending[:max_cells]
    new_file = not path.exists()
    (out / "config.txt").write_text("\n".join(config.to_lines()) + "\n")
    with open(path, "a", newline="") as fh, open(out / f"{name}_timings.csv", "a", newline="") as th:
        w = csv.writer(fh, lineterminator="\n")
        tw = csv.writer(th, lineterminator="\n")
        if new_file:
            w.writerow(RESULT_COLUMNS)
            tw.writerow(["repeat", "scenario", "level", "n_polygons", "runtime_seconds"])
        with ThreadPoolExecutor(max_workers=max(1, config.threads)) as pool:
            for row in pool.map(lambda cell: _run_cell(study, cell, with_cv, raster_dir), pending):
                w.writerow(row.csv_values())
                fh.flush()
                tw.writerow([row.repeat, row.scenario, row.level, row.n_polygons, f"{row.runtime_seconds:.3f}"])
    return path


def run_experiment1(config: ExperimentConfig, max_cells: int | None = None) -> Path:
    """Fit every (surface, scenario, level, polygon count) cell; returns the CSV path.

    ``max_cells`` stops after that many new cells (the remainder is picked up
    by a later call with the same config).
    """
    study = Study(config)
    return _run(config, "exp1", plan_experiment1(config, study), study, with_cv=False, max_cells=max_cells)


def run_experiment2(config: ExperimentConfig, max_cells: int | None = None) -> Path:
    """Scenario-3 repeats pairing pixel-level correlation with k-fold polygon CV correlation."""
    study = Study(config)
    return _run(config, "exp2", plan_experiment2(config, study), study, with_cv=True, max_cells=max_cells)


def describe_plan(config: ExperimentConfig, experiment: int) -> list:
    study = Study(config)
    cells = plan_experiment1(config, study) if experiment == 1 else plan_experiment2(config, study)
    lines = []
    for cell in cells:
        n = cell.n_polygons if cell.n_polygons is not None else _exp2_size(study, cell)
        lines.append(f"repeat={cell.repeat} surface={cell.surface} scenario={cell.scenario} "
                     f"level={cell.level} n_polygons={n}")
    return lines


def read_results(path) -> list:
    """Load a result CSV as dicts with numeric fields converted."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            d = {}
            for k, v in r.items():
                if k in ("repeat", "surface", "scenario", "level", "n_polygons"):
                    d[k] = int(v)
                elif k == "converged":
                    d[k] = v == "true"
                elif k == "error":
                    d[k] = v
                else:
                    d[k] = float(v)
            rows.append(d)
    return rows


def association(rows, x: str, y: str) -> float:
    xs = np.array([r[x] for r in rows], dtype=float)
    ys = np.array([r[y] for r in rows], dtype=float)
    ok = np.isfinite(xs) & np.isfinite(ys)
    return pearson(xs[ok], ys[ok])
