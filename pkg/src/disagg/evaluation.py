"""Correlation metrics, the polygon-rate baseline and polygon-level CV."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import CovariateStack
from .geometry import PolygonPartition
from .model import FitOptions, PriorSpec, fit_map
from .raster import GridSpec, Raster
from .simulate import AggregatedData, _check_populations


def pearson(a, b) -> float:
    """Pearson correlation; NaN when either vector is constant."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("correlation needs at least two values")
    da = a - a.mean()
    db = b - b.mean()
    saa = float(da @ da)
    sbb = float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        return math.nan
    r = float(da @ db) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


@dataclass
class MetricReport:
    overall_corr: float
    within_ids: list
    within_corrs: list
    mean_within_corr: float
    excluded_ids: list = field(default_factory=list)
    baseline_corr: float = math.nan


def baseline_predict(data: AggregatedData, grid: GridSpec | None = None) -> Raster:
    """Assign every pixel its polygon's observed rate (NaN outside observed polygons)."""
    obs = data.observed
    _check_populations(obs, data.populations)
    per_poly = np.full(data.partition.n_polygons, np.nan)
    per_poly[obs] = data.counts[obs] / data.populations[obs]
    values = per_poly[data.partition.labels]
    if grid is None:
        ny, nx = data.partition.grid_shape
        grid = GridSpec(nx, ny)
    return Raster(values, grid)


def score(
    pred: Raster,
    truth: Raster,
    mask: np.ndarray,
    partition: PolygonPartition,
    baseline: Raster | None = None,
) -> MetricReport:
    """Overall and within-polygon correlation of ``pred`` against ``truth``.

    Only masked pixels count.  Polygons with fewer than two pixels or a
    constant truth are excluded from the within-polygon list.
    """
    p = np.asarray(pred.values if isinstance(pred, Raster) else pred, dtype=float)
    t = np.asarray(truth.values if isinstance(truth, Raster) else truth, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if p.shape != t.shape or mask.shape != t.shape:
        raise ValueError("prediction, truth and mask must share one grid")
    if not mask.any():
        raise ValueError("mask selects no pixels")
    overall = pearson(p[mask], t[mask]) if mask.sum() >= 2 else math.nan

    labels = partition.labels
    ids = np.unique(labels[mask])
    within_ids, within, excluded = [], [], []
    for pid in ids:
        sel = mask & (labels == pid)
        if sel.sum() < 2:
            excluded.append(int(pid))
            continue
        tv = t[sel]
        if np.all(tv == tv[0]):
            excluded.append(int(pid))
            continue
        r = pearson(p[sel], tv)
        if math.isnan(r):
            excluded.append(int(pid))
            continue
        within_ids.append(int(pid))
        within.append(r)
    mean_within = float(np.mean(within)) if within else math.nan

    base_r = math.nan
    if baseline is not None:
        b = np.asarray(baseline.values, dtype=float)
        base_r = pearson(b[mask], t[mask]) if mask.sum() >= 2 else math.nan
    return MetricReport(overall, within_ids, within, mean_within, excluded, base_r)


@dataclass
class CvReport:
    k: int
    assignments: dict  # polygon id -> fold
    polygon_ids: np.ndarray
    polygon_true_rates: np.ndarray
    polygon_pred_rates: np.ndarray
    cv_corr: float
    fold_converged: list = field(default_factory=list)


def assign_folds(ids, k: int, seed) -> dict:
    """Random split of ``ids`` into ``k`` folds whose sizes differ by at most one."""
    ids = np.array(sorted(int(i) for i in ids))
    rng = np.random.default_rng(np.random.SeedSequence([int(s) for s in np.atleast_1d(seed)] + [0x666F6C64]))
    perm = rng.permutation(ids)
    return {int(pid): int(pos % k) for pos, pid in enumerate(perm)}


def kfold_cv(
    data: AggregatedData,
    covs: CovariateStack,
    population: Raster,
    prior: PriorSpec = PriorSpec(),
    k: int = 5,
    seed=0,
    opts: FitOptions | None = None,
) -> CvReport:
    """Hold out whole polygons fold by fold, refit, and correlate predicted
    with observed polygon rates.

    A held-out polygon's predicted rate is the population-weighted mean of
    the pixel rates predicted from the remaining folds.
    """
    opts = opts or FitOptions()
    obs = data.observed
    if k < 2:
        raise ValueError("k must be at least 2")
    if obs.size < k:
        raise ValueError(f"{obs.size} observed polygons cannot be split into {k} folds")
    folds = assign_folds(obs, k, seed)
    labels = data.partition.labels.ravel()
    pop = population.flat
    pred = {}
    converged = []
    for f in range(k):
        held = [pid for pid in obs if folds[int(pid)] == f]
        train = data.with_observed(pid for pid in obs if folds[int(pid)] != f)
        fit = fit_map(train, covs, population, prior, opts)
        converged.append(bool(fit.converged))
        expected = fit.lambda_pred.flat * pop
        num = np.bincount(labels, weights=expected, minlength=data.partition.n_polygons)
        den = np.bincount(labels, weights=pop, minlength=data.partition.n_polygons)
        for pid in held:
            pred[int(pid)] = num[pid] / den[pid]
    ids = np.array(obs)
    true_rates = data.counts[ids] / data.populations[ids]
    pred_rates = np.array([pred[int(i)] for i in ids])
    return CvReport(
        k=k,
        assignments=folds,
        polygon_ids=ids,
        polygon_true_rates=true_rates,
        polygon_pred_rates=pred_rates,
        cv_corr=pearson(pred_rates, true_rates),
        fold_converged=converged,
    )
