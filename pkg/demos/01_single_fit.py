"""
Fitting one synthetic surface
=============================

Build a 64x64 world, simulate a scenario-2 risk surface (half the real
covariates hidden from the model), aggregate cases to the finest admin level,
and fit.  Pixel predictions are compared against the truth and against the
polygon-rate baseline, and both surfaces are written out as heatmaps.

    python demos/01_single_fit.py [output-dir]
"""

import sys
from pathlib import Path

import numpy as np

from disagg import (
    FitOptions,
    GridSpec,
    aggregate_cases,
    baseline_predict,
    fit_map,
    make_mock_covariates,
    make_population,
    make_real_covariates,
    make_world,
    polygon_mask,
    score,
    simulate_surface,
)
from disagg.render import render_heatmap

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
out.mkdir(exist_ok=True)

grid = GridSpec(64, 64)
world = make_world(grid, (4, 16, 64), irregularity=0.5, seed=1)
real = make_real_covariates(grid, 12, seed=2)
mock = make_mock_covariates(grid, 12, seed=3)
pop = make_population(grid, 1e7, clumpiness=1.0, seed=4)

# %%
# The truth: an intercept plus 12 real covariates, of which the model sees 6.
surf = simulate_surface(2, real, mock, pop, seed=5)
print("observed layers:", ", ".join(surf.observed_stack.names))
print("total cases:", int(surf.total_cases))

# %%
# Only polygon totals reach the model.
part = world.level(3)
data = aggregate_cases(surf.cases, pop, part)
print(f"{part.n_polygons} polygons, mean area {part.areas.mean():.0f} pixels")

fit = fit_map(data, surf.observed_stack, pop, opts=FitOptions(max_iter=500))
p = fit.params
print(f"beta0 {p.beta0:.3f}, rho {np.exp(p.log_rho):.2f}, sigma {np.exp(p.log_sigma):.3f}")
print(f"{fit.n_iterations} iterations, converged={fit.converged}")

# %%
# Score on every pixel of the observed polygons.
mask = polygon_mask(part, data.observed_ids)
base = baseline_predict(data, grid)
rep = score(fit.lambda_pred, surf.lambda_true, mask, part, baseline=base)
print(f"overall correlation   {rep.overall_corr:.3f}")
print(f"baseline correlation  {rep.baseline_corr:.3f}")
print(f"mean within-polygon   {rep.mean_within_corr:.3f}")

render_heatmap(surf.lambda_true, out / "truth.ppm", "log")
render_heatmap(fit.lambda_pred, out / "prediction.ppm", "log")
render_heatmap(base, out / "baseline.ppm", "log")
print("heatmaps written to", out)
