"""
Accuracy against polygon size
=============================

The same scenario-3 surfaces are aggregated to each admin level in turn.
Smaller polygons carry more spatial information, so pixel-level correlation
should rise from level 1 to level 3.  A handful of surfaces keeps this under
a few minutes on one core.

    python demos/02_polygon_size.py [n_surfaces]
"""

import sys

import numpy as np

from disagg import (
    GridSpec,
    aggregate_cases,
    fit_map,
    make_mock_covariates,
    make_population,
    make_real_covariates,
    make_world,
    polygon_mask,
    score,
    simulate_surface,
)

n_surfaces = int(sys.argv[1]) if len(sys.argv) > 1 else 4
grid = GridSpec(64, 64)
world = make_world(grid, (4, 16, 64), 0.5, seed=11)
real = make_real_covariates(grid, 12, seed=12)
mock = make_mock_covariates(grid, 12, seed=13)
pop = make_population(grid, 1e7, 1.0, seed=14)

table = {p.level: [] for p in world.partitions}
for s in range(n_surfaces):
    surf = simulate_surface(3, real, mock, pop, seed=100 + s)
    for part in world.partitions:
        data = aggregate_cases(surf.cases, pop, part)
        fit = fit_map(data, surf.observed_stack, pop)
        rep = score(fit.lambda_pred, surf.lambda_true, polygon_mask(part, data.observed_ids), part)
        table[part.level].append(rep.overall_corr)

print("level  polygons  mean area  median overall corr")
for part in world.partitions:
    print(f"{part.level:5d}  {part.n_polygons:8d}  {part.areas.mean():9.0f}  {np.median(table[part.level]):.3f}")
