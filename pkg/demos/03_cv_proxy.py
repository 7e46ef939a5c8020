"""
Polygon cross-validation as a proxy
===================================

Pixel-level truth is never available in practice; the question is whether
held-out polygon accuracy tracks it.  This runs a short experiment-2 sweep
through the library's runner and reports the association between the two
columns of the result CSV.

    python demos/03_cv_proxy.py [output-dir]
"""

import sys

from disagg import ExperimentConfig, run_experiment2
from disagg.experiments import association, read_results

out = sys.argv[1] if len(sys.argv) > 1 else "demo_exp2"
# at least 16 polygons so each of the 5 folds holds a few
config = ExperimentConfig(n_surfaces=4, exp2_levels=(3,), exp2_repeats=2, exp2_min_polygons=16,
                          out=out, seed=3)
path = run_experiment2(config)
rows = read_results(path)

print("repeat level  n  cv_corr  overall_corr")
for r in rows:
    print(f"{r['repeat']:6d} {r['level']:5d} {r['n_polygons']:2d}  {r['cv_corr']:7.3f}  {r['overall_corr']:12.3f}")
print(f"association r = {association(rows, 'cv_corr', 'overall_corr'):.3f} over {len(rows)} repeats")
print("results in", path)
