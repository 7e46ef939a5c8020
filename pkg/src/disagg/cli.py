"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigurationError, DisaggError, NumericalError
from .evaluation import baseline_predict, kfold_cv, score
from .experiments import ExperimentConfig, describe_plan, run_experiment1, run_experiment2
from .fields import CovariateStack, apply_transform, make_mock_covariates, make_population, make_real_covariates, standardize
from .geometry import make_world, polygon_mask, sample_contiguous
from .model import FitOptions, PriorSpec, fit_map, predict_pixels
from .raster import GridSpec
from .render import render_heatmap
from .simulate import aggregate_cases, simulate_surface

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _load_config(args) -> ExperimentConfig:
    values = io.read_kv(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.out is not None:
        values["out"] = args.out
    if args.threads is not None:
        values["threads"] = str(args.threads)
    return ExperimentConfig.from_mapping(values)


def _out(args, default="."):
    d = Path(args.out or default)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _seed(args, default=0):
    return args.seed if args.seed is not None else default


# -- subcommands -------------------------------------------------------------

def cmd_world(args):
    grid = GridSpec(args.nx, args.ny, args.pixel_size)
    world = make_world(grid, _ints(args.levels), args.irregularity, _seed(args))
    out = _out(args)
    io.save_world(out, world, irregularity=args.irregularity, seed=_seed(args))
    for p in world.partitions:
        print(f"level {p.level}: {p.n_polygons} polygons, mean area {p.areas.mean():.1f} pixels")


def cmd_covariates(args):
    world = io.load_world(args.world)
    out = _out(args)
    make = make_real_covariates if args.kind == "real" else make_mock_covariates
    stack = make(world.grid, args.count, seed=_seed(args), node_spacing=args.node_spacing)
    io.save_stack(out, stack)
    if args.population_total:
        pop = make_population(world.grid, args.population_total, args.clumpiness,
                              seed=_seed(args) + 1, node_spacing=args.node_spacing)
        io.write_grid(out / "population.asc", pop)
    print(f"wrote {len(stack)} {args.kind} layers to {out}")


def _stack_arg(path):
    stack = io.load_stack(path)
    return stack if stack.standardized else standardize(stack)


def cmd_simulate(args):
    world = io.load_world(args.world)
    real = _stack_arg(args.real)
    mock = _stack_arg(args.mock) if args.mock else real.select([])
    pop = io.read_raster(args.population)
    surf = simulate_surface(args.scenario, real, mock, pop,
                            max_total_cases=args.max_total_cases, max_attempts=args.max_attempts,
                            seed=_seed(args))
    out = _out(args)
    io.save_surface(out, surf)
    part = world.level(args.level)
    ids = None
    if args.n_polygons:
        ids = sample_contiguous(part, args.n_polygons, _seed(args))
    data = aggregate_cases(surf.cases, pop, part, ids)
    io.write_aggregated(out / f"aggregated_level{args.level}.csv", data)
    print(f"scenario {args.scenario}: {surf.total_cases} cases after {surf.attempts} attempt(s)")


def _fit_inputs(args):
    world = io.load_world(args.world)
    part = world.level(args.level)
    sim = Path(args.sim)
    data = io.read_aggregated(args.aggregated or sim / f"aggregated_level{args.level}.csv", part)
    covs = io.load_stack(sim / "observed")
    pop = io.read_raster(sim / "population.asc")
    return world, part, data, covs, pop


def _fit_opts(args):
    return FitOptions(max_iter=args.max_iter, grad_tol=args.grad_tol, node_spacing=args.node_spacing)


def cmd_fit(args):
    _, _, data, covs, pop = _fit_inputs(args)
    fit = fit_map(data, covs, pop, PriorSpec(), _fit_opts(args))
    out = _out(args)
    io.save_fit(out, fit, covs.names)
    print(f"objective {fit.neg_log_posterior:.6f} after {fit.n_iterations} iterations "
          f"(converged={fit.converged}, |grad|={fit.grad_norm:.3g})")


def cmd_predict(args):
    params, _ = io.load_params(Path(args.fit) / "params.txt")
    covs = io.load_stack(args.covariates)
    if not covs.standardized and params.transform is not None:
        names, offs, scales = params.transform
        ref = CovariateStack(list(names), list(covs.rasters), True, np.array(offs), np.array(scales))
        covs = apply_transform(covs, ref)
    pop = io.read_raster(args.population)
    pred = predict_pixels(params, covs, pop, args.node_spacing)
    out = _out(args)
    io.write_raster(out / "lambda_pred.asc", pred["lambda"])
    io.write_raster(out / "expected_cases.asc", pred["expected_cases"])


def cmd_score(args):
    world = io.load_world(args.world)
    part = world.level(args.level)
    data = io.read_aggregated(args.aggregated, part)
    pred = io.read_raster(args.pred)
    truth = io.read_raster(args.truth)
    mask = polygon_mask(part, data.observed_ids)
    rep = score(pred, truth, mask, part, baseline=baseline_predict(data, world.grid))
    out = _out(args)
    io.write_metric_report(out / "metrics.csv", rep)
    print(f"overall={rep.overall_corr:.4f} mean_within={rep.mean_within_corr:.4f} "
          f"baseline={rep.baseline_corr:.4f}")


def cmd_cv(args):
    _, _, data, covs, pop = _fit_inputs(args)
    rep = kfold_cv(data, covs, pop, PriorSpec(), k=args.k, seed=_seed(args), opts=_fit_opts(args))
    out = _out(args)
    io.write_cv_report(out / "cv.csv", rep)
    print(f"cv_corr={rep.cv_corr:.4f} folds converged={sum(rep.fold_converged)}/{rep.k}")


def cmd_exp(args, which):
    config = _load_config(args)
    if args.dry_run:
        for line in config.to_lines():
            print("#", line)
        for line in describe_plan(config, which):
            print(line)
        return
    run = run_experiment1 if which == 1 else run_experiment2
    path = run(config)
    print(f"results written to {path}")


def cmd_render(args):
    render_heatmap(io.read_raster(args.raster), args.image, args.palette)


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    fitting = argparse.ArgumentParser(add_help=False)
    fitting.add_argument("--max-iter", type=int, default=500)
    fitting.add_argument("--grad-tol", type=float, default=1e-6)
    fitting.add_argument("--node-spacing", type=float, default=4)

    p = _Parser(prog="disagg", description="Disaggregation regression simulation study")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("world", parents=[common], help="build a synthetic nested geography")
    s.add_argument("--nx", type=int, default=64)
    s.add_argument("--ny", type=int, default=64)
    s.add_argument("--pixel-size", type=float, default=1.0)
    s.add_argument("--levels", default="4,16,64", help="polygon counts per admin level")
    s.add_argument("--irregularity", type=float, default=0.5)
    s.set_defaults(func=cmd_world)

    s = sub.add_parser("covariates", parents=[common], help="simulate a covariate stack")
    s.add_argument("--world", required=True)
    s.add_argument("--kind", choices=["real", "mock"], default="real")
    s.add_argument("--count", type=int, default=12)
    s.add_argument("--node-spacing", type=float, default=4)
    s.add_argument("--population-total", type=float, default=0.0,
                   help="also write population.asc with this total")
    s.add_argument("--clumpiness", type=float, default=1.0)
    s.set_defaults(func=cmd_covariates)

    s = sub.add_parser("simulate", parents=[common], help="simulate a risk surface and cases")
    s.add_argument("--world", required=True)
    s.add_argument("--real", required=True, help="real covariate stack directory")
    s.add_argument("--mock", help="mock covariate stack directory")
    s.add_argument("--population", required=True)
    s.add_argument("--scenario", type=int, choices=[1, 2, 3], default=1)
    s.add_argument("--level", type=int, default=3)
    s.add_argument("--n-polygons", type=int, default=0, help="contiguous sample size (0: all)")
    s.add_argument("--max-total-cases", type=float, default=None)
    s.add_argument("--max-attempts", type=int, default=50)
    s.set_defaults(func=cmd_simulate)

    for name, func, helptext in (("fit", cmd_fit, "MAP fit"), ("cv", cmd_cv, "polygon-level k-fold CV")):
        s = sub.add_parser(name, parents=[common, fitting], help=helptext)
        s.add_argument("--world", required=True)
        s.add_argument("--sim", required=True, help="directory written by 'simulate'")
        s.add_argument("--level", type=int, default=3)
        s.add_argument("--aggregated", default=None)
        if name == "cv":
            s.add_argument("--k", type=int, default=5)
        s.set_defaults(func=func)

    s = sub.add_parser("predict", parents=[common], help="predict pixel rates from a fit")
    s.add_argument("--fit", required=True)
    s.add_argument("--covariates", required=True)
    s.add_argument("--population", required=True)
    s.add_argument("--node-spacing", type=float, default=4)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("score", parents=[common], help="correlation metrics against truth")
    s.add_argument("--world", required=True)
    s.add_argument("--level", type=int, default=3)
    s.add_argument("--aggregated", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.set_defaults(func=cmd_score)

    for name, which in (("exp1", 1), ("exp2", 2)):
        s = sub.add_parser(name, parents=[common], help=f"run experiment {which}")
        s.add_argument("--config", default=None, help="key=value config file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--dry-run", action="store_true", help="print the resolved cell plan")
        s.set_defaults(func=lambda a, w=which: cmd_exp(a, w))

    s = sub.add_parser("render", parents=[common], help="render a raster as a PPM heatmap")
    s.add_argument("raster")
    s.add_argument("image")
    s.add_argument("--palette", choices=["linear", "log"], default="linear")
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DisaggError, ValueError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
