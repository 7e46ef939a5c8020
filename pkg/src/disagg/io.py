"""File formats: grid rasters (text and binary), key=value files, worlds,
simulated surfaces, aggregated data, fits and metric reports.

Grid text format::

    ncols 64
    nrows 64
    xllcorner 0.0
    yllcorner 0.0
    cellsize 1.0
    nodata_value -9999
    <nrows lines of ncols values, top row first>

The binary variant starts with the magic bytes ``DGR1`` followed by a
little-endian header (``int32 ncols, int32 nrows, float64 xllcorner,
yllcorner, cellsize, nodata_value``) and ``nrows * ncols`` float64 values,
top row first.
"""

from __future__ import annotations

import csv
import math
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .fields import CovariateStack
from .geometry import PolygonPartition, World
from .raster import GridSpec, Raster

NODATA = -9999.0
MAGIC = b"DGR1"
_BIN_HEADER = struct.Struct("<4sii4d")
_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def fmt(x) -> str:
    """Round-trip float formatting (shortest repr, 17 significant digits max)."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


# -- rasters -----------------------------------------------------------------

def write_grid(path, raster: Raster, nodata: float = NODATA) -> None:
    g = raster.grid
    v = raster.values[::-1]
    lines = [
        f"ncols {g.nx}",
        f"nrows {g.ny}",
        f"xllcorner {fmt(g.origin_x)}",
        f"yllcorner {fmt(g.origin_y)}",
        f"cellsize {fmt(g.pixel_size)}",
        f"nodata_value {fmt(nodata)}",
    ]
    for row in v:
        lines.append(" ".join(fmt(nodata) if np.isnan(x) else fmt(x) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid(path) -> Raster:
    with open(path) as fh:
        header = {}
        for key in _HEADER_KEYS:
            parts = fh.readline().split()
            if len(parts) != 2 or parts[0].lower() != key:
                raise ConfigurationError(f"{path}: expected header '{key}', got {parts}")
            header[key] = parts[1]
        data = np.loadtxt(fh, ndmin=2)
    nx, ny = int(header["ncols"]), int(header["nrows"])
    grid = GridSpec(nx, ny, float(header["cellsize"]), float(header["xllcorner"]), float(header["yllcorner"]))
    if data.shape != (ny, nx):
        raise ConfigurationError(f"{path}: body has shape {data.shape}, header says {(ny, nx)}")
    nodata = float(header["nodata_value"])
    data = np.where(data == nodata, np.nan, data)
    return Raster(data[::-1].copy(), grid)


def write_grid_binary(path, raster: Raster, nodata: float = NODATA) -> None:
    g = raster.grid
    v = np.where(np.isnan(raster.values), nodata, raster.values)[::-1]
    with open(path, "wb") as fh:
        fh.write(_BIN_HEADER.pack(MAGIC, g.nx, g.ny, g.origin_x, g.origin_y, g.pixel_size, nodata))
        fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_grid_binary(path) -> Raster:
    buf = Path(path).read_bytes()
    magic, nx, ny, x0, y0, cell, nodata = _BIN_HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ConfigurationError(f"{path}: not a DGR1 raster")
    data = np.frombuffer(buf, dtype="<f8", offset=_BIN_HEADER.size)
    if data.size != nx * ny:
        raise ConfigurationError(f"{path}: expected {nx * ny} values, found {data.size}")
    data = data.reshape(ny, nx)[::-1].astype(float)
    data[data == nodata] = np.nan
    return Raster(data, GridSpec(nx, ny, cell, x0, y0))


def read_raster(path) -> Raster:
    """Read either raster format, sniffing the magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    return read_grid_binary(path) if head == MAGIC else read_grid(path)


def write_raster(path, raster: Raster) -> None:
    path = Path(path)
    if path.suffix == ".dgr":
        write_grid_binary(path, raster)
    else:
        write_grid(path, raster)


# -- key=value files -----------------------------------------------------------

def write_kv(path, items) -> None:
    items = items.items() if hasattr(items, "items") else items
    Path(path).write_text("".join(f"{k}={v if isinstance(v, str) else fmt(v)}\n" for k, v in items))


def read_kv(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _ints(s: str) -> list:
    return [int(x) for x in s.split(",") if x.strip()]


# -- worlds ------------------------------------------------------------------

def save_world(directory, world: World, **extra) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g = world.grid
    items = {
        "nx": g.nx,
        "ny": g.ny,
        "pixel_size": g.pixel_size,
        "origin_x": g.origin_x,
        "origin_y": g.origin_y,
        "levels": ",".join(str(p.level) for p in world.partitions),
        "counts": ",".join(str(p.n_polygons) for p in world.partitions),
    }
    for coarse, m in zip(world.partitions, world.nesting):
        items[f"nesting_{coarse.level + 1}"] = ",".join(str(int(x)) for x in m)
    items.update({k: str(v) for k, v in extra.items()})
    write_kv(d / "world.txt", items)
    for part in world.partitions:
        write_grid(d / f"labels_level{part.level}.asc", Raster(part.labels.astype(float), g), nodata=-1)


def load_world(directory) -> World:
    d = Path(directory)
    kv = read_kv(d / "world.txt")
    grid = GridSpec(int(kv["nx"]), int(kv["ny"]), float(kv["pixel_size"]),
                    float(kv["origin_x"]), float(kv["origin_y"]))
    parts = []
    for level in _ints(kv["levels"]):
        r = read_grid(d / f"labels_level{level}.asc")
        if r.grid != grid:
            raise ConfigurationError(f"level {level} labels do not match the world grid")
        parts.append(PolygonPartition.from_labels(r.values.astype(np.int64), level))
    nesting = []
    for p in parts[1:]:
        m = np.array(_ints(kv[f"nesting_{p.level}"]), dtype=np.int64)
        m.setflags(write=False)
        nesting.append(m)
    return World(grid, tuple(parts), tuple(nesting))


# -- covariate stacks ----------------------------------------------------------

def save_stack(directory, stack: CovariateStack) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    items = [("layers", ",".join(stack.names)), ("standardized", fmt(stack.standardized))]
    for name, off, sc in zip(stack.names, stack.offsets, stack.scales):
        items += [(f"offset_{name}", fmt(off)), (f"scale_{name}", fmt(sc))]
    write_kv(d / "stack.txt", items)
    for name, r in zip(stack.names, stack.rasters):
        write_grid(d / f"{name}.asc", r)


def load_stack(directory) -> CovariateStack:
    """Load a stack directory.  A directory of bare ``.asc`` files without
    ``stack.txt`` is read as raw (unstandardized) layers in name order."""
    d = Path(directory)
    manifest = d / "stack.txt"
    if not manifest.exists():
        files = sorted(list(d.glob("*.asc")) + list(d.glob("*.dgr")))
        return CovariateStack([f.stem for f in files], [read_raster(f) for f in files])
    kv = read_kv(manifest)
    names = [n for n in kv["layers"].split(",") if n]
    return CovariateStack(
        names,
        [read_raster(d / f"{n}.asc") for n in names],
        standardized=kv.get("standardized") == "true",
        offsets=np.array([float(kv[f"offset_{n}"]) for n in names]),
        scales=np.array([float(kv[f"scale_{n}"]) for n in names]),
    )


# -- simulated surfaces and aggregated data -----------------------------------

def save_surface(directory, surface) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_grid(d / "lambda.asc", surface.lambda_true)
    write_grid(d / "cases.asc", surface.cases)
    write_grid(d / "population.asc", surface.population)
    coefs = [("beta0", surface.beta0)]
    coefs += [(f"beta_{n}", b) for n, b in zip(surface.observed_stack.names, surface.beta_obs)]
    coefs += [(f"beta_{n}", b) for n, b in zip(surface.unobserved_stack.names, surface.beta_unobs)]
    write_kv(d / "coefficients.txt", coefs)
    write_kv(
        d / "scenario.txt",
        [
            ("scenario", surface.scenario.id),
            ("observed", ",".join(surface.observed_stack.names)),
            ("unobserved", ",".join(surface.unobserved_stack.names)),
            ("seed", surface.seed),
            ("attempts", surface.attempts),
            ("attempt_totals", ",".join(str(t) for t in surface.attempt_totals)),
            ("total_cases", surface.total_cases),
        ],
    )
    save_stack(d / "observed", surface.observed_stack)


AGG_COLUMNS = ["polygon_id", "count", "population", "rate", "observed"]


def write_aggregated(path, data) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGG_COLUMNS)
        for i in range(data.partition.n_polygons):
            w.writerow([i, fmt(data.counts[i]), fmt(data.populations[i]), fmt(data.rates[i]),
                        int(i in data.observed_ids)])


def read_aggregated(path, partition: PolygonPartition):
    from .simulate import AggregatedData

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != partition.n_polygons:
        raise ConfigurationError(f"{path}: {len(rows)} rows for {partition.n_polygons} polygons")
    rows.sort(key=lambda r: int(r["polygon_id"]))
    counts = np.array([float(r["count"]) for r in rows])
    pops = np.array([float(r["population"]) for r in rows])
    rates = np.array([float(r["rate"]) for r in rows])
    ids = frozenset(int(r["polygon_id"]) for r in rows if r["observed"].strip() in ("1", "true"))
    return AggregatedData(partition, ids, counts, pops, rates)


# -- fits --------------------------------------------------------------------

def save_fit(directory, fit, names) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    p = fit.params
    items = [("beta0", p.beta0)]
    items += [(f"beta_{n}", b) for n, b in zip(names, p.beta)]
    items += [("log_rho", p.log_rho), ("log_sigma", p.log_sigma)]
    items += [(f"u_{i:05d}", v) for i, v in enumerate(p.u)]
    items += [
        ("neg_log_posterior", fit.neg_log_posterior),
        ("n_iterations", fit.n_iterations),
        ("converged", fit.converged),
        ("grad_norm", fit.grad_norm),
    ]
    if p.transform is not None:
        tnames, offs, scs = p.transform
        items += [("transform_layers", ",".join(tnames))]
        items += [(f"transform_offset_{n}", o) for n, o in zip(tnames, offs)]
        items += [(f"transform_scale_{n}", s) for n, s in zip(tnames, scs)]
    write_kv(d / "params.txt", items)
    write_grid(d / "lambda_pred.asc", fit.lambda_pred)
    with open(d / "diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "objective", "grad_norm", "step_size"])
        for h in fit.history:
            w.writerow([h.iteration, fmt(h.objective), fmt(h.grad_norm), fmt(h.step_size)])


def load_params(path):
    from .model import ModelParams

    kv = read_kv(path)
    betas = [(k[5:], float(v)) for k, v in kv.items() if k.startswith("beta_")]
    us = sorted((k, float(v)) for k, v in kv.items() if k.startswith("u_"))
    transform = None
    if "transform_layers" in kv:
        tn = tuple(n for n in kv["transform_layers"].split(",") if n)
        transform = (
            tn,
            tuple(float(kv[f"transform_offset_{n}"]) for n in tn),
            tuple(float(kv[f"transform_scale_{n}"]) for n in tn),
        )
    params = ModelParams(
        beta0=float(kv["beta0"]),
        beta=np.array([b for _, b in betas]),
        log_rho=float(kv["log_rho"]),
        log_sigma=float(kv["log_sigma"]),
        u=np.array([v for _, v in us]),
        transform=transform,
    )
    return params, [n for n, _ in betas]


# -- reports -----------------------------------------------------------------

def write_metric_report(path, report) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["polygon_id", "within_corr"])
        for pid, r in zip(report.within_ids, report.within_corrs):
            w.writerow([pid, fmt(r)])
        w.writerow(["mean_within", fmt(report.mean_within_corr)])
        w.writerow(["overall", fmt(report.overall_corr)])
        w.writerow(["baseline", fmt(report.baseline_corr)])


def write_cv_report(path, report) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["polygon_id", "fold", "true_rate", "pred_rate"])
        for pid, t, p in zip(report.polygon_ids, report.polygon_true_rates, report.polygon_pred_rates):
            w.writerow([int(pid), report.assignments[int(pid)], fmt(t), fmt(p)])
        w.writerow(["cv_corr", "", "", fmt(report.cv_corr)])
