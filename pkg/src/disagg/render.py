"""Single-raster heatmaps as binary PPM (P6) images.

The colour ramp has 256 steps, linearly interpolated between these anchors
(ramp position: RGB)::

    0: (68, 1, 84)   64: (59, 82, 139)   128: (33, 145, 140)
    192: (94, 201, 98)   255: (253, 231, 37)

Linear palette: ``index = round(255 * (v - min) / (max - min))``.
Log palette: values are first clamped to ``max(v, 1e-6 * max)`` and then
mapped linearly in log space, so zeros land on the ramp floor.
Missing (NaN) pixels are drawn grey (128, 128, 128).  A constant raster maps
every pixel to ramp position 0.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .raster import Raster

LOG_FLOOR = 1e-6
MISSING_RGB = (128, 128, 128)
_ANCHORS = np.array([0, 64, 128, 192, 255])
_ANCHOR_RGB = np.array(
    [(68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)], dtype=float
)
RAMP = np.column_stack(
    [np.interp(np.arange(256), _ANCHORS, _ANCHOR_RGB[:, c]) for c in range(3)]
).round().astype(np.uint8)


def ramp_indices(values: np.ndarray, palette: str = "linear"):
    """Ramp position (0..255) per pixel, the value range, and the missing mask."""
    v = np.asarray(values, dtype=float)
    missing = np.isnan(v)
    if missing.all():
        raise ValueError("raster has no non-missing pixels")
    ok = v[~missing]
    vmin, vmax = float(ok.min()), float(ok.max())
    if palette == "linear":
        t = v
        lo, hi = vmin, vmax
    elif palette == "log":
        if vmax <= 0:
            raise ValueError("log palette needs a positive maximum")
        floor = LOG_FLOOR * vmax
        t = np.log(np.maximum(v, floor))
        lo, hi = float(np.log(max(vmin, floor))), float(np.log(vmax))
    else:
        raise ValueError(f"unknown palette {palette!r}; use 'linear' or 'log'")
    idx = np.zeros(v.shape, dtype=np.int64)
    if hi > lo:
        with np.errstate(invalid="ignore"):
            idx = np.rint(255 * (t - lo) / (hi - lo))
        idx = np.where(missing, 0, idx).astype(np.int64)
    return np.clip(idx, 0, 255), (vmin, vmax), missing


def render_heatmap(raster: Raster, out, palette: str = "linear") -> Path:
    """Write ``raster`` as a P6 PPM (top row first) plus a ``.txt`` sidecar
    holding the value range."""
    idx, (vmin, vmax), missing = ramp_indices(raster.values, palette)
    rgb = RAMP[idx]
    rgb[missing] = MISSING_RGB
    rgb = rgb[::-1]
    out = Path(out)
    ny, nx = raster.values.shape
    with open(out, "wb") as fh:
        fh.write(f"P6\n{nx} {ny}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
    out.with_suffix(out.suffix + ".txt").write_text(
        f"min={vmin!r}\nmax={vmax!r}\npalette={palette}\nmissing={int(missing.sum())}\n"
    )
    return out


def read_ppm(path) -> np.ndarray:
    """Read a P6 file written by :func:`render_heatmap` as ``(rows, cols, 3)``."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    nx, ny = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(ny, nx, 3)
