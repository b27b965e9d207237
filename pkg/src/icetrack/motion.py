"""Stochastic Lagrangian motion model and the glacier surface interpolant.

State layout: each particle state is a length-6 vector
``[x, y, vx, vy, z, delta_s]`` — map-plane position (m), map-plane
velocity (m/day), elevation (m), and a systematic elevation offset from
the reference surface (m). The elevation is slaved to the surface:
``z = S(x, t) + delta_s`` holds after initialization and every
transition. Times are plain floats in days.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import RectBivariateSpline

__all__ = [
    "GridMismatch",
    "STATE_DIM",
    "IX",
    "IV",
    "IZ",
    "IDS",
    "ProcessNoise",
    "InitialDistribution",
    "Raster",
    "read_raster",
    "crevasse_fill",
    "SurfaceModel",
    "transition",
    "init_state",
]

STATE_DIM = 6
IX = slice(0, 2)   # map-plane position
IV = slice(2, 4)   # map-plane velocity
IZ = 4             # elevation
IDS = 5            # systematic elevation offset


class GridMismatch(ValueError):
    """Rasters do not share a common grid."""


def _check_cov(m, n, name):
    arr = np.asarray(m, dtype=float).reshape(n, n)
    if not np.allclose(arr, arr.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    if np.any(np.linalg.eigvalsh(arr) < -1e-10):
        raise ValueError(f"{name} must be positive semidefinite")
    return arr


@dataclass(frozen=True)
class ProcessNoise:
    """Transition noise: random-acceleration std (m/day^2 per axis) and
    the characteristic small-scale slope driving the elevation-offset walk."""

    sigma_a: np.ndarray
    sigma_z: float

    def __post_init__(self):
        sa = np.asarray(self.sigma_a, dtype=float).reshape(2)
        if np.any(sa < 0) or self.sigma_z < 0:
            raise ValueError("noise components must be nonnegative")
        sa.setflags(write=False)
        object.__setattr__(self, "sigma_a", sa)
        object.__setattr__(self, "sigma_z", float(self.sigma_z))


@dataclass(frozen=True)
class InitialDistribution:
    """Gaussian initial state: position, velocity and elevation offset."""

    x_mean: np.ndarray
    x_cov: np.ndarray
    v_mean: np.ndarray
    v_cov: np.ndarray
    delta_s_var: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x_mean", np.asarray(self.x_mean, dtype=float).reshape(2))
        object.__setattr__(self, "v_mean", np.asarray(self.v_mean, dtype=float).reshape(2))
        object.__setattr__(self, "x_cov", _check_cov(self.x_cov, 2, "x_cov"))
        object.__setattr__(self, "v_cov", _check_cov(self.v_cov, 2, "v_cov"))
        if self.delta_s_var < 0:
            raise ValueError("delta_s_var must be nonnegative")
        object.__setattr__(self, "delta_s_var", float(self.delta_s_var))


@dataclass
class Raster:
    """Regular grid of values; row 0 is the northernmost row (file order).

    ``x0``/``y0`` are the lower-left corner of the lower-left cell;
    coordinates refer to cell centers.
    """

    values: np.ndarray
    x0: float
    y0: float
    cellsize: float
    nodata: float = -9999.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("raster values must be 2-D")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def x_centers(self) -> np.ndarray:
        return self.x0 + (np.arange(self.shape[1]) + 0.5) * self.cellsize

    def y_centers_ascending(self) -> np.ndarray:
        return self.y0 + (np.arange(self.shape[0]) + 0.5) * self.cellsize

    def values_y_ascending(self) -> np.ndarray:
        return self.values[::-1]

    def same_grid(self, other: "Raster") -> bool:
        return (self.shape == other.shape
                and abs(self.x0 - other.x0) < 1e-6
                and abs(self.y0 - other.y0) < 1e-6
                and abs(self.cellsize - other.cellsize) < 1e-9)

    def write_esri_ascii(self, path) -> None:
        rows, cols = self.shape
        header = (f"ncols {cols}\nnrows {rows}\n"
                  f"xllcorner {float(self.x0)!r}\nyllcorner {float(self.y0)!r}\n"
                  f"cellsize {float(self.cellsize)!r}\nNODATA_value {float(self.nodata)!r}\n")
        body = np.where(np.isfinite(self.values), self.values, self.nodata)
        with open(path, "w") as fh:
            fh.write(header)
            for row in body:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def _read_esri_ascii(path) -> Raster:
    with open(path) as fh:
        header = {}
        pos = fh.tell()
        for _ in range(6):
            pos = fh.tell()
            line = fh.readline()
            parts = line.split()
            if len(parts) == 2 and not _is_number(parts[0]):
                header[parts[0].lower()] = float(parts[1])
            else:
                fh.seek(pos)
                break
        data = np.loadtxt(fh)
    for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if key not in header:
            raise ValueError(f"ESRI ASCII grid {path} is missing header field {key}")
    nodata = header.get("nodata_value", -9999.0)
    values = np.atleast_2d(data).astype(float)
    if values.shape != (int(header["nrows"]), int(header["ncols"])):
        raise ValueError(f"grid shape {values.shape} does not match header in {path}")
    values = np.where(values == nodata, np.nan, values)
    return Raster(values, header["xllcorner"], header["yllcorner"],
                  header["cellsize"], nodata)


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def _read_geotiff(path) -> Raster:
    from PIL import Image

    with Image.open(path) as img:
        values = np.asarray(img, dtype=float)
        if values.ndim != 2:
            raise ValueError(f"GeoTIFF {path} must be single-band")
        tags = getattr(img, "tag_v2", {}) or {}
        scale = tags.get(33550)
        tie = tags.get(33922)
    if scale is None or tie is None:
        raise ValueError(f"GeoTIFF {path} lacks pixel-scale/tiepoint georeferencing tags")
    sx, sy = float(scale[0]), float(scale[1])
    if abs(sx - sy) > 1e-9:
        raise ValueError("only square-cell GeoTIFFs are supported")
    # tiepoint maps raster (i, j) (top-left corner) to model (x, y)
    i, j, _, x, y, _ = (float(t) for t in tie[:6])
    x0 = x - i * sx
    ytop = y + j * sy
    y0 = ytop - values.shape[0] * sy
    return Raster(values, x0, y0, sx)


def read_raster(path) -> Raster:
    """Load a single-band elevation or mask raster (.asc or .tif/.tiff)."""
    suffix = Path(path).suffix.lower()
    if suffix in (".tif", ".tiff"):
        return _read_geotiff(path)
    return _read_esri_ascii(path)


def crevasse_fill(raster: Raster, mask: Optional[Raster], kernel_m: float) -> Raster:
    """Remove transient pits: maximum filter then Gaussian smoothing.

    Both filters use the given kernel (meters, interpreted as full
    width): the max-filter footprint is the nearest odd cell count and
    the Gaussian std is kernel/2, truncated at 3 std. Cells outside the
    mask are returned untouched.
    """
    cell = raster.cellsize
    if kernel_m < cell:
        raise ValueError("kernel must be at least one grid spacing")
    size = max(1, int(round(kernel_m / cell)))
    if size % 2 == 0:
        size += 1
    filled = ndimage.maximum_filter(raster.values, size=size, mode="nearest")
    sigma = (kernel_m / 2.0) / cell
    smooth = ndimage.gaussian_filter(filled, sigma=sigma, truncate=3.0, mode="nearest")
    if mask is not None:
        if not raster.same_grid(mask):
            raise GridMismatch("mask grid does not match the DEM grid")
        inside = mask.values > 0.5
        smooth = np.where(inside, smooth, raster.values)
    return Raster(smooth, raster.x0, raster.y0, raster.cellsize, raster.nodata)


def _fill_nodata(values: np.ndarray) -> np.ndarray:
    if not np.any(np.isnan(values)):
        return values
    invalid = np.isnan(values)
    idx = ndimage.distance_transform_edt(invalid, return_distances=False, return_indices=True)
    return values[tuple(idx)]


class SurfaceModel:
    """Time-interpolated, crevasse-filled elevation surface S(x, t).

    Within an epoch, elevations come from a bicubic interpolating spline
    over the (smoothed) raster; between epoch times the two bracketing
    epochs are blended linearly; outside the covered time span the
    nearest epoch is used. Positions outside the raster evaluate to NaN.

    Immutable after construction; safe to share across workers.
    """

    def __init__(self, epochs: Sequence[tuple[float, Raster]], order: int = 3):
        if not epochs:
            raise ValueError("at least one epoch is required")
        epochs = sorted(epochs, key=lambda e: e[0])
        base = epochs[0][1]
        for _, rast in epochs[1:]:
            if not base.same_grid(rast):
                raise GridMismatch("epoch rasters do not share a common grid")
        self.times = np.array([t for t, _ in epochs], dtype=float)
        self.rasters = [r for _, r in epochs]
        self.order = int(order)
        x = base.x_centers()
        y = base.y_centers_ascending()
        k = min(self.order, len(x) - 1, len(y) - 1)
        self._splines = [
            RectBivariateSpline(y, x, _fill_nodata(r.values_y_ascending()), kx=k, ky=k, s=0)
            for r in self.rasters
        ]
        self._xlim = (x[0], x[-1])
        self._ylim = (y[0], y[-1])

    @classmethod
    def prepare(cls, epochs: Sequence[tuple[float, Raster]],
                mask: Optional[Raster], kernel_m: float, order: int = 3) -> "SurfaceModel":
        """Crevasse-fill every epoch raster inside the mask, then build the
        interpolant (the prepare_surface operation)."""
        smoothed = [(t, crevasse_fill(r, mask, kernel_m)) for t, r in epochs]
        return cls(smoothed, order=order)

    def bounds(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return self._xlim, self._ylim

    def contains(self, xy) -> np.ndarray:
        p = np.asarray(xy, dtype=float)
        x, y = p[..., 0], p[..., 1]
        ok = np.isfinite(x) & np.isfinite(y)
        return (ok & (x >= self._xlim[0]) & (x <= self._xlim[1])
                & (y >= self._ylim[0]) & (y <= self._ylim[1]))

    def _eval_epoch(self, k: int, x, y):
        return self._splines[k].ev(y, x)

    def evaluate(self, xy, t: float) -> np.ndarray:
        """Surface elevation at map positions (..., 2) and time t (days)."""
        p = np.asarray(xy, dtype=float)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        inside = self.contains(p)
        x = np.where(inside, p[..., 0], 0.5 * (self._xlim[0] + self._xlim[1]))
        y = np.where(inside, p[..., 1], 0.5 * (self._ylim[0] + self._ylim[1]))

        times = self.times
        if len(times) == 1 or t <= times[0]:
            z = self._eval_epoch(0, x, y)
        elif t >= times[-1]:
            z = self._eval_epoch(len(times) - 1, x, y)
        else:
            k = int(np.searchsorted(times, t, side="right") - 1)
            w = (t - times[k]) / (times[k + 1] - times[k])
            z = (1.0 - w) * self._eval_epoch(k, x, y) + w * self._eval_epoch(k + 1, x, y)
        z = np.where(inside, z, np.nan)
        return float(z[0]) if single else z


def transition(states, dt: float, noise: ProcessNoise, surface: SurfaceModel,
               t: float, accel_draw, walk_draw) -> tuple[np.ndarray, np.ndarray]:
    """Advance states by one step of the stochastic motion model.

    ``accel_draw`` (..., 2) and ``walk_draw`` (...,) are standard-normal
    draws supplied by the caller; randomness is always injected. The
    acceleration is sigma_a * accel_draw; position and velocity follow
    the constant-acceleration kinematics over dt (days, may be negative
    for backward tracking); the elevation offset performs a random walk
    with increment std sigma_z * |v| * dt; the new elevation is
    S(x', t + dt) + delta_s'.

    Returns ``(new_states, terminated)``. Particles whose new position
    leaves the surface domain are returned unchanged with the terminated
    flag set; the pipeline drops them at resampling.
    """
    if dt == 0:
        raise ValueError("dt must be nonzero")
    s = np.asarray(states, dtype=float)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    if s.shape[-1] != STATE_DIM:
        raise ValueError(f"states must have {STATE_DIM} components")
    accel_draw = np.atleast_2d(np.asarray(accel_draw, dtype=float))
    walk_draw = np.atleast_1d(np.asarray(walk_draw, dtype=float))

    a = noise.sigma_a * accel_draw
    x_new = s[:, IX] + dt * s[:, IV] + 0.5 * dt * dt * a
    v_new = s[:, IV] + dt * a
    speed = np.linalg.norm(s[:, IV], axis=-1)
    ds_new = s[:, IDS] + noise.sigma_z * speed * dt * walk_draw
    z_surf = surface.evaluate(x_new, t + dt)
    terminated = ~np.isfinite(z_surf)

    out = s.copy()
    alive = ~terminated
    out[alive, IX] = x_new[alive]
    out[alive, IV] = v_new[alive]
    out[alive, IDS] = ds_new[alive]
    out[alive, IZ] = z_surf[alive] + ds_new[alive]
    if single:
        return out[0], bool(terminated[0])
    return out, terminated


def init_state(dist: InitialDistribution, surface: SurfaceModel, t: float,
               n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw n initial states from the initial distribution.

    Position and velocity are Gaussian with the given means/covariances,
    the elevation offset is zero-mean Gaussian, and z = S(x, t) + offset.
    Draws falling outside the surface domain come back flagged
    terminated.
    """
    x = rng.multivariate_normal(dist.x_mean, dist.x_cov, size=n)
    v = rng.multivariate_normal(dist.v_mean, dist.v_cov, size=n)
    ds = rng.normal(0.0, np.sqrt(dist.delta_s_var), size=n) if dist.delta_s_var > 0 else np.zeros(n)
    z_surf = surface.evaluate(x, t)
    terminated = ~np.isfinite(z_surf)
    states = np.empty((n, STATE_DIM))
    states[:, IX] = x
    states[:, IV] = v
    states[:, IZ] = np.where(terminated, 0.0, z_surf) + ds
    states[:, IDS] = ds
    return states, terminated
