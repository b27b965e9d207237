"""Camera geometry: world-to-image projection, calibration, shake estimation.

Coordinate conventions used throughout the package:

* World frame: right-handed, x east, y north, z up (meters).
* Camera frame: x right, y down, z forward along the optical axis.
* Pixel coordinates are continuous ``(u, v)`` with u along image columns
  and v along rows; the center of the top-left pixel is ``(0.0, 0.0)``,
  so a ``w x h`` sensor spans ``[-0.5, w - 0.5] x [-0.5, h - 0.5]``.

The camera orientation is parameterized by three angles (radians):
``azimuth`` (view direction measured clockwise from north when seen from
above), ``elevation`` (positive above the horizon) and ``roll`` (about
the optical axis). Lens distortion is Brown-Conrady with two radial and
two tangential coefficients applied to normalized image coordinates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

__all__ = [
    "BehindCamera",
    "DegenerateGeometry",
    "CameraModel",
    "GroundControlPoint",
    "RigidImageMotion",
    "CalibrationResult",
    "SIGMA_M_OCCLUDED",
    "rotation_matrix",
    "project",
    "reprojection_rms",
    "calibrate",
    "fit_rigid_motion",
    "estimate_camera_shake",
    "load_gcps",
    "save_gcps",
]

# Camera-motion uncertainty assigned when shake cannot be estimated; at this
# value the matching likelihood is effectively flat across the search window.
SIGMA_M_OCCLUDED = 5.0

# Parameter groups that calibrate() can optimize or freeze.
PARAMETER_GROUPS = (
    "position",
    "orientation",
    "focal_length",
    "principal_point",
    "radial_distortion",
    "tangential_distortion",
)


class BehindCamera(ValueError):
    """A world point has non-positive depth in the camera frame."""


class DegenerateGeometry(ValueError):
    """Control points do not constrain the calibration (too few/collinear)."""


def _as_vector(x, n, name):
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.size != n:
        raise ValueError(f"{name} must have {n} components, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with Brown-Conrady distortion.

    Attributes
    ----------
    position : (3,) array
        Camera center, map-plane easting/northing plus elevation (m).
    orientation : (3,) array
        (azimuth, elevation, roll) in radians; see module docstring.
    focal_length : float
        Focal length in pixels (square pixels assumed).
    principal_point : (2,) array
        (u, v) of the principal point in pixels.
    sensor_size : (2,) array
        (width, height) of the sensor in pixels.
    radial_distortion : (2,) array
        Coefficients (k1, k2).
    tangential_distortion : (2,) array
        Coefficients (p1, p2).
    """

    position: np.ndarray
    orientation: np.ndarray
    focal_length: float
    principal_point: np.ndarray
    sensor_size: np.ndarray
    radial_distortion: np.ndarray = field(default_factory=lambda: np.zeros(2))
    tangential_distortion: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "position", _as_vector(self.position, 3, "position"))
        object.__setattr__(self, "orientation", _as_vector(self.orientation, 3, "orientation"))
        object.__setattr__(self, "focal_length", float(self.focal_length))
        object.__setattr__(self, "principal_point", _as_vector(self.principal_point, 2, "principal_point"))
        object.__setattr__(self, "sensor_size", _as_vector(self.sensor_size, 2, "sensor_size"))
        object.__setattr__(self, "radial_distortion", _as_vector(self.radial_distortion, 2, "radial_distortion"))
        object.__setattr__(self, "tangential_distortion", _as_vector(self.tangential_distortion, 2, "tangential_distortion"))
        if self.focal_length <= 0:
            raise ValueError("focal_length must be positive")
        if np.any(self.sensor_size <= 0):
            raise ValueError("sensor_size components must be positive")
        for arr in (self.position, self.orientation, self.principal_point,
                    self.sensor_size, self.radial_distortion, self.tangential_distortion):
            arr.setflags(write=False)

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation matrix (3, 3)."""
        return rotation_matrix(self.orientation)

    def contains_pixel(self, pixels) -> np.ndarray:
        """Boolean mask of pixels inside the sensor bounds."""
        p = np.asarray(pixels, dtype=float)
        w, h = self.sensor_size
        u, v = p[..., 0], p[..., 1]
        return (u >= -0.5) & (u < w - 0.5) & (v >= -0.5) & (v < h - 0.5)

    def image_center(self) -> np.ndarray:
        return (self.sensor_size - 1.0) / 2.0

    def save(self, path) -> None:
        """Write the flat key-value camera file."""
        lines = [
            "position = " + " ".join(repr(float(x)) for x in self.position),
            "orientation = " + " ".join(repr(float(x)) for x in self.orientation),
            f"focal_length = {self.focal_length!r}",
            "principal_point = " + " ".join(repr(float(x)) for x in self.principal_point),
            "sensor_size = " + " ".join(repr(float(x)) for x in self.sensor_size),
            f"k1 = {float(self.radial_distortion[0])!r}",
            f"k2 = {float(self.radial_distortion[1])!r}",
            f"p1 = {float(self.tangential_distortion[0])!r}",
            f"p2 = {float(self.tangential_distortion[1])!r}",
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "CameraModel":
        """Read a camera from the flat key-value file written by save()."""
        kv = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = [float(x) for x in value.split()]
        try:
            return cls(
                position=kv["position"],
                orientation=kv["orientation"],
                focal_length=kv["focal_length"][0],
                principal_point=kv["principal_point"],
                sensor_size=kv["sensor_size"],
                radial_distortion=[kv["k1"][0], kv["k2"][0]],
                tangential_distortion=[kv["p1"][0], kv["p2"][0]],
            )
        except KeyError as exc:
            raise ValueError(f"camera file {path} is missing key {exc}") from exc


@dataclass(frozen=True)
class GroundControlPoint:
    """A feature with known world (m) and pixel coordinates."""

    world: np.ndarray
    pixel: np.ndarray
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "world", _as_vector(self.world, 3, "world"))
        object.__setattr__(self, "pixel", _as_vector(self.pixel, 2, "pixel"))
        self.world.setflags(write=False)
        self.pixel.setflags(write=False)


def load_gcps(path) -> list[GroundControlPoint]:
    """Read ground control points from CSV with header label,x,y,z,u,v."""
    gcps = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"label", "x", "y", "z", "u", "v"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"GCP file {path} must have header label,x,y,z,u,v")
        for row in reader:
            gcps.append(GroundControlPoint(
                world=[float(row["x"]), float(row["y"]), float(row["z"])],
                pixel=[float(row["u"]), float(row["v"])],
                label=row["label"],
            ))
    return gcps


def save_gcps(path, gcps: Sequence[GroundControlPoint]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "x", "y", "z", "u", "v"])
        for g in gcps:
            writer.writerow([g.label, *(repr(float(x)) for x in g.world), *(repr(float(x)) for x in g.pixel)])


def rotation_matrix(orientation) -> np.ndarray:
    """World-to-camera rotation for (azimuth, elevation, roll) radians.

    Rows of the returned matrix are the camera's right, down and forward
    axes expressed in world coordinates.
    """
    az, el, roll = np.asarray(orientation, dtype=float).reshape(3)
    sa, ca = math.sin(az), math.cos(az)
    se, ce = math.sin(el), math.cos(el)
    forward = np.array([sa * ce, ca * ce, se])
    right = np.array([ca, -sa, 0.0])
    down = np.cross(forward, right)
    if roll != 0.0:
        sr, cr = math.sin(roll), math.cos(roll)
        right, down = cr * right + sr * down, cr * down - sr * right
    return np.vstack([right, down, forward])


def project(camera: CameraModel, world_points, *, behind: str = "raise") -> np.ndarray:
    """Project world points (..., 3) to pixel coordinates (..., 2).

    Applies rotation, perspective division, distortion and intrinsic
    scaling, in that order.

    Parameters
    ----------
    behind : {"raise", "nan"}
        With "raise" (default), any point with non-positive depth raises
        BehindCamera. With "nan", such points yield NaN pixels; used when
        projecting particle clouds that may stray behind the camera.
    """
    pts = np.asarray(world_points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise ValueError("world points must have 3 components")

    cam = (pts - camera.position) @ camera.rotation().T
    depth = cam[..., 2]
    bad = depth <= 1e-12
    if np.any(bad):
        if behind == "raise":
            raise BehindCamera("point has non-positive depth in camera frame")
        depth = np.where(bad, np.nan, depth)

    xn = cam[..., 0] / depth
    yn = cam[..., 1] / depth
    k1, k2 = camera.radial_distortion
    p1, p2 = camera.tangential_distortion
    r2 = xn * xn + yn * yn
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
    yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn

    uv = np.empty(pts.shape[:-1] + (2,))
    uv[..., 0] = camera.focal_length * xd + camera.principal_point[0]
    uv[..., 1] = camera.focal_length * yd + camera.principal_point[1]
    return uv[0] if single else uv


def reprojection_rms(camera: CameraModel, gcps: Sequence[GroundControlPoint]) -> float:
    """Per-coordinate RMS reprojection error in pixels.

    Defined as sqrt(sum_i |e_i|^2 / (2 n)); points behind the camera
    contribute a large finite penalty instead of NaN.
    """
    world = np.array([g.world for g in gcps])
    pix = np.array([g.pixel for g in gcps])
    pred = project(camera, world, behind="nan")
    err = pred - pix
    sq = np.sum(err * err, axis=-1)
    sq = np.where(np.isfinite(sq), sq, 1e12)
    return float(np.sqrt(np.sum(sq) / (2.0 * len(gcps))))


@dataclass
class CalibrationResult:
    camera: CameraModel
    rms_initial: float
    rms_final: float
    converged: bool
    n_iterations: int


def _pack(camera: CameraModel, free: Sequence[str]) -> np.ndarray:
    parts = []
    for name in free:
        value = getattr(camera, name)
        parts.append(np.atleast_1d(np.asarray(value, dtype=float)))
    return np.concatenate(parts) if parts else np.empty(0)


def _unpack(camera: CameraModel, free: Sequence[str], theta: np.ndarray) -> CameraModel:
    updates = {}
    i = 0
    sizes = {"position": 3, "orientation": 3, "focal_length": 1,
             "principal_point": 2, "radial_distortion": 2, "tangential_distortion": 2}
    for name in free:
        n = sizes[name]
        chunk = theta[i:i + n]
        updates[name] = float(chunk[0]) if name == "focal_length" else chunk.copy()
        i += n
    return replace(camera, **updates)


def calibrate(
    initial: CameraModel,
    gcps: Sequence[GroundControlPoint],
    frozen: Iterable[str] = (),
    *,
    max_iterations: int = 200,
    ftol: float = 1e-10,
) -> CalibrationResult:
    """Fit camera parameters to ground control points.

    Minimizes the sum of squared reprojection errors with Powell's
    direction-set method. Parameter groups named in ``frozen`` (any of
    position, orientation, focal_length, principal_point,
    radial_distortion, tangential_distortion) are held at their initial
    values; sensor_size is never optimized.

    Returns a CalibrationResult whose camera never has a larger RMS than
    the initialization. ``converged`` is False when the iteration budget
    was exhausted (best-so-far parameters are still returned).

    Raises
    ------
    DegenerateGeometry
        If fewer than 4 GCPs are given, or their pixels are collinear.
    """
    frozen = set(frozen)
    unknown = frozen - set(PARAMETER_GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups in frozen mask: {sorted(unknown)}")
    if len(gcps) < 4:
        raise DegenerateGeometry(f"need at least 4 GCPs, got {len(gcps)}")

    pix = np.array([g.pixel for g in gcps])
    if not np.all((pix >= -0.5) & (pix < initial.sensor_size - 0.5)):
        raise ValueError("GCP pixel coordinates must lie within the sensor bounds")
    centered = pix - pix.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[-1] < 1e-8 * max(svals[0], 1.0):
        raise DegenerateGeometry("GCP pixels are collinear in image space")

    free = [g for g in PARAMETER_GROUPS if g not in frozen]
    rms0 = reprojection_rms(initial, gcps)
    if not free:
        return CalibrationResult(initial, rms0, rms0, True, 0)

    world = np.array([g.world for g in gcps])

    def objective(theta):
        cam = _unpack(initial, free, theta)
        if cam.focal_length <= 0:
            return 1e18
        pred = project(cam, world, behind="nan")
        err = pred - pix
        sq = np.sum(err * err)
        if not np.isfinite(sq):
            # points behind the camera: penalize but keep finite
            sq = np.nansum(err * err) + 1e12 * np.sum(~np.isfinite(err[:, 0]))
        return sq

    theta0 = _pack(initial, free)
    result = minimize(
        objective,
        theta0,
        method="Powell",
        options={"maxiter": max_iterations, "ftol": ftol, "xtol": 1e-10},
    )
    fitted = _unpack(initial, free, np.asarray(result.x, dtype=float))
    rms1 = reprojection_rms(fitted, gcps)
    if rms1 > rms0:
        fitted, rms1 = initial, rms0
    converged = bool(result.success) or rms1 <= rms0
    if result.nit >= max_iterations and not result.success:
        converged = False
    return CalibrationResult(fitted, rms0, rms1, converged, int(result.nit))


@dataclass
class RigidImageMotion:
    """Rigid rotation-translation of image content about a fixed center.

    Maps calibrated-camera pixel coordinates into the coordinates of an
    actual (shaken) frame: p' = R(rotation) (p - center) + center +
    translation. ``sigma_m`` is the camera-motion uncertainty in pixels,
    ``inlier_mask`` marks the control points consistent with the fit.
    """

    rotation: float
    translation: np.ndarray
    sigma_m: float
    inlier_mask: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        self.rotation = float(self.rotation)
        self.translation = _as_vector(self.translation, 2, "translation")
        self.sigma_m = float(self.sigma_m)
        self.inlier_mask = np.asarray(self.inlier_mask, dtype=bool)
        self.center = _as_vector(self.center, 2, "center")
        if self.sigma_m < 0:
            raise ValueError("sigma_m must be nonnegative")

    @classmethod
    def identity(cls, center, sigma_m: float = 0.0, n_points: int = 0) -> "RigidImageMotion":
        return cls(0.0, np.zeros(2), sigma_m, np.zeros(n_points, dtype=bool), center)

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def apply(self, pixels) -> np.ndarray:
        p = np.asarray(pixels, dtype=float)
        return (p - self.center) @ self.matrix().T + self.center + self.translation

    def inverse_apply(self, pixels) -> np.ndarray:
        p = np.asarray(pixels, dtype=float)
        return (p - self.center - self.translation) @ self.matrix() + self.center


def _fit_rigid_lsq(ref: np.ndarray, obs: np.ndarray, center: np.ndarray) -> tuple[float, np.ndarray]:
    """Least-squares rigid fit (rotation about center, then translation)."""
    mr = ref.mean(axis=0)
    mo = obs.mean(axis=0)
    a = ref - mr
    b = obs - mo
    num = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    den = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    theta = math.atan2(num, den) if (num != 0.0 or den != 0.0) else 0.0
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    t = mo - center - (mr - center) @ rot.T
    return theta, t


def fit_rigid_motion(
    ref_pixels,
    obs_pixels,
    center,
    *,
    inlier_threshold: float = 1.0,
    max_samples: int = 500,
    n_control: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> RigidImageMotion:
    """RANSAC fit of a rigid rotation-translation to pixel correspondences.

    Minimal samples are point pairs; all pairs are tried when their count
    is within the sample budget, otherwise pairs are drawn from ``rng``.
    The consensus set is refit by least squares until stable. sigma_m is
    the mean inlier residual scaled by n_control / n_inliers.
    """
    ref = np.atleast_2d(np.asarray(ref_pixels, dtype=float))
    obs = np.atleast_2d(np.asarray(obs_pixels, dtype=float))
    center = _as_vector(center, 2, "center")
    n = len(ref)
    if len(obs) != n:
        raise ValueError("ref and obs point counts differ")
    if n < 2:
        raise DegenerateGeometry("need at least 2 correspondences for a rigid fit")
    if n_control is None:
        n_control = n

    def residuals(theta, t):
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -s], [s, c]])
        pred = (ref - center) @ rot.T + center + t
        return np.linalg.norm(pred - obs, axis=1)

    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if len(pairs) > max_samples:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(len(pairs), size=max_samples, replace=False)
        pairs = [pairs[k] for k in idx]

    best_mask = None
    best_key = (-1, np.inf)
    for i, j in pairs:
        theta, t = _fit_rigid_lsq(ref[[i, j]], obs[[i, j]], center)
        res = residuals(theta, t)
        mask = res <= inlier_threshold
        count = int(mask.sum())
        if count < 2:
            continue
        key = (count, float(res[mask].mean()))
        if count > best_key[0] or (count == best_key[0] and key[1] < best_key[1]):
            best_key = key
            best_mask = mask
    if best_mask is None:
        # no pair reached consensus; fall back to a global least-squares fit
        best_mask = np.ones(n, dtype=bool)

    # refit on the consensus set until the inlier set stabilizes
    mask = best_mask
    theta, t = 0.0, np.zeros(2)
    for _ in range(10):
        theta, t = _fit_rigid_lsq(ref[mask], obs[mask], center)
        new_mask = residuals(theta, t) <= inlier_threshold
        if new_mask.sum() < 2:
            break
        if np.array_equal(new_mask, mask):
            mask = new_mask
            break
        mask = new_mask

    res = residuals(theta, t)
    n_in = int(mask.sum())
    mean_res = float(res[mask].mean()) if n_in else float(res.mean())
    sigma_m = mean_res * (n_control / max(n_in, 1))
    return RigidImageMotion(theta, t, sigma_m, mask, center)


def estimate_camera_shake(
    reference_matches,
    image_size,
    *,
    inlier_threshold: float = 1.0,
    max_samples: int = 500,
    sigma_floor: float = SIGMA_M_OCCLUDED,
    rng: Optional[np.random.Generator] = None,
) -> RigidImageMotion:
    """Estimate per-frame rigid camera motion from stationary control points.

    ``reference_matches`` is a sequence of ``(pixel, surface)`` pairs: the
    control point's pixel position in the reference image, and the
    matching likelihood surface around that position in the current frame
    (None when occluded or unusable). The maximum-likelihood offset of
    each usable surface is extracted with sub-pixel precision and a rigid
    rotation-translation about the image center is fit by RANSAC.

    When fewer than 2 points are usable, returns identity motion with
    ``sigma_m`` equal to ``sigma_floor`` (default 5 px), which renders
    the matching likelihood effectively uniform.
    """
    from . import imaging  # imaging does not import geometry

    image_size = _as_vector(image_size, 2, "image_size")
    center = (image_size - 1.0) / 2.0

    n_control = len(reference_matches)
    ref_px, obs_px, usable_idx = [], [], []
    for idx, (pixel, surface) in enumerate(reference_matches):
        if surface is None or getattr(surface, "low_information", False):
            continue
        offset, _ = imaging.subpixel_peak(surface)
        pixel = _as_vector(pixel, 2, "control pixel")
        ref_px.append(pixel)
        obs_px.append(pixel + offset)
        usable_idx.append(idx)

    if len(ref_px) < 2:
        return RigidImageMotion.identity(center, sigma_m=sigma_floor, n_points=n_control)

    motion = fit_rigid_motion(
        np.array(ref_px), np.array(obs_px), center,
        inlier_threshold=inlier_threshold, max_samples=max_samples,
        n_control=n_control, rng=rng,
    )
    full_mask = np.zeros(n_control, dtype=bool)
    full_mask[np.array(usable_idx)] = motion.inlier_mask
    motion.inlier_mask = full_mask
    return motion
