"""Synthetic oblique time-lapse scenes with exact ground truth.

Renders a textured flat surface moving under a known velocity field
through real camera models, with scripted per-frame camera jitter,
illumination drift, and occlusion. Because the surface is known, each
pixel is rendered by intersecting its (un-jittered) viewing ray with the
surface plane and sampling the advected texture — the exact inverse of
the projection used by the tracker.

Frame 0 always has identity jitter: it serves as the calibration and
ground-control reference frame, so a nonzero frame-0 motion would be
unobservable by construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import expm

from . import geometry
from .geometry import CameraModel, RigidImageMotion
from .motion import Raster

__all__ = [
    "TextureField",
    "VelocityModel",
    "Scenario",
    "render",
    "truth_track",
    "truth_velocity",
    "write_scenario_outputs",
]

SKY_RGB = np.array([185.0, 200.0, 215.0])
OCCLUSION_GRAY = 128.0


class TextureField:
    """Band-limited multi-octave sinusoid noise over the map plane.

    Two independent fields are mixed into RGB with different channel
    gains, so the patch-local principal component is well defined. The
    anisotropy stretches wavelengths across the flow direction to mimic
    crevasse trains; narrow-band components make features quasi-periodic.
    """

    def __init__(self, seed: int = 0, n_waves: int = 48,
                 wavelength_range: tuple[float, float] = (10.0, 90.0),
                 anisotropy: float = 1.5, amplitude: float = 55.0):
        rng = np.random.default_rng(seed)
        self.amplitude = float(amplitude)
        lam = np.exp(rng.uniform(np.log(wavelength_range[0]),
                                 np.log(wavelength_range[1]), n_waves))
        theta = rng.uniform(0, 2 * np.pi, n_waves)
        k = 2 * np.pi / lam
        # compress wavelengths along x (flow direction) by the anisotropy
        self._kvec = np.column_stack([k * np.cos(theta) * anisotropy ** 0.5,
                                      k * np.sin(theta) / anisotropy ** 0.5])
        self._phase = rng.uniform(0, 2 * np.pi, n_waves)
        amp = rng.uniform(0.5, 1.0, n_waves)
        self._amp = amp / np.sqrt(np.sum(amp ** 2) / 2.0)
        # secondary field decorrelates the color channels
        self._kvec2 = self._kvec[::-1] * 1.37
        self._phase2 = rng.uniform(0, 2 * np.pi, n_waves)
        self._gain1 = np.array([1.0, 0.92, 0.85])
        self._gain2 = np.array([0.10, -0.14, 0.18])

    def sample(self, xy) -> np.ndarray:
        """RGB values (float, roughly 0..255) at map positions (..., 2)."""
        pts = np.asarray(xy, dtype=float)
        f1 = np.cos(pts @ self._kvec.T + self._phase) @ self._amp
        f2 = np.cos(pts @ self._kvec2.T + self._phase2) @ self._amp
        base = 128.0 + self.amplitude * f1[..., None] * self._gain1
        return base + self.amplitude * f2[..., None] * self._gain2


@dataclass(frozen=True)
class VelocityModel:
    """Constant or affine map-plane velocity field v(x) = A x + b (m/day)."""

    b: np.ndarray
    a: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(2))
        if self.a is not None:
            object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(2, 2))

    def velocity(self, xy) -> np.ndarray:
        pts = np.asarray(xy, dtype=float)
        if self.a is None:
            return np.broadcast_to(self.b, pts.shape).copy()
        return pts @ self.a.T + self.b

    def flow(self, xy, dt: float) -> np.ndarray:
        """Advance positions by dt days (closed form, exact)."""
        pts = np.asarray(xy, dtype=float)
        if self.a is None:
            return pts + dt * self.b
        m = np.zeros((3, 3))
        m[:2, :2] = self.a
        m[:2, 2] = self.b
        e = expm(m * dt)
        return pts @ e[:2, :2].T + e[:2, 2]


@dataclass
class Scenario:
    """Complete description of a synthetic scene.

    ``glacier_bounds`` (xmin, xmax, ymin, ymax) delimits the moving
    region; outside it the surface is stationary land usable for ground
    control. Jitter/illumination/occlusion schedules are per camera and
    per frame; occlusion maps frame index to the blanked image fraction
    (1.0 = fully blank).
    """

    surface_elevation: float
    domain: tuple[float, float, float, float]
    glacier_bounds: tuple[float, float, float, float]
    texture: TextureField
    velocity: VelocityModel
    cameras: dict[str, CameraModel]
    frame_times: np.ndarray
    jitter: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    illumination: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    occlusion: dict[str, dict[int, float]] = field(default_factory=dict)
    control_points: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    seed_points: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))

    def __post_init__(self):
        self.frame_times = np.asarray(self.frame_times, dtype=float)
        self.control_points = np.atleast_2d(np.asarray(self.control_points, dtype=float))
        self.seed_points = np.atleast_2d(np.asarray(self.seed_points, dtype=float))
        for cam_id in self.cameras:
            rot, trans = self.jitter.get(cam_id, (None, None))
            if rot is None:
                rot = np.zeros(len(self.frame_times))
                trans = np.zeros((len(self.frame_times), 2))
            rot = np.asarray(rot, dtype=float).copy()
            trans = np.asarray(trans, dtype=float).copy()
            if len(rot) != len(self.frame_times) or len(trans) != len(self.frame_times):
                raise ValueError("jitter schedule must cover all frames")
            rot[0] = 0.0
            trans[0] = 0.0  # frame 0 is the reference frame by construction
            self.jitter[cam_id] = (rot, trans)
            gains, biases = self.illumination.get(
                cam_id, (np.ones(len(self.frame_times)), np.zeros(len(self.frame_times))))
            gains = np.asarray(gains, dtype=float)
            biases = np.asarray(biases, dtype=float)
            if len(gains) != len(self.frame_times) or len(biases) != len(self.frame_times):
                raise ValueError("illumination schedule must cover all frames")
            self.illumination[cam_id] = (gains, biases)
            self.occlusion.setdefault(cam_id, {})

    @property
    def n_frames(self) -> int:
        return len(self.frame_times)

    def in_glacier(self, xy) -> np.ndarray:
        pts = np.asarray(xy, dtype=float)
        x0, x1, y0, y1 = self.glacier_bounds
        return ((pts[..., 0] >= x0) & (pts[..., 0] <= x1)
                & (pts[..., 1] >= y0) & (pts[..., 1] <= y1))

    def jitter_motion(self, cam_id: str, frame: int) -> RigidImageMotion:
        rot, trans = self.jitter[cam_id]
        cam = self.cameras[cam_id]
        return RigidImageMotion(rot[frame], trans[frame], 0.0,
                                np.ones(0, dtype=bool), cam.image_center())


def _undistort(cam: CameraModel, xd, yd, iterations: int = 8):
    k1, k2 = cam.radial_distortion
    p1, p2 = cam.tangential_distortion
    if k1 == k2 == p1 == p2 == 0.0:
        return xd, yd
    x, y = xd.copy(), yd.copy()
    for _ in range(iterations):
        r2 = x * x + y * y
        rad = 1.0 + k1 * r2 + k2 * r2 * r2
        dx = 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        dy = p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        x = (xd - dx) / rad
        y = (yd - dy) / rad
    return x, y


def render(scenario: Scenario, frame: int) -> dict[str, np.ndarray]:
    """Render every camera's RGB frame (uint8 arrays keyed by camera id)."""
    if not 0 <= frame < scenario.n_frames:
        raise ValueError(f"frame {frame} outside schedule")
    t = scenario.frame_times[frame]
    dt = t - scenario.frame_times[0]
    out = {}
    for cam_id, cam in scenario.cameras.items():
        w, h = (int(round(s)) for s in cam.sensor_size)
        uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        pix = np.stack([uu, vv], axis=-1)
        # jitter moves image content; sample the un-jittered ray for each pixel
        motion = scenario.jitter_motion(cam_id, frame)
        p0 = motion.inverse_apply(pix.reshape(-1, 2))

        xd = (p0[:, 0] - cam.principal_point[0]) / cam.focal_length
        yd = (p0[:, 1] - cam.principal_point[1]) / cam.focal_length
        xn, yn = _undistort(cam, xd, yd)
        rays = np.column_stack([xn, yn, np.ones_like(xn)]) @ cam.rotation()
        dz = rays[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = (scenario.surface_elevation - cam.position[2]) / dz
        hit = np.isfinite(scale) & (scale > 0) & (scale < 1e7)
        scale = np.where(hit, scale, 0.0)
        ground = cam.position + scale[:, None] * rays

        rgb = np.tile(SKY_RGB, (h * w, 1))
        if np.any(hit):
            xy = ground[hit][:, :2]
            moving = scenario.in_glacier(xy)
            src = xy.copy()
            if np.any(moving) and dt != 0.0:
                src[moving] = scenario.velocity.flow(xy[moving], -dt)
            rgb[hit] = scenario.texture.sample(src)

        gain, bias = scenario.illumination[cam_id]
        rgb = rgb * gain[frame] + bias[frame]
        img = rgb.reshape(h, w, 3)

        frac = scenario.occlusion[cam_id].get(frame, 0.0)
        if frac > 0:
            rows = int(round(min(frac, 1.0) * h))
            img[:rows] = OCCLUSION_GRAY
        out[cam_id] = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return out


def truth_velocity(scenario: Scenario, xy, t: float = 0.0) -> np.ndarray:
    """Exact surface velocity at map positions (zero outside the glacier)."""
    pts = np.asarray(xy, dtype=float)
    v = scenario.velocity.velocity(pts)
    mask = scenario.in_glacier(pts)
    return np.where(mask[..., None], v, 0.0)


def truth_track(scenario: Scenario, seed_xy, t0: float, t1: float,
                n_samples: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact track of a glacier point from t0 to t1.

    Returns (times, positions, velocities); the endpoints are included
    and the integration is closed-form (constant/affine fields).
    """
    times = np.linspace(t0, t1, max(2, n_samples))
    seed = np.asarray(seed_xy, dtype=float).reshape(2)
    positions = np.array([scenario.velocity.flow(seed, t - t0) for t in times])
    velocities = scenario.velocity.velocity(positions)
    return times, positions, velocities


def _grid_raster(scenario: Scenario, cell: float, values_fn) -> Raster:
    x0, x1, y0, y1 = scenario.domain
    nx = int(math.ceil((x1 - x0) / cell))
    ny = int(math.ceil((y1 - y0) / cell))
    xc = x0 + (np.arange(nx) + 0.5) * cell
    yc_desc = y0 + (ny - np.arange(ny) - 0.5) * cell
    gx, gy = np.meshgrid(xc, yc_desc)
    return Raster(values_fn(gx, gy), x0, y0, cell)


def write_scenario_outputs(scenario: Scenario, outdir, *, epoch_iso: str = "2013-06-10T12:00:00",
                           dem_cell: float = 10.0) -> dict:
    """Write images, manifests, DEM/mask, cameras, GCPs and the truth CSV.

    Produces everything a tracking run needs: image files plus
    ``manifest.csv``, a single-epoch DEM (``dem.asc`` + ``dem_manifest.csv``),
    a glacier mask, per-camera calibrated camera files and ground-control
    CSVs, the scheduled jitter (``jitter.csv``) and exact per-frame truth
    tracks (``truth.csv``). Returns the path map.
    """
    from datetime import datetime, timedelta

    out = Path(outdir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    base_time = datetime.fromisoformat(epoch_iso)

    from PIL import Image

    manifest_rows = []
    for k in range(scenario.n_frames):
        frames = render(scenario, k)
        stamp = base_time + timedelta(days=float(scenario.frame_times[k] - scenario.frame_times[0]))
        for cam_id, img in frames.items():
            rel = f"images/{cam_id}_{k:03d}.png"
            Image.fromarray(img).save(out / rel)
            manifest_rows.append((stamp.isoformat(), cam_id, rel))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp_iso8601", "camera_id", "path"])
        writer.writerows(manifest_rows)

    dem = _grid_raster(scenario, dem_cell,
                       lambda gx, gy: np.full(gx.shape, scenario.surface_elevation))
    dem.write_esri_ascii(out / "dem.asc")
    x0, x1, y0, y1 = scenario.glacier_bounds
    mask = _grid_raster(scenario, dem_cell,
                        lambda gx, gy: ((gx >= x0) & (gx <= x1)
                                        & (gy >= y0) & (gy <= y1)).astype(float))
    mask.write_esri_ascii(out / "mask.asc")
    with open(out / "dem_manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp_iso8601", "path"])
        writer.writerow([base_time.isoformat(), "dem.asc"])

    for cam_id, cam in scenario.cameras.items():
        cam.save(out / f"{cam_id}.cam")
        gcps = []
        for i, world in enumerate(scenario.control_points):
            try:
                pix = geometry.project(cam, world)
            except geometry.BehindCamera:
                continue
            if cam.contains_pixel(pix):
                gcps.append(geometry.GroundControlPoint(world, pix, f"cp{i}"))
        geometry.save_gcps(out / f"gcps_{cam_id}.csv", gcps)

    with open(out / "jitter.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["camera_id", "frame", "rotation_rad", "tu_px", "tv_px"])
        for cam_id in scenario.cameras:
            rot, trans = scenario.jitter[cam_id]
            for k in range(scenario.n_frames):
                writer.writerow([cam_id, k, repr(float(rot[k])),
                                 repr(float(trans[k, 0])), repr(float(trans[k, 1]))])

    with open(out / "truth.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["point_id", "time_days", "x", "y", "vx", "vy"])
        for pid, seed in enumerate(scenario.seed_points):
            for t in scenario.frame_times:
                pos = scenario.velocity.flow(seed, float(t - scenario.frame_times[0]))
                vel = scenario.velocity.velocity(pos)
                writer.writerow([pid] + [repr(float(v)) for v in
                                         (t, pos[0], pos[1], vel[0], vel[1])])

    return {"manifest": out / "manifest.csv", "dem": out / "dem.asc",
            "mask": out / "mask.asc", "truth": out / "truth.csv",
            "jitter": out / "jitter.csv"}
