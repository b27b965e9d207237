"""Campaign orchestration: grid seeding, bidirectional tracks, fusion.

A campaign runs, for every start time and every seed point, a forward
particle-filter track over the window and a backward track from the
window's final frame, fuses the two velocity estimates weighted by the
inverse Frobenius norms of their sample covariances, and median-smooths
the resulting field over neighboring points.

All times are float days on a shared origin (the first manifest frame
unless a config overrides it); timestamp parsing happens at the loaders.
Work units are keyed (start index, point id, direction, frame index) for
the RNG, so output is independent of worker scheduling.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import filter as pf
from . import geometry, imaging, motion
from .filter import CameraObservation, ObservationSet, ParticleEnsemble, PosteriorSummary
from .geometry import CameraModel, GroundControlPoint, RigidImageMotion
from .motion import IDS, IV, IX, IZ, InitialDistribution, ProcessNoise, Raster, SurfaceModel

__all__ = [
    "EmptyGrid",
    "TrackSpec",
    "CameraSetup",
    "ImageStore",
    "VelocityField",
    "seed_grid",
    "fuse_bidirectional",
    "median_smooth",
    "run_campaign",
    "write_outputs",
    "load_image_manifest",
    "load_dem_epochs",
]

FLAG_UNINFORMATIVE = "uninformative"
FLAG_NO_REFERENCE = "no_reference"
FLAG_GAPS = "gaps"
FLAG_DEGENERATE = "degenerate"
FLAG_FAILED = "failed"


class EmptyGrid(ValueError):
    """No seed point satisfies the visibility and elevation constraints."""


@dataclass
class TrackSpec:
    """Campaign parameters; defaults follow the standard field recipe."""

    grid_spacing: float = 100.0
    track_days: float = 3.0
    start_cadence_days: float = 1.0
    frames_per_day: int = 4
    elevation_floor: float = 20.0
    require_all_cameras: bool = True
    n_particles: int = 3000
    ref_size: int = 15
    search_size: int = 25
    sigma_ell: float = 0.25
    noise: ProcessNoise = field(default_factory=lambda: ProcessNoise([2.0, 2.0], 0.1))
    x_std: float = 3.0
    v_mean: tuple[float, float] = (0.0, 0.0)
    v_std: float = 8.0
    delta_s_std: float = 1.0
    median_radius: float = 150.0
    assume_stable_cameras: bool = False
    ransac_threshold: float = 1.0
    max_starts: Optional[int] = None

    def initial_distribution(self, seed_xy) -> InitialDistribution:
        return InitialDistribution(
            x_mean=seed_xy, x_cov=self.x_std ** 2 * np.eye(2),
            v_mean=self.v_mean, v_cov=self.v_std ** 2 * np.eye(2),
            delta_s_var=self.delta_s_std ** 2)


@dataclass
class CameraSetup:
    """A calibrated camera plus its stationary control points."""

    camera_id: str
    camera: CameraModel
    control_points: Sequence[GroundControlPoint] = ()


@lru_cache(maxsize=256)
def _load_image(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


class ImageStore:
    """Read-only image access keyed by (time, camera); frames stay cached
    per process so concurrent point tasks share the same buffers."""

    def __init__(self, entries: Sequence[tuple[float, str, str]]):
        # entries: (time_days, camera_id, path)
        self.entries = sorted(entries, key=lambda e: (e[0], e[1]))
        self._by_camera: dict[str, list[tuple[float, str]]] = {}
        for t, cam_id, path in self.entries:
            self._by_camera.setdefault(cam_id, []).append((t, path))

    def camera_ids(self) -> list[str]:
        return sorted(self._by_camera)

    def frames(self, camera_id: str) -> list[tuple[float, str]]:
        return list(self._by_camera.get(camera_id, ()))

    def times(self) -> np.ndarray:
        return np.array(sorted({t for t, _, _ in self.entries}))

    def image(self, path: str) -> np.ndarray:
        return _load_image(str(path))


def load_image_manifest(path, time_origin: Optional[datetime] = None
                        ) -> tuple[ImageStore, datetime]:
    """Read the image manifest CSV (timestamp_iso8601,camera_id,path).

    Paths are resolved relative to the manifest location. Returns the
    store plus the time origin (first timestamp unless given), with all
    times converted to float days.
    """
    base = Path(path).parent
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"timestamp_iso8601", "camera_id", "path"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"image manifest {path} must have header "
                             "timestamp_iso8601,camera_id,path")
        for row in reader:
            stamp = datetime.fromisoformat(row["timestamp_iso8601"])
            rows.append((stamp, row["camera_id"], str(base / row["path"])))
    if not rows:
        raise ValueError(f"image manifest {path} is empty")
    rows.sort(key=lambda r: (r[0], r[1]))
    origin = time_origin or rows[0][0]
    entries = [((stamp - origin).total_seconds() / 86400.0, cam, p)
               for stamp, cam, p in rows]
    return ImageStore(entries), origin


def load_dem_epochs(path, origin: datetime) -> list[tuple[float, Raster]]:
    """Read DEM epochs from a sidecar manifest (timestamp_iso8601,path)
    or a single raster path (assigned to the origin time)."""
    p = Path(path)
    if p.suffix.lower() == ".csv":
        epochs = []
        with open(p, newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"timestamp_iso8601", "path"}
            if reader.fieldnames is None or not required.issubset(reader.fieldnames):
                raise ValueError(f"DEM manifest {path} must have header "
                                 "timestamp_iso8601,path")
            for row in reader:
                stamp = datetime.fromisoformat(row["timestamp_iso8601"])
                t = (stamp - origin).total_seconds() / 86400.0
                epochs.append((t, motion.read_raster(p.parent / row["path"])))
        if not epochs:
            raise ValueError(f"DEM manifest {path} is empty")
        return epochs
    return [(0.0, motion.read_raster(p))]


def seed_grid(spec: TrackSpec, surface: SurfaceModel,
              cameras: Sequence[CameraModel], t: float,
              margin: float = 0.0) -> np.ndarray:
    """Grid vertices kept iff above the elevation floor and projectable
    into every required camera (or any camera when require_all_cameras
    is off). ``margin`` shrinks the usable sensor area in pixels."""
    (x0, x1), (y0, y1) = surface.bounds()
    sp = spec.grid_spacing
    xs = np.arange(np.ceil(x0 / sp) * sp, x1 + 1e-9, sp)
    ys = np.arange(np.ceil(y0 / sp) * sp, y1 + 1e-9, sp)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    z = surface.evaluate(pts, t)
    keep = np.isfinite(z) & (z > spec.elevation_floor)

    world = np.column_stack([pts, np.where(np.isfinite(z), z, 0.0)])
    vis = []
    for cam in cameras:
        pix = geometry.project(cam, world, behind="nan")
        w, h = cam.sensor_size
        ok = (np.all(np.isfinite(pix), axis=-1)
              & (pix[:, 0] >= -0.5 + margin) & (pix[:, 0] < w - 0.5 - margin)
              & (pix[:, 1] >= -0.5 + margin) & (pix[:, 1] < h - 0.5 - margin))
        vis.append(ok)
    if vis:
        vis = np.array(vis)
        keep &= vis.all(axis=0) if spec.require_all_cameras else vis.any(axis=0)
    seeds = pts[keep]
    if len(seeds) == 0:
        raise EmptyGrid("no seed point is visible and above the elevation floor")
    return seeds


def fuse_bidirectional(forward: PosteriorSummary, backward: PosteriorSummary
                       ) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Inverse-Frobenius-norm weighted mean of the two run velocities.

    The backward summary must already be sign-corrected to forward time.
    Covariances are fused with the same weights. When both norms vanish
    the (equal-weight) mean is returned flagged degenerate; a single
    vanishing norm wins outright.
    """
    vf, vb = forward.mean_velocity, backward.mean_velocity
    cf, cb = forward.velocity_cov, backward.velocity_cov
    nf = float(np.linalg.norm(cf, "fro"))
    nb = float(np.linalg.norm(cb, "fro"))
    flags: list[str] = []

    if nf == 0.0 and nb == 0.0:
        flags.append(FLAG_DEGENERATE)
        return 0.5 * (vf + vb), 0.5 * (cf + cb), flags
    if nf == 0.0:
        return vf.copy(), cf.copy(), flags
    if nb == 0.0:
        return vb.copy(), cb.copy(), flags
    wf = 1.0 / nf if np.isfinite(nf) else 0.0
    wb = 1.0 / nb if np.isfinite(nb) else 0.0
    if wf + wb == 0.0:
        flags.append(FLAG_DEGENERATE)
        return 0.5 * (vf + vb), 0.5 * (cf + cb), flags
    v = (wf * vf + wb * vb) / (wf + wb)
    cov = (wf * cf + wb * cb) / (wf + wb)
    return v, cov, flags


@dataclass
class VelocityField:
    """Fused, per-seed-point velocity estimates for one start epoch."""

    start_time: float
    end_time: float
    points: np.ndarray
    velocity: np.ndarray
    covariance: np.ndarray
    ess: np.ndarray
    flags: list[str]
    start_iso: str = ""

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.velocity = np.atleast_2d(np.asarray(self.velocity, dtype=float))
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(-1, 2, 2)
        self.ess = np.asarray(self.ess, dtype=float).reshape(-1)

    @property
    def n(self) -> int:
        return len(self.points)

    def speed(self) -> np.ndarray:
        return np.linalg.norm(self.velocity, axis=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("x,y,vx,vy,cov_xx,cov_xy,cov_yy,ess,flags\n")
            for i in range(self.n):
                vals = [self.points[i, 0], self.points[i, 1],
                        self.velocity[i, 0], self.velocity[i, 1],
                        self.covariance[i, 0, 0], self.covariance[i, 0, 1],
                        self.covariance[i, 1, 1], self.ess[i]]
                fh.write(",".join(repr(float(v)) for v in vals)
                         + f",{self.flags[i]}\n")

    @classmethod
    def from_csv(cls, path, start_time: float = 0.0,
                 end_time: float = 0.0) -> "VelocityField":
        pts, vel, cov, ess, flags = [], [], [], [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                pts.append([float(row["x"]), float(row["y"])])
                vel.append([float(row["vx"]), float(row["vy"])])
                cov.append([[float(row["cov_xx"]), float(row["cov_xy"])],
                            [float(row["cov_xy"]), float(row["cov_yy"])]])
                ess.append(float(row["ess"]))
                flags.append(row["flags"])
        return cls(start_time, end_time, np.array(pts), np.array(vel),
                   np.array(cov), np.array(ess), flags)


def median_smooth(field: VelocityField, radius: float = 150.0) -> VelocityField:
    """Replace each velocity and covariance component by the componentwise
    median over neighbors within ``radius`` meters (self inclusive)."""
    pts = field.points
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    within = d2 <= radius ** 2
    vel = np.empty_like(field.velocity)
    cov = np.empty_like(field.covariance)
    for i in range(field.n):
        nb = within[i]
        vel[i] = np.nanmedian(field.velocity[nb], axis=0)
        cxx = np.nanmedian(field.covariance[nb, 0, 0])
        cxy = np.nanmedian(field.covariance[nb, 0, 1])
        cyy = np.nanmedian(field.covariance[nb, 1, 1])
        cov[i] = [[cxx, cxy], [cxy, cyy]]
    return VelocityField(field.start_time, field.end_time, pts.copy(), vel, cov,
                         field.ess.copy(), list(field.flags), field.start_iso)


@dataclass
class _Step:
    time: float
    frames: dict[str, tuple[float, str]]  # camera_id -> (frame time, path)


def _select_steps(store: ImageStore, spec: TrackSpec, t_start: float) -> list[_Step]:
    interval = 1.0 / spec.frames_per_day
    n_targets = int(round(spec.track_days * spec.frames_per_day)) + 1
    steps: list[_Step] = []
    for j in range(n_targets):
        target = t_start + j * interval
        frames = {}
        picked = []
        for cam_id in store.camera_ids():
            cam_frames = store.frames(cam_id)
            if not cam_frames:
                continue
            times = np.array([t for t, _ in cam_frames])
            k = int(np.argmin(np.abs(times - target)))
            if abs(times[k] - target) <= 0.5 * interval + 1e-9:
                frames[cam_id] = cam_frames[k]
                picked.append(times[k])
        if not frames:
            continue
        t_step = float(np.mean(picked))
        if steps and t_step - steps[-1].time < 1e-9:
            continue
        steps.append(_Step(t_step, frames))
    return steps


def estimate_shakes(store: ImageStore, setups: dict[str, CameraSetup],
                    spec: TrackSpec, frames_used: set[tuple[str, float]]
                    ) -> dict[tuple[str, float], RigidImageMotion]:
    """Per-(camera, frame) rigid shake, matched against each camera's
    first manifest frame where the control-point pixels are defined."""
    shakes: dict[tuple[str, float], RigidImageMotion] = {}
    for cam_id, setup in setups.items():
        cam = setup.camera
        center = cam.image_center()
        cam_frames = store.frames(cam_id)
        if not cam_frames:
            continue
        t_ref, ref_path = cam_frames[0]
        frames = sorted(t for c, t in frames_used if c == cam_id)
        gcps = list(setup.control_points)
        stable = spec.assume_stable_cameras or len(gcps) < 2

        refs = []
        if not stable:
            ref_img = store.image(ref_path)
            for g in gcps:
                raw = imaging.extract_window(ref_img, g.pixel, spec.ref_size)
                if raw is None:
                    refs.append(None)
                    continue
                sub = imaging.preprocess(raw.astype(float), anchor=np.round(g.pixel))
                hist = imaging.band_histograms(raw)
                refs.append(None if sub.low_information else (sub, hist))
            if sum(r is not None for r in refs) < 2:
                stable = True

        path_by_time = dict(cam_frames)
        for t in frames:
            if stable or t == t_ref:
                shakes[(cam_id, t)] = RigidImageMotion.identity(
                    center, sigma_m=0.0, n_points=len(gcps))
                continue
            img = store.image(path_by_time[t])
            matches = []
            for g, ref in zip(gcps, refs):
                if ref is None:
                    matches.append((g.pixel, None))
                    continue
                sub_ref, hist = ref
                raw = imaging.extract_window(img, g.pixel, spec.search_size)
                if raw is None:
                    matches.append((g.pixel, None))
                    continue
                test = imaging.preprocess(raw.astype(float), reference_histogram=hist,
                                          anchor=np.round(g.pixel))
                if test.low_information:
                    matches.append((g.pixel, None))
                    continue
                surf = imaging.match(sub_ref, test, spec.sigma_ell, 0.0)
                matches.append((g.pixel, surf))
            shakes[(cam_id, t)] = geometry.estimate_camera_shake(
                matches, cam.sensor_size, inlier_threshold=spec.ransac_threshold)
    return shakes


@dataclass
class _RunResult:
    summary: PosteriorSummary
    informative_steps: int
    flags: list[str]


def _prior_summary(spec: TrackSpec, seed_xy, t: float) -> PosteriorSummary:
    mean = np.zeros(6)
    mean[IX] = seed_xy
    mean[IV] = spec.v_mean
    return PosteriorSummary(
        mean_state=mean,
        position_cov=spec.x_std ** 2 * np.eye(2),
        velocity_cov=spec.v_std ** 2 * np.eye(2),
        ess=float(spec.n_particles),
        time=t,
        velocity_skewness=np.zeros(2),
        uninformative=True,
    )


def _track_one_direction(spec: TrackSpec, surface: SurfaceModel,
                         setups: dict[str, CameraSetup],
                         shakes: dict[tuple[str, float], RigidImageMotion],
                         store: ImageStore, steps: list[_Step], seed_xy,
                         master_seed: int, run_key: tuple[int, ...]) -> _RunResult:
    flags: list[str] = []
    t0 = steps[0].time
    z0 = surface.evaluate(np.asarray(seed_xy, dtype=float), t0)
    if not np.isfinite(z0):
        flags += [FLAG_NO_REFERENCE, FLAG_UNINFORMATIVE]
        return _RunResult(_prior_summary(spec, seed_xy, t0), 0, flags)

    # reference sub-images per camera, in the run's own first frame
    references = {}
    for cam_id, (t_frame, path) in steps[0].frames.items():
        setup = setups[cam_id]
        try:
            pix = geometry.project(setup.camera, [seed_xy[0], seed_xy[1], float(z0)])
        except geometry.BehindCamera:
            continue
        shake = shakes[(cam_id, t_frame)]
        anchor = np.round(shake.apply(pix))
        raw = imaging.extract_window(store.image(path), anchor, spec.ref_size)
        if raw is None:
            continue
        sub = imaging.preprocess(raw.astype(float), anchor=anchor)
        if sub.low_information:
            continue
        references[cam_id] = (sub, imaging.band_histograms(raw))
    if not references:
        flags += [FLAG_NO_REFERENCE, FLAG_UNINFORMATIVE]
        return _RunResult(_prior_summary(spec, seed_xy, t0), 0, flags)

    rng = pf.rng_for(master_seed, *run_key, 0)
    states, dead = motion.init_state(spec.initial_distribution(seed_xy),
                                     surface, t0, spec.n_particles, rng)
    ensemble = ParticleEnsemble(states, np.full(spec.n_particles, 1.0 / spec.n_particles),
                                t0, terminated=dead)

    informative = 0
    summary = None
    prev_time = t0
    for k, step_k in enumerate(steps[1:], start=1):
        dt = step_k.time - prev_time
        if dt == 0.0:
            continue
        counter = {"entries": 0}

        def build_obs(predicted: ParticleEnsemble,
                      _step=step_k, _counter=counter) -> ObservationSet:
            w = predicted.weights / predicted.weights.sum()
            mean = w @ predicted.states
            world = np.array([mean[0], mean[1], mean[IZ]])
            entries = []
            for cam_id, (t_frame, path) in _step.frames.items():
                if cam_id not in references:
                    continue
                setup = setups[cam_id]
                sub_ref, hist = references[cam_id]
                pix = geometry.project(setup.camera, world, behind="nan")
                if not np.all(np.isfinite(pix)):
                    continue
                shake = shakes[(cam_id, t_frame)]
                center = np.round(shake.apply(pix))
                raw = imaging.extract_window(store.image(path), center, spec.search_size)
                if raw is None:
                    continue
                test = imaging.preprocess(raw.astype(float), reference_histogram=hist,
                                          anchor=center)
                if test.low_information:
                    continue
                surf = imaging.match(sub_ref, test, spec.sigma_ell, shake.sigma_m)
                entries.append(CameraObservation(setup.camera, shake, surf, center))
            _counter["entries"] = len(entries)
            return ObservationSet(predicted.time, tuple(entries))

        rng = pf.rng_for(master_seed, *run_key, k)
        ensemble, summary = pf.step(ensemble, build_obs, dt, spec.noise, surface, rng)
        if counter["entries"] > 0 and not summary.uninformative:
            informative += 1
        elif FLAG_GAPS not in flags:
            flags.append(FLAG_GAPS)
        prev_time = step_k.time

    if summary is None or informative == 0:
        flags = sorted(set(flags + [FLAG_UNINFORMATIVE]))
        return _RunResult(_prior_summary(spec, seed_xy, prev_time), 0, flags)
    return _RunResult(summary, informative, flags)


def _track_point(ctx: dict, start_idx: int, point_idx: int, seed_xy) -> tuple:
    spec: TrackSpec = ctx["spec"]
    steps: list[_Step] = ctx["steps"][start_idx]
    try:
        fwd = _track_one_direction(
            spec, ctx["surface"], ctx["setups"], ctx["shakes"], ctx["store"],
            steps, seed_xy, ctx["master_seed"], (start_idx, point_idx, 0))
        # backward runs use negative dt, so their state velocity already has
        # the forward sense; no sign correction is needed before fusing
        bwd = _track_one_direction(
            spec, ctx["surface"], ctx["setups"], ctx["shakes"], ctx["store"],
            list(reversed(steps)), seed_xy, ctx["master_seed"],
            (start_idx, point_idx, 1))
        velocity, cov, fuse_flags = fuse_bidirectional(fwd.summary, bwd.summary)
        flags = sorted(set(fwd.flags) | set(bwd.flags) | set(fuse_flags))
        ess = 0.5 * (fwd.summary.ess + bwd.summary.ess)
        return start_idx, point_idx, velocity, cov, ess, flags
    except Exception as exc:  # per-point failures must not abort the campaign
        cov = ctx["spec"].v_std ** 2 * np.eye(2)
        return (start_idx, point_idx, np.asarray(spec.v_mean, dtype=float), cov,
                float(spec.n_particles), [FLAG_FAILED, type(exc).__name__])


_WORKER_CTX: dict = {}


def _init_worker(ctx):
    _WORKER_CTX["ctx"] = ctx


def _worker_task(args):
    start_idx, point_idx, seed_xy = args
    return _track_point(_WORKER_CTX["ctx"], start_idx, point_idx, seed_xy)


def run_campaign(spec: TrackSpec, store: ImageStore,
                 setups: dict[str, CameraSetup], surface: SurfaceModel,
                 master_seed: int = 0, workers: int = 1,
                 start_times: Optional[Sequence[float]] = None,
                 time_origin: Optional[datetime] = None) -> list[VelocityField]:
    """Run the full tracking campaign and return one field per start time.

    Per-point failures are recorded in the point's flags; only campaign-
    level problems (no frames, empty grid) raise.
    """
    all_times = store.times()
    if all_times.size == 0:
        raise ValueError("image store holds no frames")
    if start_times is None:
        t0, t_last = float(all_times[0]), float(all_times[-1])
        starts = [t0]
        k = 1
        while t0 + k * spec.start_cadence_days + spec.track_days \
                <= t_last + 0.5 / spec.frames_per_day:
            starts.append(t0 + k * spec.start_cadence_days)
            k += 1
    else:
        starts = [float(t) for t in start_times]
    if spec.max_starts is not None:
        starts = starts[: spec.max_starts]

    steps_per_start = [_select_steps(store, spec, t) for t in starts]
    usable = [(i, s) for i, s in zip(range(len(starts)), steps_per_start) if len(s) >= 2]
    if not usable:
        raise ValueError("no start window contains at least two usable frames")

    cameras = [setups[c].camera for c in sorted(setups)]
    seeds = seed_grid(spec, surface, cameras, starts[0],
                      margin=spec.search_size // 2 + 2)

    frames_used = {(cam_id, t) for _, steps in usable for s in steps
                   for cam_id, (t, _) in s.frames.items()}
    shakes = estimate_shakes(store, setups, spec, frames_used)

    ctx = {"spec": spec, "steps": steps_per_start, "surface": surface,
           "setups": setups, "shakes": shakes, "store": store,
           "master_seed": int(master_seed)}
    tasks = [(i, j, seeds[j]) for i, _ in usable for j in range(len(seeds))]

    results = {}
    if workers <= 1:
        for task in tasks:
            out = _track_point(ctx, *task)
            results[(out[0], out[1])] = out
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(ctx,)) as pool:
            for out in pool.map(_worker_task, tasks, chunksize=4):
                results[(out[0], out[1])] = out

    fields = []
    for i, steps in usable:
        vel = np.zeros((len(seeds), 2))
        cov = np.zeros((len(seeds), 2, 2))
        ess = np.zeros(len(seeds))
        flags = []
        for j in range(len(seeds)):
            _, _, v, c, e, f = results[(i, j)]
            vel[j] = v
            cov[j] = c
            ess[j] = e
            flags.append(";".join(f))
        field = VelocityField(starts[i], steps[-1].time, seeds.copy(), vel, cov,
                              ess, flags)
        if time_origin is not None:
            from datetime import timedelta

            field.start_iso = (time_origin + timedelta(days=starts[i])).isoformat()
        fields.append(median_smooth(field, spec.median_radius))
    return fields


def write_outputs(fields: Sequence[VelocityField], outdir, *,
                  manifest_extra: Optional[dict] = None) -> Path:
    """Write one CSV per epoch plus the JSON run manifest; returns the
    manifest path. Output is deterministic for identical inputs."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    epochs = []
    for idx, field in enumerate(fields):
        name = f"velocity_{idx:03d}.csv"
        field.to_csv(out / name)
        epochs.append({"index": idx, "csv": name,
                       "start_time_days": field.start_time,
                       "end_time_days": field.end_time,
                       "start_iso": field.start_iso})
    manifest = {"epochs": epochs, "n_epochs": len(epochs)}
    if manifest_extra:
        manifest.update(manifest_extra)
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path
