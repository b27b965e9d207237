"""Shared oracles and scene builders for the test suite.

Oracles here are written independently of the library code paths they
check: rotations are composed through scipy axis-angle primitives,
projection goes through an explicit homogeneous matrix, and SSD/medians
use brute-force loops.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from icetrack import imaging
from icetrack.geometry import CameraModel
from icetrack.motion import Raster, SurfaceModel

BASE_ROWS = np.array([
    [1.0, 0.0, 0.0],   # right (east) for a camera looking north
    [0.0, 0.0, -1.0],  # down
    [0.0, 1.0, 0.0],   # forward (north)
])


def oracle_rotation(azimuth, elevation, roll):
    """Camera-from-world rotation built by composing axis-angle steps."""
    r = BASE_ROWS.copy()
    # rotate the rig clockwise (seen from above) by the azimuth
    q = Rotation.from_rotvec([0.0, 0.0, -azimuth]).as_matrix()
    r = r @ q.T
    # tilt up about the current right axis
    q = Rotation.from_rotvec(elevation * r[0]).as_matrix()
    r = r @ q.T
    # roll about the current forward axis
    q = Rotation.from_rotvec(roll * r[2]).as_matrix()
    return r @ q.T


def oracle_project(camera: CameraModel, points):
    """Homogeneous-matrix pinhole projection with explicit distortion."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    r = oracle_rotation(*camera.orientation)
    rt = np.hstack([r, (-r @ camera.position)[:, None]])
    homo = np.hstack([pts, np.ones((len(pts), 1))])
    cam = homo @ rt.T
    xn = cam[:, 0] / cam[:, 2]
    yn = cam[:, 1] / cam[:, 2]
    k1, k2 = camera.radial_distortion
    p1, p2 = camera.tangential_distortion
    r2 = xn ** 2 + yn ** 2
    rad = 1 + k1 * r2 + k2 * r2 ** 2
    xd = xn * rad + 2 * p1 * xn * yn + p2 * (r2 + 2 * xn ** 2)
    yd = yn * rad + p1 * (r2 + 2 * yn ** 2) + 2 * p2 * xn * yn
    kmat = np.array([
        [camera.focal_length, 0, camera.principal_point[0]],
        [0, camera.focal_length, camera.principal_point[1]],
        [0, 0, 1.0],
    ])
    proj = np.column_stack([xd, yd, np.ones(len(pts))]) @ kmat.T
    return proj[:, :2]


def brute_force_ssd(template, image):
    """Double-loop area-averaged SSD over all full-overlap offsets."""
    t = np.asarray(template, dtype=float)
    i = np.asarray(image, dtype=float)
    mr, nr = t.shape
    mt, nt = i.shape
    out = np.zeros((mt - mr + 1, nt - nr + 1))
    for a in range(mt - mr + 1):
        for b in range(nt - nr + 1):
            acc = 0.0
            for p in range(mr):
                for q in range(nr):
                    d = t[p, q] - i[a + p, b + q]
                    acc += d * d
            out[a, b] = acc / (mr * nr)
    return out


def parabola_surface(center, sigma_ell=0.25, sigma_m=0.0, half=5, anchor=(0, 0)):
    """Likelihood surface whose SSD is an exact paraboloid at ``center``."""
    du = np.arange(-half, half + 1, dtype=float)
    dv = np.arange(-half, half + 1, dtype=float)
    gu, gv = np.meshgrid(du, dv)
    ssd = (gu - center[0]) ** 2 + (gv - center[1]) ** 2
    return imaging.LikelihoodSurface(
        log_ssd=ssd, offset_origin=np.array([-half, -half], dtype=float),
        sigma_ell=sigma_ell, sigma_m=sigma_m, anchor=np.asarray(anchor, dtype=int))


def flat_raster(z0=100.0, n=40, cell=10.0, x0=0.0, y0=0.0):
    return Raster(np.full((n, n), float(z0)), x0, y0, cell)


@pytest.fixture
def flat_surface():
    """Flat 400 m x 400 m surface at elevation 100 m, centered on origin."""
    return SurfaceModel([(0.0, flat_raster(100.0, n=40, cell=10.0, x0=-200.0, y0=-200.0))])


def simple_camera(**overrides):
    defaults = dict(
        position=[0.0, -600.0, 180.0],
        orientation=[0.0, np.arctan2(-80.0, 600.0), 0.0],
        focal_length=700.0,
        principal_point=[319.5, 239.5],
        sensor_size=[640, 480],
    )
    defaults.update(overrides)
    return CameraModel(**defaults)


def standard_scenario(n_frames=13, dt=0.25, speed=(10.0, 0.0), texture_seed=5,
                      jitter_px=0.0, jitter_deg=0.0, jitter_seed=17,
                      illumination=False, occluded=(), affine=None):
    """Two-camera oblique scene over a flat surface with eastward flow.

    Camera A looks north across the flow; camera B looks west along it
    (the complementary-information geometry). The glacier occupies the
    central rectangle; the surrounding land carries the control points.
    """
    from icetrack.synth import Scenario, TextureField, VelocityModel

    cam_a = CameraModel(
        position=[0.0, -600.0, 280.0],
        orientation=[0.0, np.arctan2(100.0 - 280.0, 600.0), 0.0],
        focal_length=700.0, principal_point=[319.5, 239.5], sensor_size=[640, 480])
    cam_b = CameraModel(
        position=[700.0, 0.0, 450.0],
        orientation=[np.deg2rad(270.0), np.arctan2(100.0 - 450.0, 700.0), 0.0],
        focal_length=700.0, principal_point=[319.5, 239.5], sensor_size=[640, 480])

    frame_times = np.arange(n_frames) * dt
    rng = np.random.default_rng(jitter_seed)
    jitter = {}
    for cam_id in ("cam_a", "cam_b"):
        rot = np.deg2rad(rng.uniform(-jitter_deg, jitter_deg, n_frames))
        trans = rng.uniform(-jitter_px, jitter_px, (n_frames, 2))
        jitter[cam_id] = (rot, trans)
    illum = {}
    if illumination:
        for cam_id in ("cam_a", "cam_b"):
            illum[cam_id] = (1.0 + rng.uniform(-0.06, 0.06, n_frames),
                             rng.uniform(-6.0, 6.0, n_frames))
    occlusion = {cam_id: {int(k): 1.0 for k in occluded} for cam_id in ("cam_a", "cam_b")}

    control = np.array([
        [-170.0, 170.0, 100.0], [0.0, 190.0, 100.0], [170.0, 170.0, 100.0],
        [-120.0, -180.0, 100.0], [120.0, -180.0, 100.0],
        [-280.0, 60.0, 100.0], [280.0, 60.0, 100.0], [0.0, -200.0, 100.0],
        [-200.0, 200.0, 100.0], [200.0, 200.0, 100.0],
        [-300.0, -60.0, 100.0], [300.0, -60.0, 100.0],
        [80.0, 230.0, 100.0], [-80.0, 230.0, 100.0],
    ])
    seeds = np.array([[x, y] for y in (-100.0, 0.0, 100.0) for x in (-100.0, 0.0, 100.0)])

    return Scenario(
        surface_elevation=100.0,
        domain=(-400.0, 400.0, -400.0, 400.0),
        glacier_bounds=(-250.0, 250.0, -150.0, 150.0),
        texture=TextureField(seed=texture_seed),
        velocity=VelocityModel(b=np.asarray(speed, dtype=float), a=affine),
        cameras={"cam_a": cam_a, "cam_b": cam_b},
        frame_times=frame_times,
        jitter=jitter,
        illumination=illum,
        occlusion=occlusion,
        control_points=control,
        seed_points=seeds,
    )
