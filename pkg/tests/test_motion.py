import numpy as np
import pytest

from icetrack.motion import (
    IDS,
    IV,
    IX,
    IZ,
    GridMismatch,
    InitialDistribution,
    ProcessNoise,
    Raster,
    SurfaceModel,
    crevasse_fill,
    init_state,
    read_raster,
    transition,
)

from conftest import flat_raster


def _flat_surface(z0=100.0, n=60, cell=10.0, x0=-300.0, y0=-300.0):
    return SurfaceModel([(0.0, flat_raster(z0, n=n, cell=cell, x0=x0, y0=y0))])


NOISELESS = ProcessNoise(sigma_a=[0.0, 0.0], sigma_z=0.0)


class TestTransition:
    def test_stationary_point_unchanged(self):
        surface = _flat_surface(100.0)
        state = np.array([10.0, -20.0, 0.0, 0.0, 102.0, 2.0])
        noise = ProcessNoise(sigma_a=[2.0, 2.0], sigma_z=0.1)
        out, dead = transition(state, 1.0, noise, surface, 0.0,
                               accel_draw=np.zeros(2), walk_draw=0.0)
        assert not dead
        assert np.array_equal(out[IX], state[IX])
        assert np.array_equal(out[IV], state[IV])
        assert out[IDS] == state[IDS]  # |v| = 0: the walk cannot move

    def test_elevation_slaved_to_surface_plus_offset(self):
        surface = _flat_surface(100.0)
        state = np.array([0.0, 0.0, 5.0, -3.0, 102.0, 2.0])
        out, dead = transition(state, 1.0, NOISELESS, surface, 0.0,
                               accel_draw=np.zeros(2), walk_draw=0.0)
        assert not dead
        assert out[IZ] == pytest.approx(102.0, abs=1e-9)
        assert out[IZ] - 100.0 == pytest.approx(out[IDS], abs=1e-9)

    def test_moment_oracle(self):
        # closed-form moments: Var(v'-v) = dt^2 sa^2, Cov(x'-x-v dt, v'-v) = dt^3/2 sa^2
        surface = _flat_surface(0.0, n=100, cell=50.0, x0=-2500.0, y0=-2500.0)
        rng = np.random.default_rng(8)
        n = 100_000
        states = np.zeros((n, 6))
        dt = 1.0
        noise = ProcessNoise(sigma_a=[2.0, 2.0], sigma_z=0.0)
        accel = rng.standard_normal((n, 2))
        out, dead = transition(states, dt, noise, surface, 0.0,
                               accel_draw=accel, walk_draw=np.zeros(n))
        assert not dead.any()
        dv = out[:, IV] - states[:, IV]
        dx = out[:, IX] - states[:, IX] - dt * states[:, IV]
        for axis in range(2):
            assert np.var(dv[:, axis]) == pytest.approx(4.0, rel=0.05)
            cov = np.cov(dx[:, axis], dv[:, axis])[0, 1]
            assert cov == pytest.approx(dt ** 3 / 2 * 4.0, rel=0.05)

    def test_reversibility_with_same_draws(self):
        surface = _flat_surface()
        rng = np.random.default_rng(9)
        state = np.array([5.0, 5.0, 3.0, -2.0, 100.0, 0.0])
        noise = ProcessNoise(sigma_a=[2.0, 1.0], sigma_z=0.0)
        draw = rng.standard_normal(2)
        fwd, _ = transition(state, 0.5, noise, surface, 0.0, draw, 0.0)
        back, _ = transition(fwd, -0.5, noise, surface, 0.5, draw, 0.0)
        assert np.allclose(back[IX], state[IX], atol=1e-12)
        assert np.allclose(back[IV], state[IV], atol=1e-12)

    def test_deterministic_part_reversible_backward_tracking(self):
        surface = _flat_surface()
        state = np.array([5.0, 5.0, 3.0, -2.0, 100.0, 0.0])
        fwd, _ = transition(state, 2.0, NOISELESS, surface, 0.0, np.zeros(2), 0.0)
        back, _ = transition(fwd, -2.0, NOISELESS, surface, 2.0, np.zeros(2), 0.0)
        assert np.allclose(back[:4], state[:4], atol=1e-12)

    def test_offset_walk_variance_grows_with_path_length(self):
        surface = _flat_surface(0.0, n=100, cell=50.0, x0=-2500.0, y0=-2500.0)
        rng = np.random.default_rng(10)
        n = 50_000
        speed = 5.0
        states = np.zeros((n, 6))
        states[:, IV] = [speed, 0.0]
        noise = ProcessNoise(sigma_a=[0.0, 0.0], sigma_z=0.1)
        dt = 0.5
        k = 6
        cur = states
        for _ in range(k):
            cur, dead = transition(cur, dt, noise, surface, 0.0,
                                   np.zeros((n, 2)), rng.standard_normal(n))
            assert not dead.any()
        ds = cur[:, IDS]
        assert abs(ds.mean()) < 3 * ds.std() / np.sqrt(n)
        expected_var = k * (noise.sigma_z * speed * dt) ** 2
        assert ds.var() == pytest.approx(expected_var, rel=0.05)

    def test_out_of_domain_flags_terminated_and_freezes(self):
        surface = _flat_surface(100.0, n=10, cell=10.0, x0=0.0, y0=0.0)
        state = np.array([90.0, 50.0, 50.0, 0.0, 100.0, 0.0])
        out, dead = transition(state, 1.0, NOISELESS, surface, 0.0, np.zeros(2), 0.0)
        assert dead
        assert np.array_equal(out, state)

    def test_zero_dt_rejected(self):
        surface = _flat_surface()
        with pytest.raises(ValueError):
            transition(np.zeros(6), 0.0, NOISELESS, surface, 0.0, np.zeros(2), 0.0)


class TestInitState:
    def test_degenerate_normals_are_exact(self):
        surface = _flat_surface(100.0)
        dist = InitialDistribution([10.0, 20.0], np.zeros((2, 2)),
                                   [1.0, -1.0], np.zeros((2, 2)), 0.0)
        states, dead = init_state(dist, surface, 0.0, 5, np.random.default_rng(0))
        assert not dead.any()
        assert np.allclose(states[:, IX], [10.0, 20.0])
        assert np.allclose(states[:, IV], [1.0, -1.0])
        assert np.allclose(states[:, IZ], 100.0)
        assert np.allclose(states[:, IDS], 0.0)

    def test_monte_carlo_moments(self):
        surface = _flat_surface(50.0, n=100, cell=50.0, x0=-2500.0, y0=-2500.0)
        x_cov = np.array([[9.0, 2.0], [2.0, 4.0]])
        v_cov = np.array([[1.0, -0.3], [-0.3, 0.5]])
        dist = InitialDistribution([5.0, -5.0], x_cov, [2.0, 1.0], v_cov, 4.0)
        n = 100_000
        states, dead = init_state(dist, surface, 0.0, n, np.random.default_rng(1))
        assert not dead.any()
        for sl, mean, cov in ((IX, dist.x_mean, x_cov), (IV, dist.v_mean, v_cov)):
            block = states[:, sl]
            se = np.sqrt(np.diag(cov) / n)
            assert np.all(np.abs(block.mean(axis=0) - mean) < 3 * se)
            sample_cov = np.cov(block.T)
            assert np.allclose(sample_cov, cov, rtol=0.05, atol=0.05)
        assert states[:, IDS].var() == pytest.approx(4.0, rel=0.05)

    def test_zero_offset_variance_pins_z_to_surface(self):
        surface = _flat_surface(80.0)
        dist = InitialDistribution([0.0, 0.0], 25.0 * np.eye(2),
                                   [0.0, 0.0], np.eye(2), 0.0)
        states, _ = init_state(dist, surface, 0.0, 1000, np.random.default_rng(2))
        assert np.allclose(states[:, IZ], 80.0, atol=1e-9)

    def test_invalid_covariance_rejected(self):
        with pytest.raises(ValueError):
            InitialDistribution([0, 0], [[1.0, 2.0], [0.5, 1.0]], [0, 0], np.eye(2))
        with pytest.raises(ValueError):
            InitialDistribution([0, 0], [[-1.0, 0], [0, 1.0]], [0, 0], np.eye(2))


class TestSurfacePreparation:
    def test_constant_raster_unchanged(self):
        rast = flat_raster(42.0, n=20, cell=10.0)
        mask = Raster(np.ones((20, 20)), rast.x0, rast.y0, rast.cellsize)
        filled = crevasse_fill(rast, mask, kernel_m=30.0)
        assert np.allclose(filled.values, 42.0, atol=1e-9)

    def test_single_cell_pit_removed(self):
        values = np.full((21, 21), 200.0)
        values[10, 10] = 195.0  # 5 m deep crevasse
        rast = Raster(values, 0.0, 0.0, 10.0)
        mask = Raster(np.ones_like(values), 0.0, 0.0, 10.0)
        filled = crevasse_fill(rast, mask, kernel_m=30.0)
        assert np.all(filled.values >= 200.0 - 1e-9)

    def test_outside_mask_untouched(self):
        values = np.full((21, 21), 200.0)
        values[10, 10] = 195.0
        values[2, 2] = 190.0
        rast = Raster(values, 0.0, 0.0, 10.0)
        mask_values = np.ones_like(values)
        mask_values[:5, :5] = 0.0
        mask = Raster(mask_values, 0.0, 0.0, 10.0)
        filled = crevasse_fill(rast, mask, kernel_m=30.0)
        assert filled.values[2, 2] == 190.0
        assert filled.values[10, 10] >= 200.0 - 1e-9

    def test_mask_grid_mismatch(self):
        rast = flat_raster(1.0, n=10)
        bad_mask = Raster(np.ones((10, 10)), 5.0, 0.0, 10.0)
        with pytest.raises(GridMismatch):
            crevasse_fill(rast, bad_mask, 30.0)

    def test_epoch_grid_mismatch(self):
        with pytest.raises(GridMismatch):
            SurfaceModel([(0.0, flat_raster(1.0, n=10)),
                          (1.0, flat_raster(1.0, n=12))])

    def test_time_interpolation_midway(self):
        r0 = flat_raster(100.0, n=10)
        r1 = Raster(r0.values + 2.0, r0.x0, r0.y0, r0.cellsize)
        surf = SurfaceModel([(0.0, r0), (10.0, r1)])
        xy = np.array([50.0, 50.0])
        assert surf.evaluate(xy, 5.0) == pytest.approx(101.0, abs=1e-9)
        assert surf.evaluate(xy, 0.0) == pytest.approx(100.0, abs=1e-9)
        assert surf.evaluate(xy, -5.0) == pytest.approx(100.0, abs=1e-9)  # clamped
        assert surf.evaluate(xy, 25.0) == pytest.approx(102.0, abs=1e-9)  # clamped

    def test_spline_reproduces_grid_nodes(self):
        rng = np.random.default_rng(3)
        values = rng.uniform(50, 150, (12, 12))
        rast = Raster(values, 0.0, 0.0, 10.0)
        surf = SurfaceModel([(0.0, rast)])
        x = rast.x_centers()
        y = rast.y_centers_ascending()
        for i in (0, 3, 11):
            for j in (0, 7, 11):
                got = surf.evaluate(np.array([x[j], y[i]]), 0.0)
                assert got == pytest.approx(rast.values_y_ascending()[i, j], abs=1e-8)

    def test_evaluation_smooth_within_epoch(self):
        rng = np.random.default_rng(4)
        values = rng.uniform(0, 10, (15, 15))
        surf = SurfaceModel([(0.0, Raster(values, 0.0, 0.0, 10.0))])
        xs = np.linspace(20.0, 120.0, 400)
        pts = np.column_stack([xs, np.full_like(xs, 71.3)])
        z = surf.evaluate(pts, 0.0)
        slopes = np.diff(z) / np.diff(xs)
        # first derivative has no jumps at cell boundaries (C1 at least)
        assert np.max(np.abs(np.diff(slopes))) < 0.05

    def test_out_of_domain_evaluates_nan(self):
        surf = _flat_surface(100.0, n=10, cell=10.0, x0=0.0, y0=0.0)
        assert np.isnan(surf.evaluate(np.array([-50.0, 50.0]), 0.0))
        assert np.isnan(surf.evaluate(np.array([np.nan, 50.0]), 0.0))


class TestRasterIO:
    def test_esri_ascii_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        rast = Raster(rng.uniform(0, 100, (7, 9)), 100.0, 250.0, 12.5)
        path = tmp_path / "dem.asc"
        rast.write_esri_ascii(path)
        loaded = read_raster(path)
        assert loaded.shape == (7, 9)
        assert np.allclose(loaded.values, rast.values)
        assert loaded.x0 == 100.0 and loaded.y0 == 250.0 and loaded.cellsize == 12.5

    def test_esri_ascii_nodata(self, tmp_path):
        values = np.array([[1.0, -9999.0], [3.0, 4.0]])
        rast = Raster(values, 0.0, 0.0, 1.0)
        path = tmp_path / "nd.asc"
        rast.write_esri_ascii(path)
        loaded = read_raster(path)
        assert np.isnan(loaded.values[0, 1])

    def test_geotiff_read(self, tmp_path):
        from PIL import Image, TiffImagePlugin

        rng = np.random.default_rng(6)
        values = rng.uniform(0, 50, (8, 6)).astype(np.float32)
        info = TiffImagePlugin.ImageFileDirectory_v2()
        info[33550] = (10.0, 10.0, 0.0)
        info.tagtype[33550] = 12  # DOUBLE
        info[33922] = (0.0, 0.0, 0.0, 500.0, 4800.0, 0.0)
        info.tagtype[33922] = 12
        path = tmp_path / "dem.tif"
        Image.fromarray(values).save(path, tiffinfo=info)

        loaded = read_raster(path)
        assert loaded.shape == (8, 6)
        assert np.allclose(loaded.values, values, atol=1e-5)
        assert loaded.cellsize == 10.0
        assert loaded.x0 == 500.0
        # top edge y = 4800, 8 rows of 10 m -> yll = 4720
        assert loaded.y0 == pytest.approx(4720.0)

    def test_process_noise_validation(self):
        with pytest.raises(ValueError):
            ProcessNoise(sigma_a=[-1.0, 1.0], sigma_z=0.1)
        with pytest.raises(ValueError):
            ProcessNoise(sigma_a=[1.0, 1.0], sigma_z=-0.1)
