import math

import numpy as np
import pytest
from conftest import blob
from pydantic import ValidationError

from mrsi.errors import DataError
from mrsi.pipeline.core import ComplexVolume, GridSpec, ImageTimeSeries
from mrsi.pipeline.encoding import B0Map, EncodingOperator, SensitivityMaps
from mrsi.pipeline.phantom import (
    FidModel,
    PhantomConfig,
    PhantomSpec,
    TubeSet,
    calibration_kspace,
    container_support,
    default_derenzo,
    fid_signal,
    rasterize,
    sector_modulation,
    sigma_for_snr,
    simulate_acquisition,
    simulate_experiment,
    smooth_b0_map,
    smooth_coil_maps,
    synthesize_series,
)
from mrsi.pipeline.tgv import TgvConfig, water_reconstruct_per_timepoint
from mrsi.pipeline.trajectory import Trajectory, voronoi_dcf

# 3.44 mm voxels
COARSE = GridSpec(nx=64, ny=64, nz=1, fov_x=220.0, fov_y=220.0, fov_z=10.0, dwell=1 / 2326)


class TestDerenzo:
    """Resolution phantom layout"""

    def test_diameters_and_pitch(self):
        spec = default_derenzo()
        assert sorted(ts.diameter for ts in spec.tube_sets) == [2.0, 4.0, 6.0, 8.0, 10.0]
        assert spec.tube_set(4.0).pitch == 8.0
        assert all(ts.count == 6 for ts in spec.tube_sets)

    def test_tubes_inside_container(self):
        spec = default_derenzo()
        assert len(spec.tubes()) == 30
        for x, y, d in spec.tubes():
            assert math.hypot(x, y) + d / 2 <= 133.3 / 2

    def test_adjacent_tubes_at_pitch(self):
        spec = default_derenzo()
        ts = spec.tube_set(6.0)
        c = spec.tube_centers(ts)
        dist = np.linalg.norm(c[:, None] - c[None], axis=-1)
        assert np.sum(np.isclose(dist, 12.0)) // 2 == 9

    def test_tube_outside_container_rejected(self):
        with pytest.raises(ValidationError):
            PhantomSpec(container_diameter=40.0, tube_sets=[TubeSet(diameter=10.0)])

    def test_non_triangular_count_rejected(self):
        with pytest.raises(ValidationError):
            TubeSet(diameter=4.0, count=5)

    def test_unknown_diameter(self):
        with pytest.raises(DataError):
            default_derenzo().tube_set(3.0)


class TestRasterize:
    def test_values_inside_and_outside(self):
        g = GridSpec(nx=140, ny=140, nz=1, fov_x=140.0, fov_y=140.0, fov_z=10.0, dwell=1e-3)
        spec = default_derenzo()
        vol = rasterize(spec, g).data.real
        x, y = spec.tube_centers(spec.tube_set(10.0))[0]
        assert vol[int(round(x)) + 70, int(round(y)) + 70, 0] == 1.0
        assert vol[0, 0, 0] == 0.0
        assert vol.min() >= 0.0 and vol.max() <= 1.0

    def test_supersample_refinement(self):
        spec = default_derenzo()
        a = rasterize(spec, COARSE, supersample=4).data.real
        b = rasterize(spec, COARSE, supersample=16).data.real
        c = spec.tube_centers(spec.tube_set(4.0))
        dx = COARSE.voxel_size[0]
        lo = np.floor((c.min(axis=0) - 6.0) / dx).astype(int) + 32
        hi = np.ceil((c.max(axis=0) + 6.0) / dx).astype(int) + 32
        box = (slice(lo[0], hi[0] + 1), slice(lo[1], hi[1] + 1))
        assert np.mean(np.abs(a[box] - b[box])) < 0.02

    def test_bad_supersample(self):
        with pytest.raises(DataError):
            rasterize(default_derenzo(), COARSE, supersample=0)

    def test_support_is_container_disc(self):
        sup = container_support(default_derenzo(), COARSE)
        assert sup[32, 32, 0] and not sup[0, 0, 0]


class TestSignals:
    def test_first_point_is_amplitude(self, grid8):
        vol = ComplexVolume(grid8.with_(n_time=1), blob(grid8))
        series = synthesize_series(vol, FidModel(amplitude=2.0, frequency=30.0, t2=0.05), grid8)
        np.testing.assert_allclose(series.data[..., 0], 2.0 * vol.data)

    def test_on_resonance_decay(self):
        sig = fid_signal(FidModel(amplitude=1.0, frequency=0.0, t2=0.05), 32, 1e-3)
        np.testing.assert_allclose(np.abs(sig), np.exp(-np.arange(32) * 1e-3 / 0.05), rtol=1e-12)

    def test_spectrum_peak_bin(self):
        n, dwell, f = 128, 1 / 2326, -500.0
        sig = fid_signal(FidModel(frequency=f, t2=1.0), n, dwell)
        freqs = np.fft.fftfreq(n, dwell)
        assert np.argmax(np.abs(np.fft.fft(sig))) == np.argmin(np.abs(freqs - f))

    def test_multi_line_sums(self):
        a, b = FidModel(amplitude=1.0), FidModel(amplitude=0.5, frequency=100.0)
        np.testing.assert_allclose(fid_signal([a, b], 16, 1e-3), fid_signal(a, 16, 1e-3) + fid_signal(b, 16, 1e-3))

    def test_grid_mismatch(self, grid8, grid16):
        vol = ComplexVolume(grid8.with_(n_time=1), np.zeros(grid8.shape))
        with pytest.raises(DataError):
            synthesize_series(vol, FidModel(), grid16)


def dc_trajectory(grid, n=1):
    return Trajectory(grid, (), explicit_coords=np.zeros((n, 3)))


class TestAcquisition:
    """Forward simulation with Gaussian noise"""

    def test_dc_sample_is_spatial_sum(self, grid8):
        g = grid8.with_(n_coils=1)
        series = synthesize_series(ComplexVolume(g.with_(n_time=1), blob(g)), FidModel(), g)
        maps = SensitivityMaps.identity(g.with_(n_time=1))
        s = simulate_acquisition(series, dc_trajectory(g), maps, B0Map.zeros(g.with_(n_time=1)), 0.0, seed=0)
        assert s.data[0, 0, 0] == pytest.approx(np.sum(series.data[..., 0]), rel=1e-3)

    def test_noise_variance(self):
        g = GridSpec(nx=4, ny=4, nz=1, fov_x=40.0, fov_y=40.0, fov_z=10.0, dwell=1e-3, n_time=100)
        maps = SensitivityMaps.identity(g.with_(n_time=1))
        zero = ImageTimeSeries(g, np.zeros(g.shape + (100,)))
        s = simulate_acquisition(zero, dc_trajectory(g, 1000), maps, None, 0.3, seed=5)
        assert np.mean(np.abs(s.data) ** 2) == pytest.approx(2 * 0.3**2, rel=0.05)

    def test_deterministic_and_seeded(self, grid8, traj8, maps8):
        zero = ImageTimeSeries(grid8, np.zeros(grid8.shape + (8,)))
        a = simulate_acquisition(zero, traj8, maps8, None, 0.1, seed=3).data
        b = simulate_acquisition(zero, traj8, maps8, None, 0.1, seed=3).data
        c = simulate_acquisition(zero, traj8, maps8, None, 0.1, seed=4).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_linear_without_noise(self, grid8, traj8, maps8, rng):
        x = rng.standard_normal(grid8.shape + (8,)) + 1j * rng.standard_normal(grid8.shape + (8,))
        y = rng.standard_normal(grid8.shape + (8,))
        b0 = smooth_b0_map(grid8, 15.0)

        def sim(d):
            return simulate_acquisition(ImageTimeSeries(grid8, d), traj8, maps8, b0, 0.0, seed=0).data

        np.testing.assert_allclose(sim(x + 2 * y), sim(x) + 2 * sim(y), atol=1e-10)

    def test_negative_sigma(self, grid8, traj8, maps8):
        with pytest.raises(DataError):
            simulate_acquisition(ImageTimeSeries(grid8, np.zeros(grid8.shape + (8,))), traj8, maps8, None, -1.0, 0)

    def test_sigma_for_snr(self, grid8, traj8, maps8):
        series = synthesize_series(ComplexVolume(grid8.with_(n_time=1), blob(grid8)), FidModel(), grid8)
        clean = simulate_acquisition(series, traj8, maps8, None, 0.0, seed=0)
        sigma = sigma_for_snr(clean, 20.0)
        rms = np.sqrt(np.mean(np.abs(clean.data) ** 2))
        assert rms / (sigma * math.sqrt(2)) == pytest.approx(10.0)

    @pytest.mark.slow
    def test_round_trip_through_water_recon(self, grid16, traj16, maps16):
        g1 = grid16.with_(n_time=1)
        x = blob(g1, width_mm=25.0)
        s = simulate_acquisition(ImageTimeSeries(g1, x[..., None]), traj16, maps16, None, 0.0, seed=0)
        ops = EncodingOperator(traj16, maps16, dcf=voronoi_dcf(traj16))
        out = water_reconstruct_per_timepoint(s, ops, TgvConfig(lam=0.0, outer_iters=30))
        assert np.linalg.norm(out.data - x) / np.linalg.norm(x) < 0.05


class TestNuisanceFields:
    def test_coil_maps_normalized(self, grid16):
        maps = smooth_coil_maps(grid16.with_(n_time=1), 4, seed=2)
        np.testing.assert_allclose(np.sum(np.abs(maps.data) ** 2, axis=0), 1.0, atol=1e-12)
        with pytest.raises(DataError):
            smooth_coil_maps(grid16, 0)

    def test_b0_peak_on_support(self, grid16):
        sup = np.zeros(grid16.shape, dtype=bool)
        sup[4:12, 4:12, :] = True
        b0 = smooth_b0_map(grid16, 20.0, sup)
        assert np.max(np.abs(b0.df[sup])) == pytest.approx(20.0)
        assert not np.any(b0.df[~sup])

    def test_calibration_crop(self, grid16, maps16):
        g1 = grid16.with_(n_time=1)
        calib = calibration_kspace(ComplexVolume(g1, blob(g1)), maps16, (6, 6, 8))
        assert calib.data.shape == (2, 6, 6, 4)
        assert calib.grid.fov == g1.fov


class TestExperiment:
    def test_shared_fields_and_noise(self, grid16, traj16):
        cfg = PhantomConfig(snr_db=30.0)
        exp = simulate_experiment(cfg, grid16, traj16, seed=11, calib_shape=(8, 8, 4))
        assert exp.water.data.shape == (2, traj16.n_samples, 8)
        assert exp.metabolite.data.shape == exp.water.data.shape
        assert exp.noise_sigma > 0
        np.testing.assert_allclose(exp.metabolite_truth.data[..., 0], 0.05 * exp.phantom.data)
        assert exp.calib.data.shape == (2, 8, 8, 4)
        assert exp.lipid_ring.data.real.max() > 0
        again = simulate_experiment(cfg, grid16, traj16, seed=11, calib_shape=(8, 8, 4))
        np.testing.assert_array_equal(again.water.data, exp.water.data)

    def test_noiseless(self, grid16, traj16):
        exp = simulate_experiment(PhantomConfig(snr_db=None), grid16, traj16, seed=0, calib_shape=(8, 8, 4))
        assert exp.noise_sigma == 0.0


class TestSectorModulation:
    def test_small_tubes_unresolved(self):
        spec = default_derenzo()
        img = rasterize(spec, COARSE).data.real[..., 0]
        assert sector_modulation(img, spec, COARSE, 2.0) < sector_modulation(img, spec, COARSE, 10.0)

    def test_shape_checked(self):
        with pytest.raises(DataError):
            sector_modulation(np.zeros((8, 8)), default_derenzo(), COARSE, 4.0)
