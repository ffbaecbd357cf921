import numpy as np
import pytest
from scipy import ndimage

from mrsi.errors import DataError, DimensionMismatchError
from mrsi.pipeline.core import CoilKSpaceSeries, ComplexVolume, GridSpec, ImageTimeSeries
from mrsi.pipeline.nuisance import (
    LipidMask,
    hsvd_decompose,
    lipid_l2_suppress,
    lipid_mask_estimate,
    low_rank_denoise,
    metabolite_map,
    water_remove,
    water_remove_samples,
)

DWELL = 1e-3
N = 64


def line(amp, freq, t2=0.1, n=N, dwell=DWELL):
    t = np.arange(n) * dwell
    return amp * np.exp(2j * np.pi * freq * t - t / t2)


def voxel_series(fid):
    g = GridSpec(nx=1, ny=1, nz=1, fov_x=10.0, fov_y=10.0, fov_z=10.0, dwell=DWELL, n_time=len(fid))
    return ImageTimeSeries(g, np.asarray(fid)[None, None, None, :])


class TestHsvd:
    """Damped exponential fitting"""

    def test_single_decay(self):
        fid = np.exp(-np.arange(N) * DWELL / 0.05)
        (c,) = hsvd_decompose(fid, 1, DWELL)
        assert c.frequency == pytest.approx(0.0, abs=0.5)
        assert c.damping == pytest.approx(20.0, rel=0.01)
        assert abs(c.amplitude) == pytest.approx(1.0, rel=1e-6)

    def test_two_lines(self):
        fid = line(1.0, 0.0) + line(0.5, 300.0)
        comps = sorted(hsvd_decompose(fid, 2, DWELL), key=lambda c: c.frequency)
        assert [c.frequency for c in comps] == pytest.approx([0.0, 300.0], abs=1.0)

    def test_zero_fid(self):
        assert hsvd_decompose(np.zeros(N), 4, DWELL) == []

    def test_order_bound(self):
        with pytest.raises(DataError):
            hsvd_decompose(line(1.0, 0.0), N // 2, DWELL)
        with pytest.raises(DataError):
            hsvd_decompose(line(1.0, 0.0), 0, DWELL)

    def test_error_non_increasing_in_order(self):
        fid = line(1.0, 0.0) + line(0.3, 200.0, t2=0.05) + line(0.1, -350.0, t2=0.2)
        errs = []
        for order in (1, 2, 3):
            rec = sum(c.signal(N, DWELL) for c in hsvd_decompose(fid, order, DWELL))
            errs.append(np.linalg.norm(fid - rec))
        assert errs[0] >= errs[1] - 1e-9 >= errs[2] - 2e-9
        assert errs[2] < 1e-6 * np.linalg.norm(fid)


class TestWaterRemove:
    def test_two_line_oracle(self):
        water, metab = line(1.0, 0.0), line(0.1, 300.0)
        out = water_remove(voxel_series(water + metab), (-150.0, 150.0), order=8).data[0, 0, 0]
        assert np.linalg.norm(out - metab) <= 1e-2 * np.linalg.norm(water)
        (c,) = hsvd_decompose(out, 1, DWELL)
        assert abs(c.amplitude) == pytest.approx(0.1, rel=0.05)

    def test_off_band_unchanged(self):
        fid = line(0.4, 300.0)
        out = water_remove(voxel_series(fid)).data[0, 0, 0]
        np.testing.assert_allclose(out, fid, rtol=1e-3, atol=1e-12)

    def test_zero_series(self):
        out = water_remove(voxel_series(np.zeros(N)))
        assert not np.any(out.data)

    def test_idempotent(self):
        once = water_remove(voxel_series(line(1.0, 20.0) + line(0.1, 300.0)), order=8)
        twice = water_remove(once, order=8)
        assert np.linalg.norm(twice.data - once.data) < 1e-3 * np.linalg.norm(once.data)

    def test_inverted_band(self):
        with pytest.raises(DataError):
            water_remove(voxel_series(line(1.0, 0.0)), (150.0, -150.0))

    def test_on_samples(self):
        g = GridSpec(nx=4, ny=4, nz=1, fov_x=40.0, fov_y=40.0, fov_z=10.0, dwell=DWELL, n_time=N)
        water, metab = line(1.0, 0.0), line(0.1, 300.0)
        ks = CoilKSpaceSeries(g, np.zeros((1, 3)), (water + metab)[None, None, :])
        out = water_remove_samples(ks, order=8)
        assert np.linalg.norm(out.data[0, 0] - metab) <= 1e-2 * np.linalg.norm(water)
        np.testing.assert_array_equal(out.coords, ks.coords)


def disc_volume(n=16, radius=5.0):
    g = GridSpec(nx=n, ny=n, nz=1, fov_x=float(n), fov_y=float(n), fov_z=1.0, dwell=DWELL)
    x, y, _ = np.meshgrid(*g.voxel_coords(), indexing="ij")
    return ComplexVolume(g, (np.hypot(x, y) <= radius).astype(float))


class TestLipidMask:
    """Object boundary ring"""

    def test_ring_matches_brute_force(self):
        vol = disc_volume()
        ring = lipid_mask_estimate(vol, threshold=0.5, erosion=1).mask[..., 0]
        obj = np.abs(vol.data[..., 0]) > 0.5
        padded = np.pad(obj, 1)
        expected = np.zeros_like(obj)
        for i, j in zip(*np.nonzero(obj)):
            expected[i, j] = not padded[i : i + 3, j : j + 3].all()
        np.testing.assert_array_equal(ring, expected)

    def test_wider_erosion_grows_ring(self):
        vol = disc_volume()
        thin = lipid_mask_estimate(vol, erosion=1)
        thick = lipid_mask_estimate(vol, erosion=2)
        assert thick.n_voxels > thin.n_voxels
        assert np.all(thick.mask[thin.mask])

    def test_ring_is_per_slice(self):
        g = GridSpec(nx=12, ny=12, nz=3, fov_x=12.0, fov_y=12.0, fov_z=3.0, dwell=DWELL)
        data = np.zeros(g.shape)
        data[2:10, 2:10, :] = 1.0
        ring = lipid_mask_estimate(ComplexVolume(g, data)).mask
        expected = ndimage.binary_erosion(data[..., 0] > 0, structure=np.ones((3, 3)))
        for z in range(3):
            np.testing.assert_array_equal(ring[..., z], (data[..., z] > 0) & ~expected)

    def test_empty_volume(self):
        g = GridSpec(nx=4, ny=4, nz=1, fov_x=4.0, fov_y=4.0, fov_z=1.0, dwell=DWELL)
        with pytest.raises(DataError):
            lipid_mask_estimate(ComplexVolume(g, np.zeros(g.shape)))

    def test_shape_checked(self):
        g = GridSpec(nx=4, ny=4, nz=1, fov_x=4.0, fov_y=4.0, fov_z=1.0, dwell=DWELL)
        with pytest.raises(DimensionMismatchError):
            LipidMask(g, np.zeros((4, 4, 2), dtype=bool))


class TestLipidSuppress:
    """Closed-form L2 lipid regularization"""

    def _setup(self):
        g = GridSpec(nx=2, ny=1, nz=1, fov_x=2.0, fov_y=1.0, fov_z=1.0, dwell=DWELL, n_time=8)
        data = np.zeros(g.shape + (8,), dtype=complex)
        data[0, 0, 0, 0] = 2.0
        mask = np.zeros(g.shape, dtype=bool)
        mask[0, 0, 0] = True
        return g, data, LipidMask(g.with_(n_time=1), mask)

    def test_beta_zero_identity(self):
        g, data, mask = self._setup()
        data[1, 0, 0, 3] = 1.0
        series = ImageTimeSeries(g, data)
        np.testing.assert_array_equal(lipid_l2_suppress(series, mask, 0.0).data, series.data)

    def test_orthogonal_voxel_unchanged(self):
        g, data, mask = self._setup()
        data[1, 0, 0, 3] = 1.0 - 0.5j
        out = lipid_l2_suppress(ImageTimeSeries(g, data), mask, 10.0)
        np.testing.assert_allclose(out.data[1, 0, 0], data[1, 0, 0], atol=1e-10)

    def test_in_subspace_attenuated(self):
        g, data, mask = self._setup()
        data[1, 0, 0, 0] = 1.0
        beta = 1e3 / 2.0**2
        out = lipid_l2_suppress(ImageTimeSeries(g, data), mask, beta)
        ratio = np.linalg.norm(out.data[1, 0, 0]) / np.linalg.norm(data[1, 0, 0])
        assert 20 * np.log10(ratio) <= -30.0

    def test_linear_and_contractive(self, rng):
        g = GridSpec(nx=4, ny=4, nz=1, fov_x=4.0, fov_y=4.0, fov_z=1.0, dwell=DWELL, n_time=8)
        mask = np.zeros(g.shape, dtype=bool)
        mask[0, :, 0] = True
        m = LipidMask(g.with_(n_time=1), mask)
        a = rng.standard_normal(g.shape + (8,)) + 1j * rng.standard_normal(g.shape + (8,))
        b = rng.standard_normal(g.shape + (8,)) + 1j * rng.standard_normal(g.shape + (8,))
        # keep the lipid subspace fixed between inputs
        b[mask] = a[mask]
        out_a = lipid_l2_suppress(ImageTimeSeries(g, a), m, 0.7).data
        out_b = lipid_l2_suppress(ImageTimeSeries(g, b), m, 0.7).data
        out_sum = lipid_l2_suppress(ImageTimeSeries(g, 0.5 * (a + b)), m, 0.7).data
        np.testing.assert_allclose(out_sum, 0.5 * (out_a + out_b), atol=1e-10)
        assert np.linalg.norm(out_a) <= np.linalg.norm(a)

    def test_errors(self):
        g, data, mask = self._setup()
        series = ImageTimeSeries(g, data)
        with pytest.raises(DataError):
            lipid_l2_suppress(series, mask, -1.0)
        with pytest.raises(DataError):
            lipid_l2_suppress(series, LipidMask.empty(g.with_(n_time=1)), 1.0)


class TestSpectralHelpers:
    def test_low_rank_keeps_rank_one(self, rng):
        g = GridSpec(nx=3, ny=3, nz=2, fov_x=3.0, fov_y=3.0, fov_z=2.0, dwell=DWELL, n_time=16)
        u = rng.standard_normal(g.shape)
        series = ImageTimeSeries(g, u[..., None] * line(1.0, 100.0, n=16))
        np.testing.assert_allclose(low_rank_denoise(series, 1).data, series.data, atol=1e-10)
        with pytest.raises(DataError):
            low_rank_denoise(series, 0)

    def test_metabolite_map_band(self):
        series = voxel_series(line(1.0, -250.0, t2=1.0))
        inside = metabolite_map(series, (-300.0, -200.0))[0, 0, 0]
        outside = metabolite_map(series, (200.0, 300.0))[0, 0, 0]
        assert inside > 10 * outside

    def test_metabolite_map_empty_band(self):
        with pytest.raises(DataError):
            metabolite_map(voxel_series(line(1.0, 0.0)), (1.0, 2.0))
