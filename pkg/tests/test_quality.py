import numpy as np
import pytest

from mrsi.errors import DataError, DimensionMismatchError
from mrsi.pipeline.quality import bland_altman, nrmse, pearson_cc, score, ssim


class TestNrmse:
    def test_identity_and_zero_prediction(self, rng):
        ref = rng.standard_normal((6, 6, 2))
        assert nrmse(ref, ref) == 0.0
        assert nrmse(np.zeros_like(ref), ref) == pytest.approx(1.0)

    def test_constructed_perturbation(self, rng):
        ref = rng.standard_normal((8, 8, 2))
        eps = rng.standard_normal(ref.shape)
        eps *= 0.1 * np.linalg.norm(ref) / np.linalg.norm(eps)
        assert nrmse(ref + eps, ref) == pytest.approx(0.1, abs=1e-12)
        assert nrmse(ref + 2 * eps, ref) == pytest.approx(0.2, abs=1e-12)

    def test_complex_scored_on_magnitude(self):
        ref = np.full((4, 4), 1.0 + 0j)
        assert nrmse(ref * 1j, ref) == pytest.approx(0.0)

    def test_errors(self):
        with pytest.raises(DataError):
            nrmse(np.ones(4), np.zeros(4))
        with pytest.raises(DimensionMismatchError):
            nrmse(np.ones(4), np.ones(5))


class TestSsim:
    """Gaussian-window structural similarity"""

    def test_identical(self, rng):
        a = rng.uniform(size=(16, 16, 2))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images(self):
        c1 = 0.01**2
        value = ssim(np.ones((12, 12)), np.zeros((12, 12)))
        assert value == pytest.approx(c1 / (1 + c1), rel=1e-9)

    def test_symmetric_and_bounded(self, rng):
        a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
        assert -1.0 < ssim(a, b) <= 1.0

    def test_degrades_with_noise(self, rng):
        a = np.zeros((24, 24))
        a[6:18, 6:18] = 1.0
        mild = a + 0.05 * rng.standard_normal(a.shape)
        strong = a + 0.3 * rng.standard_normal(a.shape)
        assert ssim(a, a) > ssim(mild, a) > ssim(strong, a)

    def test_needs_images(self):
        with pytest.raises(DimensionMismatchError):
            ssim(np.ones(5), np.ones(5))


class TestPearson:
    def test_affine(self, rng):
        a = rng.standard_normal(50)
        assert pearson_cc(a, 2 * a + 3) == pytest.approx(1.0)
        assert pearson_cc(a, -a) == pytest.approx(-1.0)

    def test_independent_samples(self, rng):
        assert abs(pearson_cc(rng.standard_normal(10_000), rng.standard_normal(10_000))) < 0.05

    def test_zero_variance(self):
        with pytest.raises(DataError):
            pearson_cc(np.ones(4), np.arange(4.0))
        with pytest.raises(DataError):
            pearson_cc(np.ones(1), np.ones(1))


class TestBlandAltman:
    def test_equal(self, rng):
        a = rng.standard_normal(20)
        assert bland_altman(a, a) == (0.0, 0.0, 0.0)

    def test_constant_offset(self):
        b = np.arange(10.0)
        ba = bland_altman(b + 1.0, b)
        assert ba.bias == pytest.approx(1.0)
        assert ba.loa_low == pytest.approx(1.0)
        assert ba.loa_high == pytest.approx(1.0)

    def test_statistics(self, rng):
        b = rng.standard_normal(100_000)
        a = b + rng.normal(0.5, 1.0, size=b.size)
        ba = bland_altman(a, b)
        assert ba.bias == pytest.approx(0.5, abs=0.02)
        assert (ba.loa_high - ba.loa_low) / 2 == pytest.approx(1.96, abs=0.05)

    def test_length_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            bland_altman(np.ones(3), np.ones(4))


class TestScore:
    def test_row_for_scaled_copy(self, rng):
        ref = rng.uniform(0.1, 1.0, size=(12, 12, 2))
        row = score("tgv_er", 2, ref * 1.0, ref)
        assert row.method == "tgv_er" and row.af == 2.0
        assert row.nrmse == 0.0
        assert row.cc == pytest.approx(1.0)
        assert row.ssim == pytest.approx(1.0)
        assert set(row.as_dict()) == {"method", "af", "nrmse", "ssim", "cc", "bias", "loa_low", "loa_high"}

    def test_zero_reference(self):
        with pytest.raises(DataError):
            score("inuft", 1, np.ones((4, 4)), np.zeros((4, 4)))
