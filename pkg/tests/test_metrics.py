"""Tests for PSNR/SSIM on images and light fields."""

import numpy as np
import pytest

from lfsynth.errors import ArgumentError
from lfsynth.lightfield import LightField, MetricReport, evaluate_fields, psnr, ssim
from lfsynth.lightfield.metrics import PSNR_CAP_DB


class TestPsnr:
    """Tests for peak signal-to-noise ratio."""

    def test_identical_images_hit_cap(self):
        """Zero error is reported as the cap instead of infinity."""
        image = np.random.default_rng(0).uniform(size=(8, 8, 1))

        assert psnr(image, image) == PSNR_CAP_DB

    def test_known_error(self):
        """A uniform error of 0.1 gives 20 dB."""
        a = np.full((4, 4), 0.5)

        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_center_view_excluded(self, random_field):
        """Changing only the center view leaves field PSNR at the cap."""
        data = random_field.views.numpy()
        data[1, 1] = 1.0 - data[1, 1]
        altered = LightField.from_array(data)

        assert psnr(altered, random_field) == PSNR_CAP_DB

    def test_field_psnr_is_mean_over_views(self, random_field):
        """Field PSNR averages per-view PSNR of the non-center views."""
        data = random_field.views.numpy()
        data[0, 0] = np.clip(data[0, 0] + 0.05, 0.0, 1.0)
        altered = LightField.from_array(data)

        single = psnr(altered.views.data[0, 0], random_field.views.data[0, 0])
        expected = (single + 7 * PSNR_CAP_DB) / 8
        assert psnr(altered, random_field) == pytest.approx(expected)

    def test_shape_mismatch(self):
        """Images of different shapes are rejected."""
        with pytest.raises(ArgumentError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_field_against_image(self, random_field):
        """A field cannot be compared with a single image."""
        with pytest.raises(ArgumentError):
            psnr(random_field, np.zeros((16, 16, 1)))


class TestSsim:
    """Tests for structural similarity."""

    def test_identical_fields(self, random_field):
        """Identical fields have SSIM 1."""
        assert ssim(random_field, random_field) == pytest.approx(1.0)

    def test_noise_lowers_ssim(self, random_field, rng):
        """Additive noise reduces SSIM below 1."""
        noisy = np.clip(random_field.views.data + rng.normal(0, 0.2, random_field.shape), 0, 1)

        assert ssim(LightField.from_array(noisy), random_field) < 0.95

    def test_small_images_rejected(self):
        """Images below the Gaussian window extent are rejected."""
        with pytest.raises(ArgumentError, match="SSIM"):
            ssim(np.zeros((8, 8, 1)), np.zeros((8, 8, 1)))


class TestEvaluateFields:
    """Tests for the combined report."""

    def test_report_fields(self, random_field):
        """evaluate_fields returns PSNR and SSIM together."""
        report = evaluate_fields(random_field, random_field)

        assert isinstance(report, MetricReport)
        assert report.psnr_db == PSNR_CAP_DB
        assert report.ssim == pytest.approx(1.0)
        assert set(report.model_dump()) == {"psnr_db", "ssim"}
