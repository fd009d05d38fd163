"""Image-quality metrics for images and light fields.

For light fields the center view is excluded: it is the network input, not a
synthesized view.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from pydantic import BaseModel
from skimage.metrics import structural_similarity

from lfsynth.errors import ArgumentError
from lfsynth.lightfield.field import LightField

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
MSE_FLOOR = 1e-10
SSIM_MIN_EXTENT = 11


class MetricReport(BaseModel):
    """Quality of a prediction against ground truth."""

    psnr_db: float
    ssim: float


def _as_images(a: np.ndarray | LightField, b: np.ndarray | LightField) -> list[tuple]:
    """Pairs of [H, W, C] images to score; non-center views for fields."""
    if isinstance(a, LightField) != isinstance(b, LightField):
        raise ArgumentError("cannot compare a light field with a single image")
    if isinstance(a, LightField):
        if a.shape != b.shape:
            raise ArgumentError(f"light field shapes differ: {a.shape} vs {b.shape}")
        center = a.center_index
        da, db = a.views.data, b.views.data
        pairs = [
            (da[v, u], db[v, u])
            for v in range(a.angular)
            for u in range(a.angular)
            if (v, u) != center
        ]
        if not pairs:
            raise ArgumentError("a 1x1 light field has no non-center views to evaluate")
        return pairs
    ia, ib = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if ia.shape != ib.shape:
        raise ArgumentError(f"image shapes differ: {ia.shape} vs {ib.shape}")
    if ia.ndim == 2:
        ia, ib = ia[..., None], ib[..., None]
    return [(ia, ib)]


def _psnr_image(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def _ssim_image(a: np.ndarray, b: np.ndarray) -> float:
    if min(a.shape[:2]) < SSIM_MIN_EXTENT:
        raise ArgumentError(
            f"SSIM needs images of at least {SSIM_MIN_EXTENT}x{SSIM_MIN_EXTENT}, got {a.shape[:2]}"
        )
    return float(
        structural_similarity(
            a,
            b,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            channel_axis=-1,
        )
    )


def psnr(a: np.ndarray | LightField, b: np.ndarray | LightField) -> float:
    """PSNR in dB for peak 1.0, capped at 100 dB; mean over non-center views for fields."""
    return float(np.mean([_psnr_image(x, y) for x, y in _as_images(a, b)]))


def ssim(a: np.ndarray | LightField, b: np.ndarray | LightField) -> float:
    """Single-scale Gaussian SSIM (k1=0.01, k2=0.03, sigma 1.5) averaged over channels/views."""
    return float(np.mean([_ssim_image(x, y) for x, y in _as_images(a, b)]))


def evaluate_fields(pred: LightField, truth: LightField) -> MetricReport:
    report = MetricReport(psnr_db=psnr(pred, truth), ssim=ssim(pred, truth))
    logger.debug(f"evaluate_fields: {report.model_dump()}")
    return report
