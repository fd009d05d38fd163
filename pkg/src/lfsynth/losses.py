"""Training objective: mean/variance light-field losses, flow smoothness, and SR fidelity.

The light-field losses compare per-pixel angular statistics (mean and unbiased
variance over views) instead of pixels, so they are zero for any prediction
whose views are a permutation of the truth's.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Literal

from pydantic import BaseModel, Field

from lfsynth.diffcore import Tensor, ops
from lfsynth.errors import DegenerateInputError, ShapeError
from lfsynth.lfops import AppearanceFlowField
from lfsynth.lightfield.field import LightField

logger = logging.getLogger(__name__)

TvTarget = Literal["flow", "intensity"]


class LossWeights(BaseModel):
    """Per-term weights of the total objective."""

    lambda_g: float = Field(default=10.0, ge=0.0, allow_inf_nan=False)
    lambda_l: float = Field(default=1.0, ge=0.0, allow_inf_nan=False)
    lambda_tv: float = Field(default=1e-4, ge=0.0, allow_inf_nan=False)
    lambda_sr: float = Field(default=10.0, ge=0.0, allow_inf_nan=False)
    lambda_pixel: float = Field(default=0.0, ge=0.0, allow_inf_nan=False)


@dataclass(frozen=True)
class LossReport:
    """Raw loss terms of one evaluation and their weighted total."""

    global_loss: float
    local_loss: float
    tv: float
    sr: float
    pixel: float
    total: float
    total_tensor: Tensor

    def terms(self) -> dict[str, float]:
        return {
            "global": self.global_loss,
            "local": self.local_loss,
            "tv": self.tv,
            "sr": self.sr,
            "pixel": self.pixel,
            "total": self.total,
        }

    def to_log_record(self, iteration: int, stage: int) -> dict[str, Any]:
        """One JSON-lines training log entry."""
        return {"iter": iteration, "stage": stage, **self.terms()}


def _check_pair(name: str, pred: LightField, truth: LightField) -> None:
    if pred.shape != truth.shape:
        raise ShapeError(f"{name}: prediction {pred.shape} and truth {truth.shape} differ")


def _statistics_discrepancy(pred: Tensor, truth: Tensor, axes: tuple[int, ...]) -> Tensor:
    """mean |M(pred) - M(truth)| + mean |V(pred) - V(truth)| over the view axes."""
    mean_p, var_p = ops.reduce_mean_var(pred, axes)
    mean_t, var_t = ops.reduce_mean_var(truth, axes)
    return ops.add(
        ops.mean(ops.absolute(ops.sub(mean_p, mean_t))),
        ops.mean(ops.absolute(ops.sub(var_p, var_t))),
    )


def global_lf_loss(pred: LightField, truth: LightField) -> Tensor:
    """L1 discrepancy of per-pixel view mean and view variance over all U² views."""
    _check_pair("global_lf_loss", pred, truth)
    if pred.angular * pred.angular < 2:
        raise DegenerateInputError("global_lf_loss needs at least 2 views")
    return _statistics_discrepancy(pred.views, truth.views, (0, 1))


def local_lf_loss(pred: LightField, truth: LightField) -> Tensor:
    """Sum over every angular row and column of that group's mean/variance discrepancy."""
    _check_pair("local_lf_loss", pred, truth)
    angular = pred.angular
    if angular < 2:
        raise DegenerateInputError(f"local_lf_loss needs U >= 2, got U={angular}")
    groups = []
    for m in range(angular):
        groups.append(_statistics_discrepancy(pred.views[m], truth.views[m], (0,)))
    for n in range(angular):
        groups.append(_statistics_discrepancy(pred.views[:, n], truth.views[:, n], (0,)))
    return ops.reduce_sum(ops.stack(groups))


def total_variation(values: Tensor) -> Tensor:
    """Mean squared forward difference along H and W of [U, U, H, W, K], halved.

    A direction with fewer than two samples contributes zero.
    """
    if values.ndim != 5:
        raise ShapeError(f"total_variation expects [U,U,H,W,K], got {values.shape}")
    terms = []
    if values.shape[3] >= 2:
        dx = ops.sub(values[:, :, :, 1:], values[:, :, :, :-1])
        terms.append(ops.mean(ops.square(dx)))
    if values.shape[2] >= 2:
        dy = ops.sub(values[:, :, 1:], values[:, :, :-1])
        terms.append(ops.mean(ops.square(dy)))
    if not terms:
        return ops.tensor(0.0)
    return ops.scale(ops.reduce_sum(ops.stack(terms)), 0.5)


def tv_regularizer(flow: AppearanceFlowField) -> Tensor:
    """Smoothness of the appearance flow over both spatial directions and both components."""
    return total_variation(flow.flows)


def sr_loss(pred_hr: LightField, truth_hr: LightField) -> Tensor:
    """Mean absolute error of the high-resolution field."""
    _check_pair("sr_loss", pred_hr, truth_hr)
    return ops.mean(ops.absolute(ops.sub(pred_hr.views, truth_hr.views)))


def pixel_l1_loss(pred: LightField, truth: LightField) -> Tensor:
    """Pixel-wise L1 on the low-resolution field (ablation comparison only)."""
    _check_pair("pixel_l1_loss", pred, truth)
    return ops.mean(ops.absolute(ops.sub(pred.views, truth.views)))


def total_objective(
    pred_lr: LightField,
    truth_lr: LightField,
    pred_hr: LightField | None,
    truth_hr: LightField | None,
    flow: AppearanceFlowField,
    weights: LossWeights | None = None,
    tv_target: TvTarget = "flow",
) -> LossReport:
    """Weighted sum of the global, local, tv, sr (and optional pixel) terms.

    The sr term is zero when no high-resolution pair is given.
    """
    weights = weights or LossWeights()
    g = global_lf_loss(pred_lr, truth_lr)
    local = local_lf_loss(pred_lr, truth_lr)
    tv = tv_regularizer(flow) if tv_target == "flow" else total_variation(pred_lr.views)
    sr = sr_loss(pred_hr, truth_hr) if pred_hr is not None and truth_hr is not None else None
    pixel = pixel_l1_loss(pred_lr, truth_lr) if weights.lambda_pixel > 0 else None

    weighted = [
        ops.scale(g, weights.lambda_g),
        ops.scale(local, weights.lambda_l),
        ops.scale(tv, weights.lambda_tv),
    ]
    if sr is not None:
        weighted.append(ops.scale(sr, weights.lambda_sr))
    if pixel is not None:
        weighted.append(ops.scale(pixel, weights.lambda_pixel))
    total = ops.reduce_sum(ops.stack(weighted))

    return LossReport(
        global_loss=g.item(),
        local_loss=local.item(),
        tv=tv.item(),
        sr=sr.item() if sr is not None else 0.0,
        pixel=pixel.item() if pixel is not None else 0.0,
        total=total.item(),
        total_tensor=total,
    )
