"""Geometric light-field operators: view shifting, flow layout, and flow warping.

Conventions:
    A view at angular offset du = (dv, dh) of a scene with disparity d shows
    ``center(x - d * du)``; dh moves x (columns) and dv moves y (rows).
    ``shift_views`` samples the center image at ``x - eta * du`` and ``warp``
    samples each view at ``x + flow(x)``, so the flow that completes the shift
    for disparity d is ``(eta - d) * du``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, Field
from skimage.color import hsv2rgb

from lfsynth.diffcore import Tensor, bilinear_resize, grid_sample, ops
from lfsynth.errors import ArgumentError, ShapeError
from lfsynth.lightfield.field import LightField, identity_coords, offset_grid
from lfsynth.lightfield.io import quantize

logger = logging.getLogger(__name__)


class ShiftScale(BaseModel):
    """Pixels of shift per unit angular distance."""

    eta: float = Field(default=0.8, allow_inf_nan=False)


@dataclass(frozen=True)
class AppearanceFlowField:
    """Per-view sampling offsets ``flows[v, u, h, w] = (dx, dy)`` in pixels."""

    flows: Tensor

    def __post_init__(self) -> None:
        shape = self.flows.shape
        if len(shape) != 5 or shape[0] != shape[1] or shape[4] != 2:
            raise ShapeError(f"AppearanceFlowField must be [U,U,H,W,2], got {shape}")

    @classmethod
    def from_array(cls, data: np.ndarray, requires_grad: bool = False) -> AppearanceFlowField:
        return cls(Tensor(data, requires_grad=requires_grad))

    @classmethod
    def zeros(cls, angular: int, height: int, width: int) -> AppearanceFlowField:
        return cls(Tensor(np.zeros((angular, angular, height, width, 2))))

    @property
    def angular(self) -> int:
        return self.flows.shape[0]

    @property
    def height(self) -> int:
        return self.flows.shape[2]

    @property
    def width(self) -> int:
        return self.flows.shape[3]

    def numpy(self) -> np.ndarray:
        return self.flows.numpy()

    def detach(self) -> AppearanceFlowField:
        return AppearanceFlowField(self.flows.detach())


def _eta_value(eta: ShiftScale | float) -> float:
    value = eta.eta if isinstance(eta, ShiftScale) else float(eta)
    if not math.isfinite(value):
        raise ArgumentError(f"shift scale eta must be finite, got {value}")
    return value


def view_offsets(angular: int) -> np.ndarray:
    """[U, U, 2] array of (dv, dh) from the center view."""
    if angular < 1:
        raise ArgumentError(f"angular extent must be positive, got {angular}")
    return offset_grid(angular)


def identity_grid(height: int, width: int) -> np.ndarray:
    """[H, W, 2] pixel positions (x, y)."""
    return identity_coords(height, width)


def shift_views(
    center: Tensor,
    angular: int,
    eta: ShiftScale | float,
    allow_even: bool = False,
) -> LightField:
    """Replicate the center image across the angular grid, translated by -eta * du.

    Args:
        center: [H, W, C] image.
        angular: U, views per angular axis. Must be odd unless ``allow_even``, in
            which case view (ceil(U/2)-1, ceil(U/2)-1) acts as the center.
        eta: Shift scale in pixels per unit angular distance.

    Returns:
        LightField [U, U, H, W, C]; the center view equals the input exactly.
    """
    if angular < 1 or (angular % 2 == 0 and not allow_even):
        raise ArgumentError(f"shift_views needs an odd angular extent, got U={angular}")
    if center.ndim != 3:
        raise ShapeError(f"shift_views: center must be [H,W,C], got {center.shape}")
    scale = _eta_value(eta)
    h, w, c = center.shape
    xy_offsets = view_offsets(angular)[..., ::-1].reshape(angular * angular, 1, 1, 2)
    coords = identity_grid(h, w)[None] - scale * xy_offsets
    sampled = grid_sample(center, Tensor(coords))
    return LightField(ops.reshape(sampled, (angular, angular, h, w, c)))


def decode_flow(raw: Tensor, angular: int) -> AppearanceFlowField:
    """Unpack network flow channels [H, W, 2U²]; view s = v + u*U owns channels (2s, 2s+1)."""
    expected = 2 * angular * angular
    if raw.ndim != 3 or raw.shape[2] != expected:
        raise ShapeError(
            f"decode_flow: expected [H,W,{expected}] for U={angular}, got {raw.shape}"
        )
    h, w = raw.shape[:2]
    grid = ops.reshape(raw, (h, w, angular, angular, 2))
    return AppearanceFlowField(ops.transpose(grid, (3, 2, 0, 1, 4)))


def encode_flow(flow: AppearanceFlowField) -> Tensor:
    """Pack a flow field into [H, W, 2U²] network channels (inverse of ``decode_flow``)."""
    moved = ops.transpose(flow.flows, (2, 3, 1, 0, 4))
    return ops.reshape(moved, (flow.height, flow.width, 2 * flow.angular * flow.angular))


def warp(shifted: LightField, flow: AppearanceFlowField) -> LightField:
    """Bilinearly resample each view at x + flow(x) (clamp-to-edge)."""
    if flow.flows.shape[:4] != shifted.views.shape[:4]:
        raise ShapeError(
            f"warp: flow {flow.flows.shape} does not match light field {shifted.views.shape}"
        )
    u, h, w, c = shifted.angular, shifted.height, shifted.width, shifted.channels
    n = u * u
    base = Tensor(np.broadcast_to(identity_grid(h, w), (u, u, h, w, 2)))
    coords = ops.reshape(ops.add(base, flow.flows), (n, h, w, 2))
    source = ops.reshape(shifted.views, (n, h, w, c))
    return LightField(ops.reshape(grid_sample(source, coords), (u, u, h, w, c)))


def upsample_flow(flow: AppearanceFlowField, factor: int) -> AppearanceFlowField:
    """Resize each flow component bilinearly and scale magnitudes to the new pixel grid."""
    if not isinstance(factor, int) or factor < 1:
        raise ArgumentError(f"upsample_flow: factor must be an integer >= 1, got {factor}")
    if factor == 1:
        return flow
    return AppearanceFlowField(ops.scale(bilinear_resize(flow.flows, factor), factor))


def flow_to_color(flow_view: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Colour-wheel rendering of one view's flow [H, W, 2] as uint8 RGB.

    Hue encodes direction and saturation encodes magnitude relative to
    ``max_magnitude`` (default: the largest magnitude present); zero flow is white.
    """
    arr = np.asarray(flow_view, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ShapeError(f"flow_to_color expects [H,W,2], got {arr.shape}")
    dx, dy = arr[..., 0], arr[..., 1]
    magnitude = np.hypot(dx, dy)
    peak = float(magnitude.max()) if max_magnitude is None else float(max_magnitude)
    saturation = np.clip(magnitude / peak, 0.0, 1.0) if peak > 0 else np.zeros_like(magnitude)
    hue = np.mod(np.arctan2(dy, dx) / (2.0 * np.pi), 1.0)
    hsv = np.stack([hue, saturation, np.ones_like(hue)], axis=-1)
    return quantize(hsv2rgb(hsv))
