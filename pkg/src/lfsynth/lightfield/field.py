"""The 4D light field, angular offsets, EPIs, refocusing, and the network channel layout."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from lfsynth.diffcore import Tensor, grid_sample, ops
from lfsynth.errors import ArgumentError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ViewOffset:
    """Signed angular distance (dv, dh) of a view from the center view."""

    dv: int
    dh: int

    def as_xy(self) -> tuple[float, float]:
        """Offset in image axis order: horizontal drives x, vertical drives y."""
        return float(self.dh), float(self.dv)


def center_index(angular: int) -> int:
    """Index of the center view along one angular axis: ceil(U/2) - 1."""
    return (angular + 1) // 2 - 1


def offset_grid(angular: int) -> np.ndarray:
    """[U, U, 2] array of (dv, dh) per view (v, u)."""
    c = center_index(angular)
    idx = np.arange(angular) - c
    dv, dh = np.meshgrid(idx, idx, indexing="ij")
    return np.stack([dv, dh], axis=-1).astype(np.float64)


@dataclass(frozen=True)
class LightField:
    """Square grid of sub-aperture images, stored as ``views[v, u, h, w, c]``.

    Fields built from files are range-checked to [0, 1]; fields produced inside
    the pipeline are not until clamped.
    """

    views: Tensor

    def __post_init__(self) -> None:
        shape = self.views.shape
        if len(shape) != 5:
            raise ShapeError(f"LightField views must be [U,U,H,W,C], got {shape}")
        if shape[0] != shape[1]:
            raise ShapeError(
                f"LightField angular grid must be square, got U_v={shape[0]}, U_h={shape[1]}"
            )
        if min(shape[:4]) < 1:
            raise ShapeError(f"LightField extents must be positive, got {shape}")

    @classmethod
    def from_array(
        cls,
        data: np.ndarray,
        check_range: bool = True,
        requires_grad: bool = False,
    ) -> LightField:
        """Build a field from a [U,U,H,W,C] array (or [U,U,H,W] for one channel)."""
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 4:
            arr = arr[..., None]
        if check_range and arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ArgumentError(
                f"LightField samples must lie in [0,1], got range [{arr.min()}, {arr.max()}]"
            )
        return cls(Tensor(arr, requires_grad=requires_grad))

    @property
    def angular(self) -> int:
        return self.views.shape[0]

    @property
    def height(self) -> int:
        return self.views.shape[2]

    @property
    def width(self) -> int:
        return self.views.shape[3]

    @property
    def channels(self) -> int:
        return self.views.shape[4]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.views.shape

    @property
    def center_index(self) -> tuple[int, int]:
        c = center_index(self.angular)
        return c, c

    def view(self, v: int, u: int) -> Tensor:
        """Differentiable [H, W, C] view at angular position (v, u)."""
        self._check_view_index(v, u)
        return self.views[v, u]

    def center_view(self) -> Tensor:
        return self.view(*self.center_index)

    def view_offsets(self) -> np.ndarray:
        """[U, U, 2] array of (dv, dh)."""
        return offset_grid(self.angular)

    def offset(self, v: int, u: int) -> ViewOffset:
        self._check_view_index(v, u)
        c, _ = self.center_index
        return ViewOffset(dv=v - c, dh=u - c)

    def numpy(self) -> np.ndarray:
        return self.views.numpy()

    def detach(self) -> LightField:
        return LightField(self.views.detach())

    def clamp(self) -> LightField:
        """Clamp samples to [0, 1] (inference only)."""
        return LightField(ops.clip(self.views, 0.0, 1.0))

    def _check_view_index(self, v: int, u: int) -> None:
        if not (0 <= v < self.angular and 0 <= u < self.angular):
            raise ArgumentError(
                f"view index ({v}, {u}) outside a {self.angular}x{self.angular} grid"
            )


def epi(lf: LightField, fixed_row: int, fixed_v: int) -> np.ndarray:
    """Horizontal epipolar-plane image [U, W, C]: row ``fixed_row`` across views (fixed_v, u)."""
    if not 0 <= fixed_row < lf.height:
        raise ArgumentError(f"fixed_row {fixed_row} outside [0, {lf.height})")
    if not 0 <= fixed_v < lf.angular:
        raise ArgumentError(f"fixed_v {fixed_v} outside [0, {lf.angular})")
    return lf.views.data[fixed_v, :, fixed_row].copy()


def vertical_epi(lf: LightField, fixed_col: int, fixed_u: int) -> np.ndarray:
    """Vertical epipolar-plane image [U, H, C]: column ``fixed_col`` across views (v, fixed_u)."""
    if not 0 <= fixed_col < lf.width:
        raise ArgumentError(f"fixed_col {fixed_col} outside [0, {lf.width})")
    if not 0 <= fixed_u < lf.angular:
        raise ArgumentError(f"fixed_u {fixed_u} outside [0, {lf.angular})")
    return lf.views.data[:, fixed_u, :, fixed_col].copy()


def identity_coords(height: int, width: int) -> np.ndarray:
    """[H, W, 2] grid holding each pixel's own (x, y)."""
    ys, xs = np.meshgrid(
        np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij"
    )
    return np.stack([xs, ys], axis=-1)


def refocus(lf: LightField, slope: float) -> np.ndarray:
    """Shift-and-average refocusing.

    View s is sampled at x + slope * du_s (bilinear, clamp-to-edge) and the
    results are averaged, so objects with disparity ``slope`` come into focus.
    Slope 0 gives the per-pixel angular mean.
    """
    if not np.isfinite(slope):
        raise ArgumentError(f"refocus slope must be finite, got {slope}")
    n = lf.angular * lf.angular
    offsets = lf.view_offsets().reshape(n, 1, 1, 2)[..., ::-1]
    coords = identity_coords(lf.height, lf.width)[None] + float(slope) * offsets
    flat = lf.views.detach().reshape(n, lf.height, lf.width, lf.channels)
    sampled = grid_sample(flat, Tensor(coords))
    return sampled.data.mean(axis=0)


def stack_views(lf: LightField) -> Tensor:
    """Views as network channels [H, W, U*U*C], column-major: channel ((u*U + v)*C + c)."""
    u_count = lf.angular
    moved = ops.transpose(lf.views, (2, 3, 1, 0, 4))
    return ops.reshape(moved, (lf.height, lf.width, u_count * u_count * lf.channels))


def unstack_views(stacked: Tensor, angular: int, channels: int) -> LightField:
    """Inverse of ``stack_views``."""
    if stacked.ndim != 3 or stacked.shape[2] != angular * angular * channels:
        raise ShapeError(
            f"unstack_views: expected [H,W,{angular * angular * channels}], got {stacked.shape}"
        )
    h, w = stacked.shape[:2]
    grid = ops.reshape(stacked, (h, w, angular, angular, channels))
    return LightField(ops.transpose(grid, (3, 2, 0, 1, 4)))
