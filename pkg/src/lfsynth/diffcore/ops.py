"""Differentiable operators.

Exactly the operator set the synthesis network, the geometric light-field
operators, and the losses need. Broadcasting is limited to a scalar operand in
the elementwise arithmetic.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from typing import Any

import numpy as np

from lfsynth.diffcore.tensor import DTYPE, Tensor, emit
from lfsynth.errors import ArgumentError, DegenerateInputError, ShapeError

logger = logging.getLogger(__name__)

Axis = int | tuple[int, ...] | None


def tensor(data: Any, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Create a leaf tensor (values are copied)."""
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x: Tensor | float) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1 and t.ndim == 0


def _check_elementwise(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{name}: operand shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, target: Tensor) -> np.ndarray:
    if _is_scalar(target) and g.shape != ():
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("add", a, b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return emit("add", (a, b), a.data + b.data, backward)


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("sub", a, b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return emit("sub", (a, b), a.data - b.data, backward)


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("mul", a, b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return emit("mul", (a, b), a.data * b.data, backward)


def neg(a: Tensor) -> Tensor:
    return emit("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python constant."""
    factor = float(factor)
    return emit("scale", (a,), a.data * factor, lambda g: (g * factor,))


def absolute(a: Tensor) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is 0."""
    sign = np.sign(a.data)
    return emit("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    return emit("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; gradient passes only where the value was inside."""
    inside = (a.data >= low) & (a.data <= high)
    return emit("clip", (a,), np.clip(a.data, low, high), lambda g: (g * inside,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """x if x >= 0 else slope * x; the kink takes the positive branch."""
    if not slope > 0:
        raise ArgumentError(f"leaky_relu slope must be positive, got {slope}")
    positive = a.data >= 0
    factor = np.where(positive, 1.0, slope)
    return emit("leaky_relu", (a,), a.data * factor, lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _normalize_axes(axis: Axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ArgumentError(f"axis {ax} out of range for a {ndim}-d tensor")
        normalized.append(ax % ndim)
    return tuple(sorted(set(normalized)))


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...]) -> np.ndarray:
    kept = [1 if i in axes else n for i, n in enumerate(shape)]
    return np.broadcast_to(np.reshape(g, kept), shape)


def reduce_sum(a: Tensor, axis: Axis = None) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.array(_expand_reduced(g, a.shape, axes)),)

    return emit("sum", (a,), a.data.sum(axis=axes), backward)


def mean(a: Tensor, axis: Axis = None) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    if count == 0:
        raise DegenerateInputError(f"mean over empty axes {axes} of shape {a.shape}")

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.array(_expand_reduced(g, a.shape, axes)) / count,)

    return emit("mean", (a,), _anchored_mean(a.data, axes), backward)


def _anchored_mean(x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Mean computed relative to the first slice, exact when all slices agree."""
    anchor = x[tuple(slice(0, 1) if i in axes else slice(None) for i in range(x.ndim))]
    return (anchor + (x - anchor).mean(axis=axes, keepdims=True)).reshape(
        [n for i, n in enumerate(x.shape) if i not in axes]
    )


def reduce_mean_var(a: Tensor, axis: Axis = 0) -> tuple[Tensor, Tensor]:
    """Per-element mean and unbiased (N-1) variance over ``axis``.

    Raises:
        DegenerateInputError: If fewer than two elements are reduced.
    """
    axes = _normalize_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    if count < 2:
        raise DegenerateInputError(
            f"variance needs at least 2 samples along axes {axes}, got {count}"
        )
    m = mean(a, axes)
    centered = a.data - _expand_reduced(m.data, a.shape, axes)
    var = (centered * centered).sum(axis=axes) / (count - 1)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (_expand_reduced(g, a.shape, axes) * centered * (2.0 / (count - 1)),)

    return m, emit("variance", (a,), var, backward)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(n) for n in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from e
    return emit("reshape", (a,), out, lambda g: (np.reshape(g, a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    if sorted(perm) != list(range(a.ndim)):
        raise ArgumentError(f"transpose: {perm} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(perm))
    return emit("transpose", (a,), a.data.transpose(perm), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index: Any) -> Tensor:
    """Basic slicing/integer indexing."""
    out = a.data[index]

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(a.shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return emit("getitem", (a,), out, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ArgumentError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return emit("stack", tensors, out, backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ArgumentError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(
                f"concat along axis {ax}: shapes {[u.shape for u in tensors]} disagree"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=ax)

    return emit("concat", tensors, out, backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack channels of two [H, W, C] tensors, ``a`` first."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"concat_channels expects [H,W,C] tensors, got {a.shape} and {b.shape}")
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"concat_channels: spatial extents {a.shape[:2]} and {b.shape[:2]} differ")
    return concat((a, b), axis=2)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def _same_padding(n: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def _columns(x: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Patches of the zero-padded input as [Ho, Wo, kh, kw, Cin]."""
    h, w, _ = x.shape
    ho, top, bottom = _same_padding(h, kh, stride)
    wo, left, right = _same_padding(w, kw, stride)
    xp = np.pad(x, ((top, bottom), (left, right), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    windows = windows[: (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return windows.transpose(0, 1, 3, 4, 2), ho, wo


def _conv_forward(x: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    kh, kw, cin, cout = kernel.shape
    cols, ho, wo = _columns(x, kh, kw, stride)
    out = cols.reshape(ho * wo, kh * kw * cin) @ kernel.reshape(kh * kw * cin, cout)
    return out.reshape(ho, wo, cout)


def _conv_input_adjoint(
    g: np.ndarray, kernel: np.ndarray, stride: int, in_hw: tuple[int, int]
) -> np.ndarray:
    """Adjoint of the linear map x -> _conv_forward(x, kernel, stride)."""
    h, w = in_hw
    kh, kw, cin, cout = kernel.shape
    ho, top, bottom = _same_padding(h, kh, stride)
    wo, left, right = _same_padding(w, kw, stride)
    if g.shape[:2] != (ho, wo):
        raise ShapeError(f"conv adjoint: gradient extent {g.shape[:2]} != expected {(ho, wo)}")
    dcols = g.reshape(ho * wo, cout) @ kernel.reshape(kh * kw * cin, cout).T
    dcols = dcols.reshape(ho, wo, kh, kw, cin)
    dxp = np.zeros((h + top + bottom, w + left + right, cin), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                dcols[:, :, i, j]
            )
    return dxp[top : top + h, left : left + w]


def _conv_kernel_grad(
    x: np.ndarray, g: np.ndarray, kernel_shape: tuple[int, ...], stride: int
) -> np.ndarray:
    kh, kw, cin, cout = kernel_shape
    cols, ho, wo = _columns(x, kh, kw, stride)
    dk = cols.reshape(ho * wo, kh * kw * cin).T @ g.reshape(ho * wo, cout)
    return dk.reshape(kernel_shape)


def _check_conv_args(name: str, x: Tensor, kernel: Tensor, bias: Tensor, stride: int) -> None:
    if not isinstance(stride, int) or stride < 1:
        raise ArgumentError(f"{name}: stride must be a positive integer, got {stride}")
    if x.ndim != 3:
        raise ShapeError(f"{name}: input must be [H,W,C], got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"{name}: kernel must be [kh,kw,Cin,Cout], got {kernel.shape}")
    kh, kw = kernel.shape[:2]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ArgumentError(f"{name}: kernel extents must be odd, got {(kh, kw)}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Same-padded (zero) cross-correlation; output extent is ceil(H/stride).

    Args:
        x: Input [H, W, Cin].
        kernel: Weights [kh, kw, Cin, Cout], odd extents.
        bias: [Cout].
        stride: Positive integer step.
    """
    _check_conv_args("conv2d", x, kernel, bias, stride)
    if kernel.shape[2] != x.shape[2]:
        raise ShapeError(
            f"conv2d: input has {x.shape[2]} channels, kernel expects {kernel.shape[2]}"
        )
    if bias.shape != (kernel.shape[3],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({kernel.shape[3]},)")
    hw = x.shape[:2]
    out = _conv_forward(x.data, kernel.data, stride) + bias.data

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (
            _conv_input_adjoint(g, kernel.data, stride, hw) if x.requires_grad else None,
            _conv_kernel_grad(x.data, g, kernel.shape, stride) if kernel.requires_grad else None,
            g.sum(axis=(0, 1)) if bias.requires_grad else None,
        )

    return emit("conv2d", (x, kernel, bias), out, backward)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """Transpose convolution: the exact adjoint of ``conv2d`` at the same stride, plus bias.

    Args:
        x: Input [H, W, Cin].
        kernel: Weights [kh, kw, Cout, Cin] (the layout of the conv2d it transposes).
        bias: [Cout].
        stride: Upsampling factor; output is [stride*H, stride*W, Cout].
    """
    _check_conv_args("conv2d_transpose", x, kernel, bias, stride)
    if kernel.shape[3] != x.shape[2]:
        raise ShapeError(
            f"conv2d_transpose: input has {x.shape[2]} channels, kernel expects {kernel.shape[3]}"
        )
    if bias.shape != (kernel.shape[2],):
        raise ShapeError(f"conv2d_transpose: bias shape {bias.shape} != ({kernel.shape[2]},)")
    out_hw = (x.shape[0] * stride, x.shape[1] * stride)
    out = _conv_input_adjoint(x.data, kernel.data, stride, out_hw) + bias.data

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (
            _conv_forward(g, kernel.data, stride) if x.requires_grad else None,
            _conv_kernel_grad(g, x.data, kernel.shape, stride) if kernel.requires_grad else None,
            g.sum(axis=(0, 1)) if bias.requires_grad else None,
        )

    return emit("conv2d_transpose", (x, kernel, bias), out, backward)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _scatter_add(size: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum ``values[..., c]`` into rows ``index`` of a [size, C] buffer."""
    flat_index = index.reshape(-1)
    flat_values = values.reshape(flat_index.size, -1)
    out = np.empty((size, flat_values.shape[1]), dtype=DTYPE)
    for c in range(flat_values.shape[1]):
        out[:, c] = np.bincount(flat_index, weights=flat_values[:, c], minlength=size)
    return out


def grid_sample(source: Tensor, coords: Tensor) -> Tensor:
    """Bilinear sampling at absolute pixel positions with clamp-to-edge borders.

    Args:
        source: [..., H, W, C]. Without leading axes the image is shared by every
            coordinate grid.
        coords: [..., Hq, Wq, 2] holding (x, y) in pixels; leading axes must match
            the source's when the source has them.

    Returns:
        [..., Hq, Wq, C]. Differentiable w.r.t. source and coords; the coordinate
        gradient is zero where the position was clamped.
    """
    if source.ndim < 3:
        raise ShapeError(f"grid_sample: source must be [...,H,W,C], got {source.shape}")
    if coords.ndim < 3 or coords.shape[-1] != 2:
        raise ShapeError(f"grid_sample: coords must be [...,Hq,Wq,2], got {coords.shape}")
    h, w, c = source.shape[-3:]
    src_batch = source.shape[:-3]
    crd_batch = coords.shape[:-3]
    if src_batch and src_batch != crd_batch:
        raise ShapeError(
            f"grid_sample: source batch {src_batch} does not match coords batch {crd_batch}"
        )
    hq, wq = coords.shape[-3:-1]
    nb = math.prod(crd_batch)
    flat_src = source.data.reshape(-1, c)

    xr = coords.data[..., 0].reshape(nb, hq, wq)
    yr = coords.data[..., 1].reshape(nb, hq, wq)
    xc = np.clip(xr, 0.0, w - 1)
    yc = np.clip(yr, 0.0, h - 1)
    x0 = np.clip(np.floor(xc), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(yc), 0, max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xc - x0)[..., None]
    wy = (yc - y0)[..., None]

    base = 0 if not src_batch else (np.arange(nb) * (h * w)).reshape(nb, 1, 1)
    i00 = base + y0 * w + x0
    i01 = base + y0 * w + x1
    i10 = base + y1 * w + x0
    i11 = base + y1 * w + x1
    v00, v01, v10, v11 = flat_src[i00], flat_src[i01], flat_src[i10], flat_src[i11]

    top = (1.0 - wx) * v00 + wx * v01
    bottom = (1.0 - wx) * v10 + wx * v11
    out = (1.0 - wy) * top + wy * bottom
    out_shape = (*crd_batch, hq, wq, c)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        g = g.reshape(nb, hq, wq, c)
        d_source = None
        if source.requires_grad:
            size = flat_src.shape[0]
            d_flat = (
                _scatter_add(size, i00, g * ((1.0 - wy) * (1.0 - wx)))
                + _scatter_add(size, i01, g * ((1.0 - wy) * wx))
                + _scatter_add(size, i10, g * (wy * (1.0 - wx)))
                + _scatter_add(size, i11, g * (wy * wx))
            )
            d_source = d_flat.reshape(source.shape)
        d_coords = None
        if coords.requires_grad:
            dx = ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10)) * g
            dy = ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01)) * g
            inside_x = (xr >= 0.0) & (xr <= w - 1)
            inside_y = (yr >= 0.0) & (yr <= h - 1)
            d_coords = np.stack(
                [dx.sum(axis=-1) * inside_x, dy.sum(axis=-1) * inside_y], axis=-1
            ).reshape(coords.shape)
        return d_source, d_coords

    return emit("grid_sample", (source, coords), out.reshape(out_shape), backward)


def _interp_matrix(n: int, m: int) -> np.ndarray:
    """Align-corners linear interpolation weights mapping n samples to m samples."""
    weights = np.zeros((m, n), dtype=DTYPE)
    if n == 1 or m == 1:
        weights[:, 0] = 1.0
        return weights
    for i in range(m):
        pos = i * (n - 1) / (m - 1)
        i0 = min(int(math.floor(pos)), n - 2)
        frac = pos - i0
        weights[i, i0] += 1.0 - frac
        weights[i, i0 + 1] += frac
    return weights


def bilinear_resize(a: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of [..., H, W, C] by an integer factor (align-corners).

    A factor of 1 returns the input tensor itself.
    """
    if not isinstance(factor, int) or factor < 1:
        raise ArgumentError(f"bilinear_resize: factor must be an integer >= 1, got {factor}")
    if a.ndim < 3:
        raise ShapeError(f"bilinear_resize: input must be [...,H,W,C], got {a.shape}")
    if factor == 1:
        return a
    h, w = a.shape[-3:-1]
    rows = _interp_matrix(h, h * factor)
    cols = _interp_matrix(w, w * factor)
    moved = np.moveaxis(a.data, -1, -3)
    out = np.moveaxis(rows @ moved @ cols.T, -3, -1)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        gm = np.moveaxis(g, -1, -3)
        return (np.moveaxis(rows.T @ gm @ cols, -3, -1),)

    return emit("bilinear_resize", (a,), out, backward)
