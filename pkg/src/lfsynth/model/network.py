"""Parameters and forward passes of the synthesis network.

The encoder maps the center view to bottleneck features. The angular decoder
turns them into an appearance flow that warps the shifted views into the
low-resolution field. The spatial decoder predicts residuals that are added to
the bilinearly upsampled field.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass

import numpy as np

from lfsynth.diffcore import (
    Tensor,
    bilinear_resize,
    concat_channels,
    conv2d,
    conv2d_transpose,
    leaky_relu,
    ops,
)
from lfsynth.errors import ArgumentError, ShapeError
from lfsynth.lfops import (
    AppearanceFlowField,
    decode_flow,
    encode_flow,
    shift_views,
    upsample_flow,
    warp,
)
from lfsynth.lightfield.field import LightField, stack_views, unstack_views
from lfsynth.model.config import LEAKY_SLOPE, LayerSpec, NetConfig, layer_plan

logger = logging.getLogger(__name__)

PARAM_GROUPS = ("encoder", "bottleneck", "angular", "spatial")


class ModelParams:
    """Named kernels and biases in plan order, with per-group freeze flags.

    Values of non-frozen groups are gradient leaves; frozen ones are constants.
    """

    def __init__(
        self,
        config: NetConfig,
        values: Mapping[str, Tensor],
        frozen: Iterable[str] = (),
    ) -> None:
        self.config = config
        self.frozen = frozenset(frozen)
        unknown = self.frozen - set(PARAM_GROUPS)
        if unknown:
            raise ArgumentError(f"Unknown parameter groups: {sorted(unknown)}")
        self.layers = {layer.name: layer for layer in layer_plan(config)}
        self._groups: dict[str, str] = {}
        for layer in self.layers.values():
            self._groups[f"{layer.name}.kernel"] = layer.group
            self._groups[f"{layer.name}.bias"] = layer.group
        missing = set(self._groups) - set(values)
        if missing:
            raise ShapeError(f"Missing parameters: {sorted(missing)[:5]}")
        self.values: dict[str, Tensor] = {}
        for name in self._groups:
            value = values[name]
            trainable = self._groups[name] not in self.frozen
            if value.requires_grad != trainable or value.op is not None:
                value = value.with_grad(trainable)
                value.name = name
            self.values[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self.values[name]

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def is_frozen(self, name: str) -> bool:
        return self._groups[name] in self.frozen

    def trainable_names(self) -> list[str]:
        return [n for n in self.values if not self.is_frozen(n)]

    def with_frozen(self, groups: Iterable[str]) -> ModelParams:
        return ModelParams(self.config, self.values, frozen=groups)

    def replace_values(self, updates: Mapping[str, np.ndarray | Tensor]) -> ModelParams:
        """New parameters with some values substituted (shapes must match)."""
        values = dict(self.values)
        for name, update in updates.items():
            if name not in values:
                raise ArgumentError(f"Unknown parameter: {name}")
            arr = update.data if isinstance(update, Tensor) else np.asarray(update)
            if arr.shape != values[name].shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {values[name].shape}")
            values[name] = Tensor(arr, name=name)
        return ModelParams(self.config, values, frozen=self.frozen)

    def numpy_state(self) -> dict[str, np.ndarray]:
        return {name: value.numpy() for name, value in self.values.items()}

    def count(self) -> int:
        return sum(value.size for value in self.values.values())


@dataclass(frozen=True)
class AngularOutput:
    flow: AppearanceFlowField
    lf_lr: LightField
    features: Tensor


@dataclass(frozen=True)
class SpatialOutput:
    lf_hr: LightField
    residual_flow: LightField
    residual_intensity: LightField


@dataclass(frozen=True)
class ForwardOutput:
    angular: AngularOutput
    spatial: SpatialOutput

    @property
    def flow(self) -> AppearanceFlowField:
        return self.angular.flow

    @property
    def lf_lr(self) -> LightField:
        return self.angular.lf_lr

    @property
    def lf_hr(self) -> LightField:
        return self.spatial.lf_hr


def build(config: NetConfig, seed: int = 0) -> ModelParams:
    """He-initialized kernels and zero biases, drawn in plan order from ``seed``."""
    config.check()
    rng = np.random.default_rng(seed)
    values: dict[str, Tensor] = {}
    for layer in layer_plan(config):
        fan_in = layer.kernel_shape[0] * layer.kernel_shape[1] * layer.cin
        kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=layer.kernel_shape)
        values[f"{layer.name}.kernel"] = Tensor(kernel, requires_grad=True)
        values[f"{layer.name}.bias"] = Tensor(np.zeros(layer.cout), requires_grad=True)
    params = ModelParams(config, values)
    logger.info(f"Built {config.mode} network: {params.count()} parameters (seed {seed})")
    return params


def _apply(params: ModelParams, name: str, x: Tensor) -> Tensor:
    layer: LayerSpec = params.layers[name]
    kernel, bias = params[f"{name}.kernel"], params[f"{name}.bias"]
    if layer.kind == "conv_t":
        y = conv2d_transpose(x, kernel, bias, stride=2)
    else:
        y = conv2d(x, kernel, bias, stride=layer.stride)
    return leaky_relu(y, LEAKY_SLOPE) if layer.activation else y


def _check_input(params: ModelParams, center: Tensor, strict: bool) -> None:
    config = params.config
    if center.ndim != 3 or center.shape[2] != config.channels:
        raise ShapeError(
            f"center view must be [H,W,{config.channels}], got {center.shape}"
        )
    h, w = center.shape[:2]
    if strict and (h, w) != tuple(config.input_hw):
        raise ShapeError(f"center view extent {(h, w)} != configured input_hw {config.input_hw}")
    step = 2**config.depth
    if h % step or w % step:
        raise ShapeError(f"center view extent {(h, w)} not divisible by 2^depth = {step}")


def encode(params: ModelParams, center: Tensor) -> tuple[list[Tensor], Tensor]:
    """Encoder skips (pre-downsample activations per level) and bottleneck features."""
    skips: list[Tensor] = []
    x = center
    for k in range(1, params.config.depth + 1):
        x = _apply(params, f"encoder.{k}.conv1", x)
        x = _apply(params, f"encoder.{k}.conv2", x)
        skips.append(x)
        x = _apply(params, f"encoder.{k}.down", x)
    x = _apply(params, "bottleneck.conv1", x)
    x = _apply(params, "bottleneck.conv2", x)
    return skips, x


def forward_angular(params: ModelParams, center: Tensor, strict: bool = True) -> AngularOutput:
    """Estimate the appearance flow and warp the shifted center view into every view.

    Args:
        params: Network parameters.
        center: [H, W, C] luminance image.
        strict: Require the configured input extent (otherwise any extent
            divisible by 2^depth is accepted).
    """
    config = params.config
    _check_input(params, center, strict)
    skips, features = encode(params, center)
    y = features
    for k in range(config.depth, 0, -1):
        y = _apply(params, f"angular.{k}.up", y)
        y = concat_channels(y, skips[k - 1])
        y = _apply(params, f"angular.{k}.conv1", y)
        y = _apply(params, f"angular.{k}.conv2", y)
    y = _apply(params, "angular.head.conv1", y)
    y = _apply(params, "angular.head.conv2", y)
    raw = _apply(params, "angular.head.out", y)

    flow = decode_flow(raw, config.angular)
    shifted = shift_views(center, config.angular, config.eta, allow_even=config.mode == "table")
    return AngularOutput(flow=flow, lf_lr=warp(shifted, flow), features=features)


def _fold_residual(params: ModelParams, out: Tensor) -> LightField:
    """Average groups of residual channels down to U²C and unstack into views."""
    config = params.config
    groups = config.residual_width // config.view_channels
    if groups > 1:
        h, w = out.shape[:2]
        out = ops.mean(ops.reshape(out, (h, w, config.view_channels, groups)), axis=3)
    return unstack_views(out, config.angular, config.channels)


def _zeros_like(lf: LightField) -> LightField:
    return LightField(Tensor(np.zeros(lf.shape)))


def forward_spatial(
    params: ModelParams,
    features: Tensor,
    flow: AppearanceFlowField,
    lf_lr: LightField,
) -> SpatialOutput:
    """Predict the two residual fields and add them to the upsampled low-resolution field.

    A flow-prior branch sees the flow at both resolutions; an intensity-prior
    branch sees the field and, as a second stage, the field plus the first
    residual.
    """
    config = params.config
    if flow.flows.shape[:4] != lf_lr.views.shape[:4]:
        raise ShapeError(f"flow {flow.flows.shape} does not match field {lf_lr.shape}")
    trunk = features
    for k in range(config.depth, 1, -1):
        trunk = _apply(params, f"spatial.trunk.{k}.up", trunk)
        if k >= 3:
            trunk = _apply(params, f"spatial.trunk.{k}.conv1", trunk)
            trunk = _apply(params, f"spatial.trunk.{k}.conv2", trunk)

    upsampled = bilinear_resize(lf_lr.views, config.sr_factor)
    flow_lr = encode_flow(flow)
    flow_hr = encode_flow(upsample_flow(flow, config.sr_factor))
    intensity_lr = stack_views(lf_lr)

    residuals: list[tuple[str, LightField]] = []
    for i, prior in enumerate(config.residual_order.branches, start=1):
        name = f"spatial.branch{i}"
        if prior == "flow":
            prior_lr, prior_hr = flow_lr, flow_hr
        else:
            base = upsampled
            if residuals:
                base = ops.add(base, residuals[0][1].views)
            prior_lr, prior_hr = intensity_lr, stack_views(LightField(base))
        y = _apply(params, f"{name}.up_lr", trunk)
        y = concat_channels(y, prior_lr)
        y = _apply(params, f"{name}.conv1", y)
        y = _apply(params, f"{name}.conv2", y)
        y = _apply(params, f"{name}.up_hr", y)
        y = concat_channels(y, prior_hr)
        y = _apply(params, f"{name}.conv3", y)
        residuals.append((prior, _fold_residual(params, _apply(params, f"{name}.out", y))))

    lf_hr = upsampled
    for _, residual in residuals:
        lf_hr = ops.add(lf_hr, residual.views)
    template = LightField(upsampled)

    def total(kind: str) -> LightField:
        picked = [r.views for prior, r in residuals if prior == kind]
        if not picked:
            return _zeros_like(template)
        acc = picked[0]
        for extra in picked[1:]:
            acc = ops.add(acc, extra)
        return LightField(acc)

    return SpatialOutput(
        lf_hr=LightField(lf_hr),
        residual_flow=total("flow"),
        residual_intensity=total("intensity"),
    )


def forward(
    params: ModelParams,
    center: Tensor,
    clamp: bool = False,
    strict: bool = True,
) -> ForwardOutput:
    """Angular then spatial pass; ``clamp`` limits the HR field to [0, 1] (inference only)."""
    angular = forward_angular(params, center, strict=strict)
    spatial = forward_spatial(params, angular.features, angular.flow, angular.lf_lr)
    if clamp:
        spatial = SpatialOutput(
            lf_hr=spatial.lf_hr.clamp(),
            residual_flow=spatial.residual_flow,
            residual_intensity=spatial.residual_intensity,
        )
    return ForwardOutput(angular=angular, spatial=spatial)


def synth_hr_x4(params: ModelParams, center: Tensor) -> LightField:
    """Run the network twice: a full pass to 2x, then the spatial path again to 4x.

    The second pass encodes each 2x view on its own and runs only the spatial
    decoder, with the 2x field and the upsampled first-pass flow as its priors.
    It keeps that view's residual and adds it to the bilinearly upsampled view,
    so the angular grid is unchanged.
    """
    first = forward(params, center, clamp=True)
    factor = params.config.sr_factor
    field_2x = LightField(first.lf_hr.views.detach())
    flow_2x = upsample_flow(first.flow.detach(), factor)
    data = field_2x.views.data
    angular = params.config.angular
    out = np.empty(
        (angular, angular, data.shape[2] * factor, data.shape[3] * factor, data.shape[4])
    )
    for v in range(angular):
        for u in range(angular):
            view = Tensor(data[v, u])
            _check_input(params, view, strict=False)
            _, features = encode(params, view)
            second = forward_spatial(params, features, flow_2x, field_2x)
            residual = ops.add(second.residual_flow.views, second.residual_intensity.views)
            out[v, u] = ops.add(bilinear_resize(view, factor), residual[v, u]).data
        logger.debug(f"synth_hr_x4: finished view row {v + 1}/{angular}")
    return LightField.from_array(np.clip(out, 0.0, 1.0))
