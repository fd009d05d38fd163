"""Network configuration and the layer plan shared by parameter building and forward passes."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Literal

from pydantic import BaseModel, Field

from lfsynth.errors import ConfigError

logger = logging.getLogger(__name__)

KERNEL_SIZE = 3
LEAKY_SLOPE = 0.2


class ResidualOrder(str, Enum):
    """Which prior feeds each spatial residual branch, first branch first."""

    FLOW_THEN_INTENSITY = "flow_then_intensity"
    INTENSITY_THEN_FLOW = "intensity_then_flow"
    SINGLE_FLOW = "single_flow"
    SINGLE_INTENSITY = "single_intensity"
    FLOW_FLOW = "flow_flow"
    INTENSITY_INTENSITY = "intensity_intensity"

    @property
    def branches(self) -> tuple[str, ...]:
        return {
            ResidualOrder.FLOW_THEN_INTENSITY: ("flow", "intensity"),
            ResidualOrder.INTENSITY_THEN_FLOW: ("intensity", "flow"),
            ResidualOrder.SINGLE_FLOW: ("flow",),
            ResidualOrder.SINGLE_INTENSITY: ("intensity",),
            ResidualOrder.FLOW_FLOW: ("flow", "flow"),
            ResidualOrder.INTENSITY_INTENSITY: ("intensity", "intensity"),
        }[self]


class NetConfig(BaseModel):
    """Encoder / angular decoder / spatial decoder configuration.

    ``mode="table"`` is the full-size layer layout (U=8, 128x128 input,
    192 residual channels); ``mode="desk"`` is the CPU-sized variant with odd U.
    """

    mode: Literal["desk", "table"] = "desk"
    input_hw: tuple[int, int] = (64, 64)
    angular: int = Field(default=5, ge=1)
    channels: int = Field(default=1, ge=1)
    base_filters: int = Field(default=8, ge=1)
    depth: int = Field(default=4, ge=1)
    eta: float = Field(default=0.8, allow_inf_nan=False)
    sr_factor: Literal[2] = 2
    residual_order: ResidualOrder = ResidualOrder.FLOW_THEN_INTENSITY
    residual_channels: int | None = Field(default=None, ge=1)

    @classmethod
    def desk(cls, **overrides: object) -> NetConfig:
        return cls(**overrides)

    @classmethod
    def table_faithful(cls, **overrides: object) -> NetConfig:
        values: dict[str, object] = {
            "mode": "table",
            "input_hw": (128, 128),
            "angular": 8,
            "channels": 1,
            "base_filters": 16,
            "depth": 5,
            "residual_channels": 192,
        }
        values.update(overrides)
        return cls(**values)

    @property
    def view_count(self) -> int:
        return self.angular * self.angular

    @property
    def flow_channels(self) -> int:
        return 2 * self.view_count

    @property
    def view_channels(self) -> int:
        return self.view_count * self.channels

    @property
    def residual_width(self) -> int:
        """Channels produced by each residual branch before folding to U²C."""
        return self.residual_channels or self.view_channels

    def check(self) -> None:
        """Raise ConfigError for geometrically invalid settings."""
        h, w = self.input_hw
        step = 2**self.depth
        if h < 1 or w < 1 or h % step or w % step:
            raise ConfigError(
                f"input_hw {self.input_hw} must be positive and divisible by 2^depth = {step}"
            )
        if self.mode == "desk" and self.angular % 2 == 0:
            raise ConfigError(f"angular must be odd at desk scale, got {self.angular}")
        if self.mode == "table" and self.angular != 8:
            raise ConfigError(f"table-faithful mode uses angular=8, got {self.angular}")
        if self.residual_width % self.view_channels:
            raise ConfigError(
                f"residual_channels {self.residual_width} must be a multiple of "
                f"U*U*C = {self.view_channels}"
            )

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def encoder_filters(self, level: int) -> int:
        return self.base_filters * 2 ** (level - 1)

    def decoder_filters(self, level: int) -> int:
        return max(self.encoder_filters(level), 4 * self.base_filters)

    @property
    def bottleneck_filters(self) -> int:
        return self.base_filters * 2**self.depth


@dataclass(frozen=True)
class LayerSpec:
    """One convolution in execution order.

    ``kind`` is ``conv`` (stride 1), ``conv_s2`` (stride 2), ``conv_t``
    (stride-2 transpose), or ``conv_o`` (stride 1, no activation).
    """

    name: str
    kind: str
    group: str
    cin: int
    cout: int
    out_hw: tuple[int, int]

    @property
    def activation(self) -> bool:
        return self.kind != "conv_o"

    @property
    def stride(self) -> int:
        return 1 if self.kind in ("conv", "conv_o") else 2

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        if self.kind == "conv_t":
            return (KERNEL_SIZE, KERNEL_SIZE, self.cout, self.cin)
        return (KERNEL_SIZE, KERNEL_SIZE, self.cin, self.cout)

    @property
    def parameter_count(self) -> int:
        return KERNEL_SIZE * KERNEL_SIZE * self.cin * self.cout + self.cout


def _prior_channels(config: NetConfig, prior: str) -> int:
    return config.flow_channels if prior == "flow" else config.view_channels


def layer_plan(config: NetConfig) -> list[LayerSpec]:
    """Every convolution of the network with its channels and output extent."""
    h, w = config.input_hw
    depth = config.depth

    def at(level: int) -> tuple[int, int]:
        return h // 2 ** (level - 1), w // 2 ** (level - 1)

    plan: list[LayerSpec] = []
    cin = config.channels
    for k in range(1, depth + 1):
        f = config.encoder_filters(k)
        plan += [
            LayerSpec(f"encoder.{k}.conv1", "conv", "encoder", cin, f, at(k)),
            LayerSpec(f"encoder.{k}.conv2", "conv", "encoder", f, f, at(k)),
            LayerSpec(f"encoder.{k}.down", "conv_s2", "encoder", f, f, at(k + 1)),
        ]
        cin = f

    b = config.bottleneck_filters
    plan += [
        LayerSpec("bottleneck.conv1", "conv", "bottleneck", cin, b, at(depth + 1)),
        LayerSpec("bottleneck.conv2", "conv", "bottleneck", b, b, at(depth + 1)),
    ]

    prev = b
    for k in range(depth, 0, -1):
        g, f = config.decoder_filters(k), config.encoder_filters(k)
        plan += [
            LayerSpec(f"angular.{k}.up", "conv_t", "angular", prev, g, at(k)),
            LayerSpec(f"angular.{k}.conv1", "conv", "angular", g + f, g, at(k)),
            LayerSpec(f"angular.{k}.conv2", "conv", "angular", g, g, at(k)),
        ]
        prev = g
    head = 4 * config.base_filters
    plan += [
        LayerSpec("angular.head.conv1", "conv", "angular", prev, head, at(1)),
        LayerSpec("angular.head.conv2", "conv", "angular", head, head, at(1)),
        LayerSpec("angular.head.out", "conv_o", "angular", head, config.flow_channels, at(1)),
    ]

    prev = b
    for k in range(depth, 1, -1):
        g = config.decoder_filters(k)
        plan.append(LayerSpec(f"spatial.trunk.{k}.up", "conv_t", "spatial", prev, g, at(k)))
        if k >= 3:
            plan += [
                LayerSpec(f"spatial.trunk.{k}.conv1", "conv", "spatial", g, g, at(k)),
                LayerSpec(f"spatial.trunk.{k}.conv2", "conv", "spatial", g, g, at(k)),
            ]
        prev = g

    g1 = config.decoder_filters(1)
    r = config.residual_width
    hr = (h * config.sr_factor, w * config.sr_factor)
    for i, prior in enumerate(config.residual_order.branches, start=1):
        p = _prior_channels(config, prior)
        name = f"spatial.branch{i}"
        plan += [
            LayerSpec(f"{name}.up_lr", "conv_t", "spatial", prev, g1, at(1)),
            LayerSpec(f"{name}.conv1", "conv", "spatial", g1 + p, g1, at(1)),
            LayerSpec(f"{name}.conv2", "conv", "spatial", g1, g1, at(1)),
            LayerSpec(f"{name}.up_hr", "conv_t", "spatial", g1, r, hr),
            LayerSpec(f"{name}.conv3", "conv", "spatial", r + p, r, hr),
            LayerSpec(f"{name}.out", "conv_o", "spatial", r, r, hr),
        ]
    return plan


def parameter_count(config: NetConfig) -> int:
    return sum(layer.parameter_count for layer in layer_plan(config))


def group_parameter_counts(config: NetConfig) -> dict[str, int]:
    counts: dict[str, int] = {}
    for layer in layer_plan(config):
        counts[layer.group] = counts.get(layer.group, 0) + layer.parameter_count
    return counts
