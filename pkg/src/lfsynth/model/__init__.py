"""Synthesis network: configuration, parameters, forward passes, checkpoints."""

from lfsynth.model.checkpoint import Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from lfsynth.model.config import (
    LayerSpec,
    NetConfig,
    ResidualOrder,
    group_parameter_counts,
    layer_plan,
    parameter_count,
)
from lfsynth.model.network import (
    PARAM_GROUPS,
    AngularOutput,
    ForwardOutput,
    ModelParams,
    SpatialOutput,
    build,
    forward,
    forward_angular,
    forward_spatial,
    synth_hr_x4,
)

__all__ = [
    "PARAM_GROUPS",
    "AngularOutput",
    "Checkpoint",
    "ForwardOutput",
    "LayerSpec",
    "ModelParams",
    "NetConfig",
    "ResidualOrder",
    "SpatialOutput",
    "build",
    "forward",
    "forward_angular",
    "forward_spatial",
    "group_parameter_counts",
    "layer_plan",
    "load_checkpoint",
    "parameter_count",
    "read_checkpoint",
    "save_checkpoint",
    "synth_hr_x4",
]
