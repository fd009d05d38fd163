"""Light-field data model, file formats, and quality metrics."""

from lfsynth.lightfield.field import (
    LightField,
    ViewOffset,
    center_index,
    epi,
    identity_coords,
    offset_grid,
    refocus,
    stack_views,
    unstack_views,
    vertical_epi,
)
from lfsynth.lightfield.io import (
    load,
    load_array,
    load_image,
    load_sai_grid,
    read_png,
    save,
    save_array,
    save_sai_grid,
    to_luminance,
    write_png,
)
from lfsynth.lightfield.metrics import MetricReport, evaluate_fields, psnr, ssim

__all__ = [
    "LightField",
    "MetricReport",
    "ViewOffset",
    "center_index",
    "epi",
    "evaluate_fields",
    "identity_coords",
    "load",
    "load_array",
    "load_image",
    "load_sai_grid",
    "offset_grid",
    "psnr",
    "read_png",
    "refocus",
    "save",
    "save_array",
    "save_sai_grid",
    "ssim",
    "stack_views",
    "to_luminance",
    "unstack_views",
    "vertical_epi",
    "write_png",
]
