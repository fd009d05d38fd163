"""Single-image light-field synthesis with joint angular and spatial super-resolution."""

__version__ = "0.1.0"
