"""Light-field file formats and 8-bit image helpers.

Packed binary (".lf4"): magic ``LF4D``, seven little-endian u32 fields
(version, U_v, U_h, H, W, C, dtype code), then samples in [v, u, h, w, c]
row-major order. dtype code 1 is float32, 2 is float64.

SAI grid: a directory of ``view_{v}_{u}.png`` files plus ``manifest.json``
holding ``{"U", "H", "W", "C"}``.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import imageio.v3 as iio
import numpy as np

from lfsynth.errors import ArgumentError, FormatError
from lfsynth.lightfield.field import LightField

logger = logging.getLogger(__name__)

MAGIC = b"LF4D"
VERSION = 1
HEADER_FIELDS = ("version", "U_v", "U_h", "H", "W", "C", "dtype")
HEADER_BYTES = len(MAGIC) + 4 * len(HEADER_FIELDS)
DTYPE_CODES = {"f32": 1, "f64": 2}
CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}

BT601_WEIGHTS = np.array([0.299, 0.587, 0.114])


def save_array(data: np.ndarray, path: str | Path, dtype: str = "f64") -> Path:
    """Write any [U_v, U_h, H, W, C] array as packed binary, without range checks."""
    arr = np.asarray(data)
    if arr.ndim != 5:
        raise ArgumentError(f"packed arrays must be 5-D [U_v,U_h,H,W,C], got shape {arr.shape}")
    if dtype not in DTYPE_CODES:
        raise ArgumentError(f"Unknown dtype: {dtype}. Must be one of: f32, f64")
    code = DTYPE_CODES[dtype]
    header = np.array([VERSION, *arr.shape, code], dtype="<u4").tobytes()
    payload = np.ascontiguousarray(arr, dtype=CODE_DTYPES[code]).tobytes()
    path = Path(path)
    path.write_bytes(MAGIC + header + payload)
    return path


def load_array(path: str | Path) -> np.ndarray:
    """Read a packed-binary file into a float64 array."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"Light-field file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER_BYTES:
        raise FormatError(f"{path}: header truncated ({len(raw)} bytes)")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    fields = dict(
        zip(
            HEADER_FIELDS,
            np.frombuffer(raw, dtype="<u4", count=len(HEADER_FIELDS), offset=len(MAGIC)).tolist(),
            strict=True,
        )
    )
    if fields["version"] != VERSION:
        raise FormatError(f"{path}: unsupported version {fields['version']}")
    if fields["dtype"] not in CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {fields['dtype']}")
    dtype = CODE_DTYPES[fields["dtype"]]
    shape = tuple(fields[k] for k in ("U_v", "U_h", "H", "W", "C"))
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = len(raw) - HEADER_BYTES
    if actual != expected:
        raise FormatError(
            f"{path}: data length {actual} bytes does not match header {shape} "
            f"({expected} bytes); file truncated or padded"
        )
    data = np.frombuffer(raw, dtype=dtype, offset=HEADER_BYTES).reshape(shape)
    return data.astype(np.float64)


def _format_for(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("lf4", "sai-grid"):
            raise ArgumentError(f"Unknown light-field format: {fmt}. Must be one of: lf4, sai-grid")
        return fmt
    return "sai-grid" if path.is_dir() or path.suffix == "" else "lf4"


def save(lf: LightField, path: str | Path, fmt: str | None = None, dtype: str = "f64") -> Path:
    """Write a light field as packed binary or as an SAI grid directory."""
    path = Path(path)
    if _format_for(path, fmt) == "lf4":
        return save_array(lf.views.data, path, dtype=dtype)
    return save_sai_grid(lf, path)


def load(path: str | Path, fmt: str | None = None) -> LightField:
    """Read a light field; values must lie in [0, 1]."""
    path = Path(path)
    if _format_for(path, fmt) == "lf4":
        data = load_array(path)
        if data.shape[0] != data.shape[1]:
            raise FormatError(f"{path}: angular grid {data.shape[:2]} is not square")
        try:
            return LightField.from_array(data)
        except ArgumentError as e:
            raise FormatError(f"{path}: {e}") from e
    return load_sai_grid(path)


def view_filename(v: int, u: int) -> str:
    return f"view_{v}_{u}.png"


def save_sai_grid(lf: LightField, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = lf.views.data
    for v in range(lf.angular):
        for u in range(lf.angular):
            write_png(directory / view_filename(v, u), data[v, u])
    manifest = {"U": lf.angular, "H": lf.height, "W": lf.width, "C": lf.channels}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.debug(f"Wrote SAI grid {lf.shape} to {directory}")
    return directory


def load_sai_grid(directory: str | Path) -> LightField:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FormatError(f"{directory}: missing manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
        angular, height, width, channels = (int(manifest[k]) for k in ("U", "H", "W", "C"))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{manifest_path}: invalid manifest ({e})") from e

    views = np.empty((angular, angular, height, width, channels))
    for v in range(angular):
        for u in range(angular):
            name = view_filename(v, u)
            if not (directory / name).is_file():
                raise FormatError(f"{directory}: missing view file {name}")
            image = read_png(directory / name)
            if image.shape != (height, width, channels):
                raise FormatError(
                    f"{name}: shape {image.shape} does not match manifest "
                    f"{(height, width, channels)}"
                )
            views[v, u] = image
    return LightField.from_array(views)


def quantize(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 with round-half-to-even."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: str | Path, image: np.ndarray) -> Path:
    """Write [H, W], [H, W, 1] or [H, W, 3] floats in [0, 1] as an 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] not in (3, 4)):
        raise ArgumentError(f"write_png: unsupported image shape {np.shape(image)}")
    path = Path(path)
    iio.imwrite(path, quantize(arr), extension=".png")
    return path


def read_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit image as floats in [0, 1], shape [H, W, C]."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"Image file not found: {path}")
    try:
        raw = iio.imread(path)
    except Exception as e:
        raise FormatError(f"{path}: cannot decode image ({e})") from e
    arr = np.asarray(raw)
    if arr.ndim == 2:
        arr = arr[..., None]
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.float64) / float(np.iinfo(arr.dtype).max)
    return arr.astype(np.float64)


def to_luminance(image: np.ndarray) -> np.ndarray:
    """BT.601 luminance [H, W, 1] of an RGB(A) image; single-channel input passes through."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape[-1] == 1:
        return arr
    if arr.shape[-1] not in (3, 4):
        raise ArgumentError(f"to_luminance: expected 1, 3 or 4 channels, got {arr.shape[-1]}")
    return (arr[..., :3] @ BT601_WEIGHTS)[..., None]


def load_image(path: str | Path, luminance: bool = True) -> np.ndarray:
    """Read an image for synthesis, converting colour input to luminance."""
    image = read_png(path)
    if luminance and image.shape[-1] != 1:
        logger.warning(f"{path}: {image.shape[-1]}-channel image converted to BT.601 luminance")
        image = to_luminance(image)
    return image
