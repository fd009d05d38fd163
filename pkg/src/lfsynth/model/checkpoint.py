"""Checkpoint persistence.

Layout: magic ``LFCK``, little-endian u32 version, u32 header length, a UTF-8
JSON header, then the tensor payload in header order. The header carries the
network config, its sha256 fingerprint, the storage dtype, metadata (frozen
groups, trainer bookkeeping), and the name/shape of every stored tensor.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from lfsynth.diffcore import Tensor
from lfsynth.errors import ArgumentError, FormatError, IncompatibilityError
from lfsynth.model.config import NetConfig
from lfsynth.model.network import ModelParams

logger = logging.getLogger(__name__)

MAGIC = b"LFCK"
VERSION = 1
STORAGE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class Checkpoint:
    """Loaded parameters plus any extra tensors and metadata stored alongside."""

    params: ModelParams
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    params: ModelParams,
    path: str | Path,
    dtype: str = "f64",
    extras: Mapping[str, np.ndarray] | None = None,
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """Write parameters (and optional extra tensors) to ``path``."""
    if dtype not in STORAGE:
        raise ArgumentError(f"Unknown checkpoint dtype: {dtype}. Must be one of: f32, f64")
    extras = dict(extras or {})
    clash = set(extras) & set(params.values)
    if clash:
        raise ArgumentError(f"extra tensors shadow parameters: {sorted(clash)}")

    entries: list[dict[str, Any]] = []
    chunks: list[bytes] = []
    for section, items in (("param", params.values.items()), ("extra", extras.items())):
        for name, value in items:
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            entries.append({"name": name, "shape": list(arr.shape), "section": section})
            chunks.append(np.ascontiguousarray(arr, dtype=STORAGE[dtype]).tobytes())

    meta = {"frozen": sorted(params.frozen), **dict(metadata or {})}
    header = json.dumps(
        {
            "fingerprint": params.config.fingerprint(),
            "config": params.config.model_dump(mode="json"),
            "dtype": dtype,
            "metadata": meta,
            "tensors": entries,
        },
        sort_keys=True,
    ).encode()
    prefix = MAGIC + np.array([VERSION, len(header)], dtype="<u4").tobytes()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(prefix + header + b"".join(chunks))
    tmp.replace(path)
    logger.info(f"Saved checkpoint {path} ({len(entries)} tensors, {dtype})")
    return path


def _first_difference(expected: NetConfig, found: NetConfig) -> str:
    a, b = expected.model_dump(mode="json"), found.model_dump(mode="json")
    for key in sorted(set(a) | set(b)):
        if a.get(key) != b.get(key):
            return key
    return "fingerprint"


def read_checkpoint(path: str | Path, expected: NetConfig | None = None) -> Checkpoint:
    """Load parameters, extras and metadata.

    Raises:
        FormatError: Bad magic/version/header, or payload length disagreeing with the header.
        IncompatibilityError: Stored config differs from ``expected``; names the field.
    """
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = np.frombuffer(raw, dtype="<u4", count=2, offset=len(MAGIC)).tolist()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + header_len].decode())
        config = NetConfig.model_validate(header["config"])
        storage = STORAGE[header["dtype"]]
        entries = header["tensors"]
    except (KeyError, ValueError, ValidationError) as e:
        raise FormatError(f"{path}: corrupt header ({e})") from e

    if config.fingerprint() != header.get("fingerprint"):
        raise FormatError(f"{path}: config fingerprint does not match stored config")
    if expected is not None and expected.fingerprint() != config.fingerprint():
        diff = _first_difference(expected, config)
        raise IncompatibilityError(
            f"{path}: checkpoint config differs in '{diff}' "
            f"(expected {expected.model_dump(mode='json').get(diff)!r}, "
            f"found {config.model_dump(mode='json').get(diff)!r})",
            field=diff,
        )

    offset = start + header_len
    needed = sum(int(np.prod(e["shape"])) * storage.itemsize for e in entries)
    if len(raw) - offset != needed:
        raise FormatError(
            f"{path}: payload length {len(raw) - offset} bytes, header declares {needed}"
        )

    params: dict[str, Tensor] = {}
    extras: dict[str, np.ndarray] = {}
    for entry in entries:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(raw, dtype=storage, count=count, offset=offset)
        arr = arr.astype(np.float64).reshape(entry["shape"])
        offset += count * storage.itemsize
        if entry["section"] == "param":
            params[entry["name"]] = Tensor(arr, name=entry["name"])
        else:
            extras[entry["name"]] = arr

    metadata = dict(header.get("metadata", {}))
    model = ModelParams(config, params, frozen=metadata.get("frozen", ()))
    logger.info(f"Loaded checkpoint {path} ({len(params)} parameters)")
    return Checkpoint(params=model, extras=extras, metadata=metadata)


def load_checkpoint(path: str | Path, expected: NetConfig | None = None) -> ModelParams:
    return read_checkpoint(path, expected).params
