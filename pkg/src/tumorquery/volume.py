"""Volume containers and the on-disk case format.

A case file is one line of JSON header followed by the raw little-endian
payload of each array, in header order::

    {"format": "tqcase", "format_version": 1, "dims": [D, H, W], ...}\n
    <array 0 bytes><array 1 bytes>...
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_NAME = "tqcase"
FORMAT_VERSION = 1
REFERENCE_SPACING = (3.0, 0.8, 0.8)
MIN_DIM = 8
_DTYPES = {"f4": np.dtype("<f4"), "u1": np.dtype("u1")}


class CaseFormatError(ValueError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = REFERENCE_SPACING

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_grid(self.voxels.shape, self.spacing, MIN_DIM)
        if not np.isfinite(self.voxels).all():
            raise ValueError("volume intensities must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class LabelMap:
    labels: np.ndarray
    spacing: tuple[float, float, float] = REFERENCE_SPACING

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_grid(self.labels.shape, self.spacing, MIN_DIM)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


def _check_grid(dims, spacing, min_dim: int = 1):
    if len(dims) != 3:
        raise ValueError(f"expected a 3D grid, got dims {tuple(dims)}")
    if any(int(d) < min_dim for d in dims):
        raise ValueError(f"grid dims must be >= {min_dim}, got {tuple(dims)}")
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive values, got {spacing}")


def save_arrays(path, arrays: dict[str, np.ndarray], spacing, **meta) -> None:
    """Write equally shaped 3D arrays to a case file.

    Arrays of float dtype are stored as ``<f4``, integer arrays as ``u1``.
    """
    dims = None
    entries, payload = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if dims is None:
            dims = arr.shape
        elif arr.shape != dims:
            raise ValueError(f"array {name!r} has shape {arr.shape}, expected {dims}")
        code = "f4" if np.issubdtype(arr.dtype, np.floating) else "u1"
        if code == "u1" and arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError(f"array {name!r} does not fit in uint8")
        entries.append({"name": name, "dtype": code})
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    _check_grid(dims, spacing)
    header = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "dims": [int(d) for d in dims],
        "spacing": [float(s) for s in spacing],
        "arrays": entries,
        **meta,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for chunk in payload:
            fh.write(chunk)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CaseFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CaseFormatError(f"{path}: corrupt header ({exc})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise CaseFormatError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("format_version") != FORMAT_VERSION:
        raise CaseFormatError(f"{path}: unsupported format version {header.get('format_version')!r}")
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        entries = header["arrays"]
        _check_grid(dims, spacing)
        dtypes = [_DTYPES[e["dtype"]] for e in entries]
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseFormatError(f"{path}: invalid header ({exc})") from None

    n = int(np.prod(dims))
    body = raw[nl + 1:]
    expected = sum(n * dt.itemsize for dt in dtypes)
    if len(body) != expected:
        raise CaseFormatError(f"{path}: payload is {len(body)} bytes, header implies {expected}")
    out, off = {}, 0
    for e, dt in zip(entries, dtypes):
        size = n * dt.itemsize
        out[e["name"]] = np.frombuffer(body, dtype=dt, count=n, offset=off).reshape(dims).copy()
        off += size
    return out, header


def save_case(path, volume: Volume, labelmap: LabelMap, taxonomy_hash: str = "") -> None:
    if volume.dims != labelmap.dims:
        raise ValueError("volume and label map dims differ")
    save_arrays(path, {"volume": volume.voxels, "labels": labelmap.labels},
                volume.spacing, taxonomy_hash=taxonomy_hash)


def load_case(path) -> tuple[Volume, LabelMap]:
    arrays, header = load_arrays(path)
    if set(arrays) != {"volume", "labels"}:
        raise CaseFormatError(f"{path}: expected volume and labels arrays, got {sorted(arrays)}")
    spacing = tuple(header["spacing"])
    return Volume(arrays["volume"], spacing), LabelMap(arrays["labels"], spacing)
