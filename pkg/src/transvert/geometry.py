"""Volumes, images, axis conventions and their on-disk formats.

World axes are fixed: x runs left-right, y anterior-posterior (positive is
anterior) and z cranio-caudal (positive is caudal). Volume arrays are indexed
``[x, y, z]`` and serialized x-fastest, little-endian. Images are indexed
``[u, v]`` (row-major) where ``v`` is always the z axis and ``u`` is y for the
sagittal view and x for the coronal view.

A volume ``<name>`` is stored as ``<name>.vhdr`` (UTF-8 JSON header) next to
``<name>.vraw`` (raw payload); images use ``.ihdr``/``.iraw``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LABEL_MIN, LABEL_MAX = 8, 24  # T1 .. L5

DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}
_CODE = {v: k for k, v in DTYPES.items()}
ORDER_3D = "x-fastest,little-endian"
ORDER_2D = "row-major,little-endian"


class FormatError(ValueError):
    """Malformed or inconsistent file header/payload."""


@dataclass(frozen=True)
class AxisConvention:
    """Documented constant; the views integrate over one world axis each."""

    x: str = "left-right"
    y: str = "anterior-posterior (+anterior)"
    z: str = "cranio-caudal (+caudal)"
    sagittal_integrates: int = 0
    coronal_integrates: int = 1

    def image_axes(self, view):
        """World axes spanned by the (u, v) image of ``view``."""
        if view == "sagittal":
            return (1, 2)
        if view == "coronal":
            return (0, 2)
        raise ValueError(f"unknown view {view!r}")


AXES = AxisConvention()


def _vec(v, n, name, positive=False):
    a = tuple(float(x) for x in v)
    if len(a) != n:
        raise ValueError(f"{name} needs {n} components, got {len(a)}")
    if not all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    if positive and min(a) <= 0:
        raise ValueError(f"{name} components must be strictly positive: {a}")
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) <= 0:
            raise ValueError(f"volume data must be a non-empty 3-D array, got shape {arr.shape}")
        if arr.dtype not in (np.uint8, np.float32):
            raise ValueError(f"volume dtype must be uint8 or float32, got {arr.dtype}")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", _vec(self.spacing_mm, 3, "spacing_mm", positive=True))
        object.__setattr__(self, "origin_mm", _vec(self.origin_mm, 3, "origin_mm"))

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype_code(self):
        return _CODE[self.data.dtype.newbyteorder("<")]

    def flat(self):
        """Payload in x-fastest order."""
        return self.data.ravel(order="F")

    def world_to_voxel(self, p):
        return world_to_voxel(self, p)

    def voxel_to_world(self, i):
        return voxel_to_world(self, i)

    def with_data(self, data):
        return Volume(data, self.spacing_mm, self.origin_mm)

    def labels_present(self):
        return [int(v) for v in np.unique(self.data) if v != 0]

    def check_labels(self):
        bad = [v for v in np.unique(self.data) if v != 0 and not LABEL_MIN <= v <= LABEL_MAX]
        if bad:
            raise ValueError(f"label volume contains values outside {{0}} u [8, 24]: {bad}")
        return self

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing_mm == other.spacing_mm
            and self.origin_mm == other.origin_mm
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class Image2D:
    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2 or min(arr.shape) <= 0:
            raise ValueError(f"image data must be a non-empty 2-D array, got shape {arr.shape}")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", _vec(self.spacing_mm, 2, "spacing_mm", positive=True))
        object.__setattr__(self, "origin_mm", _vec(self.origin_mm, 2, "origin_mm"))

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data):
        return Image2D(data, self.spacing_mm, self.origin_mm)

    def __eq__(self, other):
        if not isinstance(other, Image2D):
            return NotImplemented
        return (
            self.spacing_mm == other.spacing_mm
            and self.origin_mm == other.origin_mm
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True)
class Centroid:
    position_mm: tuple
    label: int = field(default=LABEL_MIN)

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position_mm)
        if len(pos) not in (2, 3):
            raise ValueError("centroid needs 2 (view plane) or 3 (world) coordinates")
        if not all(np.isfinite(pos)):
            raise ValueError("centroid coordinates must be finite")
        if not LABEL_MIN <= int(self.label) <= LABEL_MAX:
            raise ValueError(f"centroid label {self.label} outside [8, 24]")
        object.__setattr__(self, "position_mm", pos)
        object.__setattr__(self, "label", int(self.label))


def world_to_voxel(v, p):
    p = np.asarray(p, dtype=np.float64)
    return (p - np.asarray(v.origin_mm)) / np.asarray(v.spacing_mm)


def voxel_to_world(v, i):
    i = np.asarray(i, dtype=np.float64)
    return np.asarray(v.origin_mm) + i * np.asarray(v.spacing_mm)


# ---------------------------------------------------------------------------
# file I/O

def _stem(path, suffixes):
    p = Path(path)
    if p.suffix in suffixes:
        p = p.with_suffix("")
    return p


def _read_header(path, expect_ndim):
    try:
        hdr = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if not isinstance(hdr, dict):
        raise FormatError(f"{path}: header must be a key/value object")
    for key in ("shape", "spacing_mm", "origin_mm", "dtype", "order"):
        if key not in hdr:
            raise FormatError(f"{path}: header lacks {key!r}")
    shape = hdr["shape"]
    if (
        not isinstance(shape, list)
        or len(shape) != expect_ndim
        or not all(isinstance(n, int) and n > 0 for n in shape)
    ):
        raise FormatError(f"{path}: bad shape {shape!r}")
    if hdr["dtype"] not in DTYPES:
        raise FormatError(f"{path}: unknown dtype {hdr['dtype']!r}")
    return hdr


def _read_payload(path, hdr, dtype):
    raw = Path(path).read_bytes() if Path(path).exists() else None
    if raw is None:
        raise FormatError(f"{path}: payload missing")
    expected = int(np.prod(hdr["shape"])) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: size mismatch, expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype)


def write_volume(v, path):
    """Write ``<stem>.vhdr`` + ``<stem>.vraw``; returns the header path."""
    stem = _stem(path, {".vhdr", ".vraw"})
    stem.parent.mkdir(parents=True, exist_ok=True)
    hdr = {
        "shape": list(v.shape),
        "spacing_mm": list(v.spacing_mm),
        "origin_mm": list(v.origin_mm),
        "dtype": v.dtype_code,
        "order": ORDER_3D,
    }
    stem.with_suffix(".vraw").write_bytes(v.flat().astype(v.data.dtype.newbyteorder("<")).tobytes())
    hp = stem.with_suffix(".vhdr")
    hp.write_text(json.dumps(hdr, indent=1) + "\n", encoding="utf-8")
    return hp


def read_volume(path):
    stem = _stem(path, {".vhdr", ".vraw"})
    hdr = _read_header(stem.with_suffix(".vhdr"), 3)
    if hdr["order"] != ORDER_3D:
        raise FormatError(f"{stem}.vhdr: unsupported order {hdr['order']!r}")
    dtype = DTYPES[hdr["dtype"]]
    flat = _read_payload(stem.with_suffix(".vraw"), hdr, dtype)
    data = flat.reshape(hdr["shape"], order="F").astype(dtype.newbyteorder("="))
    return Volume(data, hdr["spacing_mm"], hdr["origin_mm"])


def write_image(img, path):
    stem = _stem(path, {".ihdr", ".iraw"})
    stem.parent.mkdir(parents=True, exist_ok=True)
    hdr = {
        "shape": list(img.shape),
        "spacing_mm": list(img.spacing_mm),
        "origin_mm": list(img.origin_mm),
        "dtype": "f32",
        "order": ORDER_2D,
    }
    stem.with_suffix(".iraw").write_bytes(img.data.astype("<f4").tobytes())
    hp = stem.with_suffix(".ihdr")
    hp.write_text(json.dumps(hdr, indent=1) + "\n", encoding="utf-8")
    return hp


def read_image(path):
    stem = _stem(path, {".ihdr", ".iraw"})
    hdr = _read_header(stem.with_suffix(".ihdr"), 2)
    if hdr["dtype"] != "f32":
        raise FormatError(f"{stem}.ihdr: images are float32 only")
    if hdr["order"] != ORDER_2D:
        raise FormatError(f"{stem}.ihdr: unsupported order {hdr['order']!r}")
    flat = _read_payload(stem.with_suffix(".iraw"), hdr, DTYPES["f32"])
    return Image2D(flat.reshape(hdr["shape"]).astype(np.float32), hdr["spacing_mm"], hdr["origin_mm"])


def write_pgm16(img, path):
    """Binary 16-bit PGM, min-max scaled to 0..65535, z running down the rows."""
    a = np.asarray(img.data if isinstance(img, Image2D) else img, dtype=np.float64).T
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo) * 65535.0
    px = np.round(scaled).astype(">u2")
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(px.tobytes())
    return Path(path)
