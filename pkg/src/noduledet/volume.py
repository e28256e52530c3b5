"""CT volumes, MetaImage (.mhd/.raw) subset I/O and slice-triplet construction.

Voxel arrays are stored ``[z, y, x]`` (x fastest, matching the raw payload);
every metadata triple (extents, spacing, origin) is in ``(x, y, z)`` order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import FormatError, MissingKeyError, PayloadSizeError, UnsupportedElementTypeError

ELEMENT_TYPES = {"MET_SHORT": np.dtype("<i2"), "MET_FLOAT": np.dtype("<f4")}
REQUIRED_KEYS = ("NDims", "DimSize", "ElementSpacing", "Offset", "ElementType", "ElementDataFile")


@dataclass
class CtVolume:
    uid: str
    values: np.ndarray  # [nz, ny, nx] HU
    spacing: tuple[float, float, float]  # mm, (x, y, z)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"volume values must be 3D, got shape {self.values.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def extents(self) -> tuple[int, int, int]:
        nz, ny, nx = self.values.shape
        return nx, ny, nz

    def world_to_voxel(self, point) -> np.ndarray:
        return world_to_voxel(self, point)

    def voxel_to_world(self, voxel) -> np.ndarray:
        return voxel_to_world(self, voxel)

    def contains_voxel(self, voxel) -> bool:
        v = np.asarray(voxel, dtype=np.float64)
        return bool(np.all(v >= -0.5) and np.all(v < np.asarray(self.extents) - 0.5))


def world_to_voxel(volume: CtVolume, point) -> np.ndarray:
    """Continuous ``(x, y, z)`` voxel coordinates; voxel ``i`` is centered at ``i``."""
    return (np.asarray(point, dtype=np.float64) - np.asarray(volume.origin)) / np.asarray(volume.spacing)


def voxel_to_world(volume: CtVolume, voxel) -> np.ndarray:
    return np.asarray(voxel, dtype=np.float64) * np.asarray(volume.spacing) + np.asarray(volume.origin)


# -- MetaImage subset ------------------------------------------------------


def _parse_header(text: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"header line {lineno} is not 'Key = Value': {raw!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields


def _floats(fields, key, count=3):
    try:
        vals = [float(v) for v in fields[key].split()]
    except ValueError:
        raise FormatError(f"{key} must hold numbers, got {fields[key]!r}") from None
    if len(vals) != count:
        raise FormatError(f"{key} must hold {count} values, got {fields[key]!r}")
    return vals


def parse_mhd(header_text: str, raw_bytes: bytes, uid: str | None = None) -> CtVolume:
    fields = _parse_header(header_text)
    for key in REQUIRED_KEYS:
        if key not in fields:
            raise MissingKeyError(f"MetaImage header is missing required key {key!r}")
    if fields["NDims"] != "3":
        raise FormatError(f"only NDims = 3 is supported, got {fields['NDims']!r}")
    if fields.get("CompressedData", "False").lower() == "true":
        raise FormatError("compressed MetaImage payloads are not supported")
    if fields.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        raise FormatError("big-endian MetaImage payloads are not supported")
    etype = fields["ElementType"]
    if etype not in ELEMENT_TYPES:
        raise UnsupportedElementTypeError(
            f"ElementType {etype!r} is not supported (expected one of {sorted(ELEMENT_TYPES)})"
        )
    dims = _floats(fields, "DimSize")
    if any(d != int(d) or d < 1 for d in dims):
        raise FormatError(f"DimSize must be positive integers, got {fields['DimSize']!r}")
    nx, ny, nz = (int(d) for d in dims)
    spacing = _floats(fields, "ElementSpacing")
    origin = _floats(fields, "Offset")
    dtype = ELEMENT_TYPES[etype]
    expected = nx * ny * nz * dtype.itemsize
    if len(raw_bytes) != expected:
        raise PayloadSizeError(
            f"payload holds {len(raw_bytes)} bytes but DimSize {nx}x{ny}x{nz} of {etype} needs {expected}"
        )
    values = np.frombuffer(raw_bytes, dtype=dtype).reshape(nz, ny, nx).copy()
    if uid is None:
        uid = os.path.splitext(os.path.basename(fields["ElementDataFile"]))[0]
    return CtVolume(uid, values, tuple(spacing), tuple(origin))


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_mhd(volume: CtVolume, data_file: str | None = None) -> tuple[str, bytes]:
    """Serialize to ``(header_text, raw_bytes)``; int16 volumes as MET_SHORT, else MET_FLOAT."""
    if volume.values.dtype == np.int16:
        etype = "MET_SHORT"
    else:
        etype = "MET_FLOAT"
    data = np.ascontiguousarray(volume.values, dtype=ELEMENT_TYPES[etype])
    nx, ny, nz = volume.extents
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"Offset = {_fmt(volume.origin)}",
        f"ElementSpacing = {_fmt(volume.spacing)}",
        f"DimSize = {nx} {ny} {nz}",
        f"ElementType = {etype}",
        f"ElementDataFile = {data_file or volume.uid + '.raw'}",
    ]
    return "\n".join(lines) + "\n", data.tobytes()


def save_mhd(volume: CtVolume, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    header, payload = write_mhd(volume)
    path = os.path.join(directory, volume.uid + ".mhd")
    with open(path, "w", newline="\n") as fh:
        fh.write(header)
    with open(os.path.join(directory, volume.uid + ".raw"), "wb") as fh:
        fh.write(payload)
    return path


def load_mhd(path: str) -> CtVolume:
    with open(path, "r", newline="") as fh:
        header = fh.read()
    fields = _parse_header(header)
    if "ElementDataFile" not in fields:
        raise MissingKeyError("MetaImage header is missing required key 'ElementDataFile'")
    raw_path = os.path.join(os.path.dirname(path), fields["ElementDataFile"])
    with open(raw_path, "rb") as fh:
        payload = fh.read()
    uid = os.path.splitext(os.path.basename(path))[0]
    return parse_mhd(header, payload, uid=uid)


def list_scans(directory: str) -> list[str]:
    """Paths of all ``.mhd`` files in a directory, sorted by name."""
    return sorted(
        os.path.join(directory, name) for name in os.listdir(directory) if name.endswith(".mhd")
    )


# -- slice triplets ----------------------------------------------------------


@dataclass
class SliceImage:
    pixels: np.ndarray  # [3, T, T]
    uid: str
    z_index: int
    scale: tuple[float, float]  # pixels per voxel along (x, y)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"slice image must have exactly 3 channels, got {self.pixels.shape}")

    def pixel_to_voxel(self, px, py) -> tuple[float, float]:
        """Map a continuous pixel position back to continuous in-plane voxel coordinates."""
        return px / self.scale[0] - 0.5, py / self.scale[1] - 0.5

    def voxel_to_pixel(self, vx, vy) -> tuple[float, float]:
        return (vx + 0.5) * self.scale[0], (vy + 0.5) * self.scale[1]


@lru_cache(maxsize=32)
def bilinear_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """``[n_dst, n_src]`` linear-interpolation weights (pixel-center aligned, edge clamped)."""
    m = np.zeros((n_dst, n_src))
    src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    src = np.clip(src, 0, n_src - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = src - lo
    rows = np.arange(n_dst)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)
    return m


def rescale_slice(image: np.ndarray, target: int) -> np.ndarray:
    ny, nx = image.shape
    return bilinear_matrix(ny, target) @ image @ bilinear_matrix(nx, target).T


def build_slice_triplet(volume: CtVolume, z_index: int, target_extent: int = 600) -> SliceImage:
    """Stack slices ``z-1, z, z+1`` (clamped at the ends) rescaled to ``target_extent`` squared."""
    nx, ny, nz = volume.extents
    if nz < 1:
        raise ValueError("volume has no slices")
    if not 0 <= z_index < nz:
        raise IndexError(f"slice {z_index} outside [0, {nz})")
    channels = []
    for z in (z_index - 1, z_index, z_index + 1):
        zc = min(max(z, 0), nz - 1)
        channels.append(rescale_slice(volume.values[zc].astype(np.float64), target_extent))
    return SliceImage(
        np.stack(channels),
        volume.uid,
        z_index,
        (target_extent / nx, target_extent / ny),
    )
