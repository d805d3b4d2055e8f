"""Volumetric scan container: load, save, and slice signed-intensity volumes.

The on-disk format (``*.hvol``) is a single UTF-8 header line of key=value
pairs followed by the raw payload::

    dims=nz,ny,nx spacing=dz,dy,dx dtype=i16le version=1 checksum=<crc32 hex>
    <payload: little-endian voxels, z-major contiguous>

``i16le`` holds calibrated intensities (HU, valid range [-1024, 3071]);
``u8`` holds binary masks. Volumes are immutable after load and safe to read
concurrently.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
HU_MIN = -1024
HU_MAX = 3071

_DTYPES = {"i16le": np.dtype("<i2"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Malformed or inconsistent .hvol container."""


@dataclass(frozen=True)
class HuVolume:
    """3D signed-intensity volume with voxel spacing in millimeters.

    ``voxels`` is (nz, ny, nx) int16, z-major contiguous, every value within
    [HU_MIN, HU_MAX].
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]  # (dz, dy, dx) mm

    def __post_init__(self):
        v = np.ascontiguousarray(self.voxels, dtype=np.int16)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"volume must be 3D with all dims >= 1, got {v.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive floats, got {self.spacing}")
        lo, hi = int(v.min()), int(v.max())
        if lo < HU_MIN or hi > HU_MAX:
            raise ValueError(
                f"voxel values [{lo}, {hi}] outside allowed range [{HU_MIN}, {HU_MAX}]"
            )
        v.setflags(write=False)
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape  # (nz, ny, nx)


@dataclass(frozen=True)
class Slice2D:
    """One axial plane of a volume."""

    pixels: np.ndarray  # (ny, nx) int16
    z_index: int

    @property
    def dims(self) -> tuple[int, int]:
        return self.pixels.shape


def _format_float(x: float) -> str:
    # repr round-trips exactly, keeping saves byte-deterministic
    return repr(float(x))


def _encode_header(dims, spacing, dtype_name: str, checksum: int) -> bytes:
    fields = [
        f"dims={dims[0]},{dims[1]},{dims[2]}",
        f"spacing={_format_float(spacing[0])},{_format_float(spacing[1])},{_format_float(spacing[2])}",
        f"dtype={dtype_name}",
        f"version={FORMAT_VERSION}",
        f"checksum={checksum:08x}",
    ]
    return (" ".join(fields) + "\n").encode("utf-8")


def _parse_header(line: bytes, path) -> dict:
    try:
        text = line.decode("utf-8").strip()
    except UnicodeDecodeError as exc:
        raise VolumeFormatError(f"{path}: header is not UTF-8") from exc
    fields = {}
    for token in text.split():
        if "=" not in token:
            raise VolumeFormatError(f"{path}: malformed header token {token!r}")
        key, value = token.split("=", 1)
        fields[key] = value
    for required in ("dims", "dtype", "version"):
        if required not in fields:
            raise VolumeFormatError(f"{path}: header missing {required!r}")
    return fields


def _read_container(path) -> tuple[dict, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume file: {path}")
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    fields = _parse_header(line, path)
    version = int(fields["version"])
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    dtype_name = fields["dtype"]
    if dtype_name not in _DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype {dtype_name!r}")
    dtype = _DTYPES[dtype_name]
    dims = tuple(int(d) for d in fields["dims"].split(","))
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{path}: bad dims {fields['dims']!r}")
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: header promises {expected} payload bytes, file has {len(payload)}"
        )
    if "checksum" in fields:
        crc = zlib.crc32(payload) & 0xFFFFFFFF
        if crc != int(fields["checksum"], 16):
            raise VolumeFormatError(f"{path}: payload checksum mismatch")
    spacing = (1.0, 1.0, 1.0)
    if "spacing" in fields:
        parts = [float(s) for s in fields["spacing"].split(",")]
        if len(parts) != 3:
            raise VolumeFormatError(f"{path}: bad spacing {fields['spacing']!r}")
        spacing = tuple(parts)
    data = np.frombuffer(payload, dtype=dtype).reshape(dims)
    fields["_spacing"] = spacing
    return fields, data


def load_volume(path) -> HuVolume:
    """Read an i16le .hvol container back into a volume."""
    fields, data = _read_container(path)
    if fields["dtype"] != "i16le":
        raise VolumeFormatError(f"{path}: expected dtype i16le, got {fields['dtype']}")
    return HuVolume(voxels=data, spacing=fields["_spacing"])


def save_volume(vol: HuVolume, path) -> None:
    """Write a volume; byte-deterministic for identical input."""
    payload = np.ascontiguousarray(vol.voxels, dtype="<i2").tobytes()
    header = _encode_header(vol.dims, vol.spacing, "i16le", zlib.crc32(payload) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_mask(path) -> np.ndarray:
    """Read a u8 .hvol mask as a (nz, ny, nx) uint8 array of 0/1."""
    fields, data = _read_container(path)
    if fields["dtype"] != "u8":
        raise VolumeFormatError(f"{path}: expected dtype u8, got {fields['dtype']}")
    if data.max(initial=0) > 1:
        raise VolumeFormatError(f"{path}: mask payload contains values other than 0/1")
    return data.copy()


def save_mask(mask: np.ndarray, path, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a binary mask in the same container with dtype=u8."""
    a = np.ascontiguousarray(mask, dtype=np.uint8)
    if a.ndim != 3:
        raise ValueError("mask must be 3D")
    if a.max(initial=0) > 1:
        raise ValueError("mask values must be 0/1")
    payload = a.tobytes()
    header = _encode_header(a.shape, spacing, "u8", zlib.crc32(payload) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def slice_axial(vol: HuVolume, z: int) -> Slice2D:
    """Copy out the axial plane at index z."""
    nz = vol.dims[0]
    if not 0 <= z < nz:
        raise IndexError(f"z={z} out of range for volume with {nz} slices")
    return Slice2D(pixels=vol.voxels[z].copy(), z_index=z)
