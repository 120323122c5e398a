"""3D scalar volumes and their on-disk container.

The native container is a small JSON header plus a raw little-endian float32
payload stored x-fastest::

    {"dims": [nx, ny, nz], "spacing_mm": [sx, sy, sz], "origin_mm": [ox, oy, oz],
     "dtype": "f32", "raw": "u.raw"}

In memory the data is held as a ``(nx, ny, nz)`` float32 array so that
``data[i, j, k]`` addresses voxel ``(i, j, k)``; the x-fastest flat order is
the Fortran ravel of that array.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_SUFFIX = ".vol"
RAW_SUFFIX = ".raw"


class VolumeFormatError(ValueError):
    """Raised for malformed or unsupported volume files."""


@dataclass(frozen=True)
class GridMeta:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise VolumeFormatError("dims, spacing_mm and origin_mm need three entries")
        if any(d < 1 for d in dims):
            raise VolumeFormatError(f"non-positive dims {dims}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise VolumeFormatError(f"non-positive spacing {spacing}")
        if not all(np.isfinite(o) for o in origin):
            raise VolumeFormatError(f"non-finite origin {origin}")
        if dims[0] * dims[1] * dims[2] > np.iinfo(np.intp).max // 8:
            raise VolumeFormatError(f"grid {dims} exceeds addressable size")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def coordinates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Voxel-centre coordinates (mm) along each axis."""
        return tuple(
            o + s * np.arange(n) for n, s, o in zip(self.dims, self.spacing_mm, self.origin_mm)
        )

    def index_of(self, point_mm) -> tuple[int, int, int]:
        """Nearest voxel index to a physical point (may lie outside the grid)."""
        return tuple(
            int(np.floor((p - o) / s + 0.5))
            for p, o, s in zip(point_mm, self.origin_mm, self.spacing_mm)
        )

    def contains_index(self, idx) -> bool:
        return all(0 <= i < n for i, n in zip(idx, self.dims))

    def bounds_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounding box spanned by the voxel centres."""
        lo = np.asarray(self.origin_mm)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing_mm)
        return lo, hi

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing_mm),
            "origin_mm": list(self.origin_mm),
        }


@dataclass(frozen=True, eq=False)
class Volume:
    meta: GridMeta
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.size != self.meta.n_voxels:
            raise VolumeFormatError(
                f"data has {data.size} values, grid {self.meta.dims} needs {self.meta.n_voxels}"
            )
        data = np.array(data.reshape(self.meta.dims), dtype=np.float32, copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_flat(cls, meta: GridMeta, flat) -> "Volume":
        """Build from an x-fastest flat array."""
        return cls(meta, np.asarray(flat).reshape(meta.dims, order="F"))

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.meta == other.meta and self.data.tobytes() == other.data.tobytes()

    def __hash__(self):
        return hash((self.meta, self.data.tobytes()))


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    raw = path.with_suffix(RAW_SUFFIX) if path.suffix == HEADER_SUFFIX else Path(str(path) + RAW_SUFFIX)
    return path, raw


def write_volume(path, volume: Volume) -> Path:
    """Write ``volume`` as header ``path`` plus an adjacent raw payload."""
    header_path, raw_path = _paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    payload = volume.flat().astype("<f4", copy=False).tobytes()
    raw_path.write_bytes(payload)
    header = volume.meta.to_json()
    header["dtype"] = "f32"
    header["raw"] = raw_path.name
    header_path.write_text(json.dumps(header, indent=1))
    return header_path


def read_volume(path) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"volume header not found: {path}")
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{path}: header is not JSON ({exc})") from exc
    dtype = header.get("dtype", "f32")
    if dtype != "f32":
        raise VolumeFormatError(f"{path}: unsupported dtype {dtype!r}")
    try:
        meta = GridMeta(header["dims"], header["spacing_mm"], header.get("origin_mm", (0, 0, 0)))
    except KeyError as exc:
        raise VolumeFormatError(f"{path}: header lacks {exc}") from exc
    raw_path = path.parent / header.get("raw", _paths(path)[1].name)
    if not raw_path.is_file():
        raise FileNotFoundError(f"raw payload not found: {raw_path}")
    payload = raw_path.read_bytes()
    expected = 4 * meta.n_voxels
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload has {len(payload)} bytes, header requires {expected}"
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return Volume.from_flat(meta, flat)


# NIfTI-1 datatype codes we accept
_NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4"}


def read_nifti_subset(path) -> Volume:
    """Read an uncompressed single-file NIfTI-1 volume.

    Only uint8/int16/float32 3D data is supported. Orientation (qform/sform)
    is ignored: the grid origin is set to zero and voxel order is taken as
    stored. ``scl_slope``/``scl_inter`` are applied when the slope is nonzero.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 348:
        raise VolumeFormatError(f"{path}: too short for a NIfTI-1 header")
    if blob[344:348] != b"n+1\x00":
        raise VolumeFormatError(f"{path}: wrong NIfTI magic {blob[344:348]!r}")
    if struct.unpack("<i", blob[0:4])[0] == 348:
        end = "<"
    elif struct.unpack(">i", blob[0:4])[0] == 348:
        end = ">"
    else:
        raise VolumeFormatError(f"{path}: bad sizeof_hdr")

    dim = struct.unpack(end + "8h", blob[40:56])
    datatype = struct.unpack(end + "h", blob[70:72])[0]
    pixdim = struct.unpack(end + "8f", blob[76:108])
    vox_offset = int(struct.unpack(end + "f", blob[108:112])[0])
    slope, inter = struct.unpack(end + "2f", blob[112:120])

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeFormatError(f"{path}: invalid dim[0]={ndim}")
    if any(d > 1 for d in dim[4 : ndim + 1]):
        raise VolumeFormatError(f"{path}: {ndim}D data is not supported, need 3D")
    if datatype not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype {datatype}")

    dims = tuple(dim[k] if k <= ndim else 1 for k in (1, 2, 3))
    spacing = tuple(abs(pixdim[k]) if k <= ndim and pixdim[k] > 0 else 1.0 for k in (1, 2, 3))
    meta = GridMeta(dims, spacing)
    dtype = np.dtype(end + _NIFTI_DTYPES[datatype])
    nbytes = meta.n_voxels * dtype.itemsize
    offset = max(vox_offset, 348)
    if len(blob) < offset + nbytes:
        raise VolumeFormatError(f"{path}: payload shorter than {nbytes} bytes")
    flat = np.frombuffer(blob, dtype=dtype, count=meta.n_voxels, offset=offset).astype(np.float64)
    if slope not in (0.0, 1.0) or (slope == 1.0 and inter != 0.0):
        flat = flat * slope + inter
    return Volume.from_flat(meta, flat)


def write_nifti(path, volume: Volume, datatype: int = 16) -> None:
    """Minimal NIfTI-1 writer, used for fixtures and interchange."""
    dtype = np.dtype("<" + _NIFTI_DTYPES[datatype])
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *volume.meta.dims, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *volume.meta.spacing_mm, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    data = volume.flat().astype(dtype).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(data)


def load_any(path) -> Volume:
    """Dispatch on extension: ``.nii`` goes through the NIfTI reader."""
    if os.fspath(path).endswith(".nii"):
        return read_nifti_subset(path)
    return read_volume(path)
