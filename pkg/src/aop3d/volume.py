"""Dense 3D volume types, the `.i3d` container format, and voxel labeling helpers.

Volumes are stored in (z, y, x) axis order, C-contiguous with z slowest,
matching slice-stack acquisition. Instances of both volume types are
immutable after construction and safe to share between threads.

`.i3d` layout: 8 magic bytes, a little-endian u32 header length, a UTF-8
JSON header (dtype, shape, spacing, kind), then the raw little-endian
C-order payload. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatchError, TruncationError, VolumeFormatError

MAGIC = b"I3DVOL\x00\x01"

_DTYPES = {"u8": np.uint8, "u16": np.uint16, "u32": np.uint32, "f32": np.float32}
_DTYPE_MAX = {"u8": 255, "u16": 65535, "u32": 4294967295}


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _check_shape_spacing(shape, spacing):
    if len(shape) != 3 or any(int(s) < 1 for s in shape):
        raise ValueError(f"shape must be three positive extents, got {shape!r}")
    if len(spacing) != 3 or any(float(s) <= 0 for s in spacing):
        raise ValueError(f"spacing must be three positive sizes, got {spacing!r}")


@dataclass(frozen=True)
class IntensityVolume:
    """Scalar volume with values normalized to [0, 1]."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        _check_shape_spacing(data.shape, self.spacing)
        if data.size and (float(data.min()) < 0.0 or float(data.max()) > 1.0):
            raise ValueError("intensity values must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume:
    """Instance id volume: 0 is background, positive ids are instances."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise ValueError(f"label data must be integer, got {data.dtype}")
        data = data.astype(np.int64, copy=False)
        _check_shape_spacing(data.shape, self.spacing)
        if data.size and int(data.min()) < 0:
            raise ValueError("label ids must be non-negative")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def ids(self) -> np.ndarray:
        """Sorted array of instance ids present (background excluded)."""
        u = np.unique(self.data)
        return u[u > 0]

    @property
    def n_instances(self) -> int:
        return int(self.ids().size)

    def relabel_consecutive(self) -> "LabelVolume":
        """Map instance ids to 1..n (ascending original id order)."""
        ids = self.ids()
        if ids.size == 0:
            return self
        lut = np.zeros(int(ids[-1]) + 1, dtype=np.int64)
        lut[ids] = np.arange(1, ids.size + 1)
        return LabelVolume(lut[self.data], self.spacing)


@dataclass(frozen=True)
class VolumeHeader:
    dtype: str
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    kind: str  # "intensity" | "label"
    magic: bytes = field(default=MAGIC)

    def to_json(self) -> str:
        return json.dumps(
            {
                "dtype": self.dtype,
                "shape": list(self.shape),
                "spacing": list(self.spacing),
                "kind": self.kind,
            }
        )

    @staticmethod
    def from_json(text: str) -> "VolumeHeader":
        try:
            h = json.loads(text)
            dtype = h["dtype"]
            shape = tuple(int(s) for s in h["shape"])
            spacing = tuple(float(s) for s in h["spacing"])
            kind = h["kind"]
        except (ValueError, KeyError, TypeError) as e:
            raise VolumeFormatError(f"malformed volume header: {e}") from e
        if dtype not in _DTYPES:
            raise VolumeFormatError(f"unknown dtype {dtype!r}")
        if kind not in ("intensity", "label"):
            raise VolumeFormatError(f"unknown volume kind {kind!r}")
        if len(shape) != 3:
            raise VolumeFormatError(f"shape must have three axes, got {shape!r}")
        return VolumeHeader(dtype=dtype, shape=shape, spacing=spacing, kind=kind)


def _label_dtype(max_id: int) -> str:
    if max_id <= _DTYPE_MAX["u8"]:
        return "u8"
    if max_id <= _DTYPE_MAX["u16"]:
        return "u16"
    if max_id <= _DTYPE_MAX["u32"]:
        return "u32"
    raise ValueError(f"label id {max_id} exceeds u32 range")


def write_volume(v: IntensityVolume | LabelVolume, path) -> None:
    """Write a volume as a single `.i3d` file.

    Intensity volumes are stored as f32 (their raw [0,1] values); label
    volumes use the smallest unsigned dtype that holds the largest id.
    """
    if isinstance(v, IntensityVolume):
        dtype, kind = "f32", "intensity"
        payload = v.data.astype("<f4")
    elif isinstance(v, LabelVolume):
        max_id = int(v.data.max()) if v.data.size else 0
        dtype, kind = _label_dtype(max_id), "label"
        payload = v.data.astype("<" + {"u8": "u1", "u16": "u2", "u32": "u4"}[dtype])
    else:
        raise TypeError(f"not a volume: {type(v)}")
    header = VolumeHeader(dtype=dtype, shape=v.shape, spacing=v.spacing, kind=kind)
    hbytes = header.to_json().encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(hbytes)))
            f.write(hbytes)
            f.write(payload.tobytes(order="C"))
    except OSError as e:
        raise VolumeFormatError(f"cannot write volume to {path}: {e}") from e


def read_volume(path) -> IntensityVolume | LabelVolume:
    """Read an `.i3d` file written by `write_volume`.

    Integer intensity payloads are rescaled to [0,1] by their dtype
    maximum; f32 payloads are taken as-is.
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise VolumeFormatError(f"cannot read volume from {path}: {e}") from e
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise VolumeFormatError(f"{path}: not an i3d volume (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise TruncationError(f"{path}: header truncated")
    header = VolumeHeader.from_json(blob[12 : 12 + hlen].decode("utf-8"))
    z, y, x = header.shape
    itemsize = np.dtype(_DTYPES[header.dtype]).itemsize
    need = z * y * x * itemsize
    payload = blob[12 + hlen :]
    if len(payload) < need:
        raise TruncationError(
            f"{path}: payload has {len(payload)} bytes, header promises {need}"
        )
    raw = np.frombuffer(payload[:need], dtype="<" + {"u8": "u1", "u16": "u2",
                                                     "u32": "u4", "f32": "f4"}[header.dtype])
    data = raw.reshape(header.shape)
    if header.kind == "label":
        if header.dtype == "f32":
            raise VolumeFormatError(f"{path}: label volume with float payload")
        return LabelVolume(data.astype(np.int64), header.spacing)
    if header.dtype == "f32":
        values = data.astype(np.float32)
    else:
        values = data.astype(np.float32) / np.float32(_DTYPE_MAX[header.dtype])
    return IntensityVolume(values, header.spacing)


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return _STRUCTURES[connectivity]


def label_components(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Label connected foreground regions of a boolean array, ids in scan order."""
    labeled, n = ndimage.label(mask, structure=connectivity_structure(connectivity))
    if n == 0:
        return labeled.astype(np.int64)
    # Renumber so that component k is the k-th one encountered in C-order scan:
    # scipy does not guarantee this, so enforce it via first-occurrence indices.
    flat = labeled.ravel()
    ids, first = np.unique(flat, return_index=True)
    nz = ids > 0
    order = np.argsort(first[nz], kind="stable")
    lut = np.zeros(int(ids.max()) + 1, dtype=np.int64)
    lut[ids[nz][order]] = np.arange(1, nz.sum() + 1)
    return lut[labeled]


def connected_components(mask: LabelVolume | np.ndarray, connectivity: int = 26) -> LabelVolume:
    """Connected-component labeling of a {0,1} mask volume."""
    if isinstance(mask, LabelVolume):
        data, spacing = mask.data, mask.spacing
    else:
        data, spacing = np.asarray(mask), (1.0, 1.0, 1.0)
    if data.size and int(data.max()) > 1:
        raise ValueError("connected_components expects a {0,1} mask")
    return LabelVolume(label_components(data > 0, connectivity), spacing)
