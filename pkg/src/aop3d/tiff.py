"""Baseline TIFF 6.0 importer for grayscale microscopy stacks.

Supported subset: uncompressed, strip-organized, single-sample grayscale
pages of 8 or 16 bits, either byte order. Every page becomes one z-slice.
Anything else (compression, tiles, color) raises UnsupportedTiffError.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import TruncationError, UnsupportedTiffError, VolumeFormatError
from .volume import IntensityVolume

_TAG_WIDTH = 256
_TAG_HEIGHT = 257
_TAG_BITS = 258
_TAG_COMPRESSION = 259
_TAG_PHOTOMETRIC = 262
_TAG_STRIP_OFFSETS = 273
_TAG_SAMPLES = 277
_TAG_ROWS_PER_STRIP = 278
_TAG_STRIP_COUNTS = 279
_TILE_TAGS = (322, 323, 324, 325)

_TYPE_SIZES = {1: 1, 2: 1, 3: 2, 4: 4, 5: 8, 6: 1, 7: 1, 8: 2, 9: 4, 10: 8}


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.path = path
        if len(blob) < 8:
            raise VolumeFormatError(f"{path}: too short for a TIFF header")
        order = blob[:2]
        if order == b"II":
            self.end = "<"
        elif order == b"MM":
            self.end = ">"
        else:
            raise VolumeFormatError(f"{path}: not a TIFF file")
        (magic,) = struct.unpack(self.end + "H", blob[2:4])
        if magic != 42:
            raise VolumeFormatError(f"{path}: bad TIFF magic {magic}")

    def u16(self, off):
        return struct.unpack_from(self.end + "H", self.blob, off)[0]

    def u32(self, off):
        return struct.unpack_from(self.end + "I", self.blob, off)[0]

    def tag_values(self, type_, count, value_bytes):
        size = _TYPE_SIZES.get(type_)
        if size is None or type_ not in (1, 3, 4):
            return None  # type we never need (ASCII, RATIONAL, ...)
        total = size * count
        if total <= 4:
            data = value_bytes[:total]
        else:
            (off,) = struct.unpack(self.end + "I", value_bytes)
            if off + total > len(self.blob):
                raise TruncationError(f"{self.path}: tag data out of bounds")
            data = self.blob[off : off + total]
        fmt = {1: "B", 3: "H", 4: "I"}[type_]
        return list(struct.unpack(self.end + str(count) + fmt, data))

    def read_ifd(self, off):
        if off + 2 > len(self.blob):
            raise TruncationError(f"{self.path}: IFD offset out of bounds")
        n = self.u16(off)
        if off + 2 + 12 * n + 4 > len(self.blob):
            raise TruncationError(f"{self.path}: IFD truncated")
        tags = {}
        for i in range(n):
            base = off + 2 + 12 * i
            tag = self.u16(base)
            type_ = self.u16(base + 2)
            count = self.u32(base + 4)
            values = self.tag_values(type_, count, self.blob[base + 8 : base + 12])
            if values is not None:
                tags[tag] = values
        next_off = self.u32(off + 2 + 12 * n)
        return tags, next_off


def _first(tags, tag, default=None):
    vals = tags.get(tag)
    if not vals:
        return default
    return vals[0]


def _read_page(r: _Reader, tags, path) -> np.ndarray:
    for t in _TILE_TAGS:
        if t in tags:
            raise UnsupportedTiffError(f"{path}: tiled TIFF layout is not supported")
    compression = _first(tags, _TAG_COMPRESSION, 1)
    if compression != 1:
        raise UnsupportedTiffError(
            f"{path}: compression {compression} is not supported (only uncompressed)"
        )
    samples = _first(tags, _TAG_SAMPLES, 1)
    if samples != 1:
        raise UnsupportedTiffError(f"{path}: {samples} samples per pixel, expected grayscale")
    photometric = _first(tags, _TAG_PHOTOMETRIC, 1)
    if photometric not in (0, 1):
        raise UnsupportedTiffError(f"{path}: photometric {photometric} is not grayscale")
    bits = _first(tags, _TAG_BITS, 1)
    if bits not in (8, 16):
        raise UnsupportedTiffError(f"{path}: {bits}-bit samples, expected 8 or 16")
    width = _first(tags, _TAG_WIDTH)
    height = _first(tags, _TAG_HEIGHT)
    if not width or not height:
        raise VolumeFormatError(f"{path}: page missing width/height")
    offsets = tags.get(_TAG_STRIP_OFFSETS)
    counts = tags.get(_TAG_STRIP_COUNTS)
    if not offsets or not counts or len(offsets) != len(counts):
        raise VolumeFormatError(f"{path}: missing or inconsistent strip tables")
    data = bytearray()
    for off, cnt in zip(offsets, counts):
        if off + cnt > len(r.blob):
            raise TruncationError(f"{path}: strip data out of bounds")
        data += r.blob[off : off + cnt]
    need = width * height * (bits // 8)
    if len(data) < need:
        raise TruncationError(f"{path}: strips hold {len(data)} bytes, page needs {need}")
    dtype = np.dtype(r.end + ("u1" if bits == 8 else "u2"))
    page = np.frombuffer(bytes(data[:need]), dtype=dtype).reshape(height, width)
    page = page.astype(np.float32) / np.float32(255 if bits == 8 else 65535)
    if photometric == 0:  # WhiteIsZero stores inverted luminance
        page = np.float32(1.0) - page
    return page


def import_tiff(path) -> IntensityVolume:
    """Read a multi-page baseline grayscale TIFF as an intensity volume."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise VolumeFormatError(f"cannot read TIFF from {path}: {e}") from e
    r = _Reader(blob, path)
    off = r.u32(4)
    pages = []
    seen = set()
    while off != 0:
        if off in seen:
            raise VolumeFormatError(f"{path}: circular IFD chain")
        seen.add(off)
        tags, off = r.read_ifd(off)
        pages.append(_read_page(r, tags, path))
    if not pages:
        raise VolumeFormatError(f"{path}: no pages")
    shape0 = pages[0].shape
    for i, p in enumerate(pages):
        if p.shape != shape0:
            raise VolumeFormatError(
                f"{path}: page {i} is {p.shape}, page 0 is {shape0}"
            )
    return IntensityVolume(np.stack(pages, axis=0))
