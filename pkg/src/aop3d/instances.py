"""Per-instance crop extraction, crop preprocessing, and geometric features.

Crops carry the instance mask and the intensity under an expanded (and
border-clipped) bounding box. The two preprocessing methods either
replace the intensity with the binary mask or attenuate outside-mask
voxels by exp(-d/sigma) of their Euclidean distance to the mask.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatchError
from .volume import IntensityVolume, LabelVolume, read_volume, write_volume

DEFAULT_MARGIN = 4

FEATURE_COLUMNS = (
    "volume",
    "surface_faces",
    "bbox_z",
    "bbox_y",
    "bbox_x",
    "axis_major",
    "axis_mid",
    "axis_minor",
    "elongation",
    "sphericity",
    "mean_intensity",
    "std_intensity",
)

CSV_COLUMNS = ("image_id", "instance_id",
               "centroid_z", "centroid_y", "centroid_x") + FEATURE_COLUMNS


@dataclass(frozen=True)
class InstanceCrop:
    instance_id: int
    image_id: str
    lo: tuple[int, int, int]  # inclusive box start in the source volume
    hi: tuple[int, int, int]  # exclusive box end
    intensity: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if not self.mask.any():
            raise ValueError("crop mask is empty")
        if self.mask.shape != self.intensity.shape:
            raise ValueError("mask and intensity crops differ in shape")

    @property
    def depth(self) -> int:
        return self.mask.shape[0]


def extract_instances(
    labels: LabelVolume,
    intensity: IntensityVolume,
    margin: int = DEFAULT_MARGIN,
    image_id: str = "",
) -> list[InstanceCrop]:
    """One crop per instance, ascending id; boxes are tight bounding boxes
    expanded by `margin` and clipped at the volume border."""
    if labels.shape != intensity.shape:
        raise ShapeMismatchError(
            f"labels {labels.shape} != intensity {intensity.shape}"
        )
    if margin < 0:
        raise ValueError("margin must be >= 0")
    crops = []
    for i, sl in enumerate(ndimage.find_objects(labels.data), start=1):
        if sl is None:
            continue
        lo = tuple(max(0, s.start - margin) for s in sl)
        hi = tuple(min(n, s.stop + margin) for s, n in zip(sl, labels.shape))
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        crops.append(
            InstanceCrop(
                instance_id=i,
                image_id=image_id,
                lo=lo,
                hi=hi,
                intensity=np.array(intensity.data[box]),
                mask=np.array(labels.data[box] == i),
            )
        )
    return crops


def preprocess_crop(crop: InstanceCrop, method: str, sigma: float = 2.0) -> np.ndarray:
    """Return the preprocessed intensity of a crop (the crop is unchanged).

    "mask" replaces the intensity with the binary mask. "distance" keeps
    inside-mask voxels and multiplies each outside voxel by
    exp(-d/sigma), d being its Euclidean distance to the nearest mask
    voxel.
    """
    if method == "mask":
        return crop.mask.astype(np.float32)
    if method == "distance":
        if sigma <= 0:
            raise ValueError(f"distance method needs sigma > 0, got {sigma}")
        d = ndimage.distance_transform_edt(~crop.mask)
        return (crop.intensity * np.exp(-d / sigma)).astype(np.float32)
    raise ValueError(f"unknown preprocessing method {method!r}")


@dataclass(frozen=True)
class FeatureVector:
    volume: int
    surface_faces: int
    bbox_extent: tuple[int, int, int]
    axis_lengths: tuple[float, float, float]  # sorted descending
    elongation: float
    sphericity: float
    centroid: tuple[float, float, float]  # global (z, y, x)
    mean_intensity: float
    std_intensity: float

    def values(self) -> list[float]:
        """The 12 feature scalars in FEATURE_COLUMNS order (centroid is
        positional metadata, not a feature: features must be
        translation-invariant)."""
        return [
            float(self.volume),
            float(self.surface_faces),
            *[float(e) for e in self.bbox_extent],
            *[float(a) for a in self.axis_lengths],
            float(self.elongation),
            float(self.sphericity),
            float(self.mean_intensity),
            float(self.std_intensity),
        ]


def _surface_faces(mask: np.ndarray) -> int:
    padded = np.pad(mask, 1)
    total = 0
    for axis in range(3):
        diff = np.diff(padded.astype(np.int8), axis=axis)
        total += int(np.count_nonzero(diff))
    return total


def geometric_features(crop: InstanceCrop) -> FeatureVector:
    """Counts, principal axes and intensity moments of one instance.

    Axis lengths use the equivalent-uniform-box convention
    sqrt(12 var + 1), which returns the exact side length for axis-aligned
    boxes and stays finite for single-voxel extents.
    """
    coords = np.argwhere(crop.mask).astype(np.float64)
    n = len(coords)
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / n
    eigvals = np.sort(np.linalg.eigvalsh(cov))[::-1]
    axis_lengths = tuple(float(math.sqrt(12.0 * max(v, 0.0) + 1.0)) for v in eigvals)
    volume = int(n)
    area = _surface_faces(crop.mask)
    sphericity = (math.pi ** (1.0 / 3.0)) * (6.0 * volume) ** (2.0 / 3.0) / area
    extent = tuple(int(coords[:, a].max() - coords[:, a].min() + 1) for a in range(3))
    inside = crop.intensity[crop.mask]
    return FeatureVector(
        volume=volume,
        surface_faces=area,
        bbox_extent=extent,
        axis_lengths=axis_lengths,
        elongation=axis_lengths[0] / axis_lengths[2],
        sphericity=float(sphericity),
        centroid=tuple(float(c) for c in (coords.mean(axis=0) + np.asarray(crop.lo))),
        mean_intensity=float(inside.mean()),
        std_intensity=float(inside.std()),
    )


# ---------------------------------------------------------------------------
# on-disk crop layout: crops/<image>/<id>/{intensity.i3d, mask.i3d, meta.json}


def save_crop(crop: InstanceCrop, root) -> str:
    import json

    d = os.path.join(root, crop.image_id, str(crop.instance_id))
    os.makedirs(d, exist_ok=True)
    write_volume(IntensityVolume(np.clip(crop.intensity, 0.0, 1.0)),
                 os.path.join(d, "intensity.i3d"))
    write_volume(LabelVolume(crop.mask.astype(np.int64)),
                 os.path.join(d, "mask.i3d"))
    with open(os.path.join(d, "meta.json"), "w") as f:
        json.dump({"image_id": crop.image_id, "instance_id": crop.instance_id,
                   "lo": list(crop.lo), "hi": list(crop.hi)}, f)
    return d


def load_crop(d) -> InstanceCrop:
    import json

    with open(os.path.join(d, "meta.json")) as f:
        meta = json.load(f)
    intensity = read_volume(os.path.join(d, "intensity.i3d"))
    mask = read_volume(os.path.join(d, "mask.i3d"))
    return InstanceCrop(
        instance_id=int(meta["instance_id"]),
        image_id=str(meta["image_id"]),
        lo=tuple(meta["lo"]),
        hi=tuple(meta["hi"]),
        intensity=np.array(intensity.data),
        mask=np.array(mask.data > 0),
    )


def list_crops(root) -> list[tuple[str, int]]:
    """(image_id, instance_id) pairs found under a crop directory, in
    ascending (image, id) order."""
    out = []
    if not os.path.isdir(root):
        return out
    for image_id in sorted(os.listdir(root)):
        img_dir = os.path.join(root, image_id)
        if not os.path.isdir(img_dir):
            continue
        for name in os.listdir(img_dir):
            if name.isdigit() and os.path.isdir(os.path.join(img_dir, name)):
                out.append((image_id, int(name)))
    out.sort()
    return out


def write_features_csv(rows: list[tuple[str, int, FeatureVector]], path) -> None:
    """Feature table with the fixed, documented column order."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for image_id, instance_id, fv in rows:
            w.writerow([image_id, instance_id, *[f"{c:.17g}" for c in fv.centroid],
                        *[f"{v:.17g}" for v in fv.values()]])


def read_features_csv(path):
    """Returns (keys, matrix) where keys are (image_id, instance_id)."""
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected feature CSV columns {header}")
        keys, rows = [], []
        for row in r:
            keys.append((row[0], int(row[1])))
            rows.append([float(v) for v in row[5:]])
    return keys, np.array(rows, dtype=np.float64)
