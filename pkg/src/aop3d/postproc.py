"""Label-volume postprocessing: spherical-SE morphology, watershed
splitting, and adjacency-graph merging.

Each of the three categories is controlled by the parameters below and is
skipped entirely (voxel-exact no-op) when all of its parameters are zero:

    theta_ed in [-10, 10]  erosion (negative) / dilation (positive) radius
    theta_co in [-5, 5]    opening (negative) / closing (positive) radius
    theta_mc, theta_ms, theta_mr in [0, 1]   merge feature weights
    theta_ssigma, theta_st in [0, 1]         watershed smoothing / quantile

Structuring elements are Euclidean balls (voxels within distance <= r);
out-of-volume voxels count as background for both erosion and dilation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.segmentation import watershed

from .errors import ParameterError
from .volume import LabelVolume, connectivity_structure, label_components

MERGE_SCORE_THRESHOLD = 0.5
SIGMA_SCALE = 4.0  # voxel sigma = SIGMA_SCALE * theta_ssigma
ADJACENCY_CHEBYSHEV = 2  # instances within this Chebyshev distance are graph neighbors


@dataclass(frozen=True)
class PostprocParams:
    theta_ed: int = 0
    theta_co: int = 0
    theta_mc: float = 0.0
    theta_ms: float = 0.0
    theta_mr: float = 0.0
    theta_ssigma: float = 0.0
    theta_st: float = 0.0

    def __post_init__(self):
        for name, lo, hi in (("theta_ed", -10, 10), ("theta_co", -5, 5)):
            v = getattr(self, name)
            if not float(v).is_integer():
                raise ParameterError(f"{name} must be an integer, got {v}")
            if not lo <= int(v) <= hi:
                raise ParameterError(f"{name} must be in [{lo}, {hi}], got {v}")
        for name in ("theta_mc", "theta_ms", "theta_mr", "theta_ssigma", "theta_st"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {v}")
        object.__setattr__(self, "theta_ed", int(self.theta_ed))
        object.__setattr__(self, "theta_co", int(self.theta_co))

    def to_json(self) -> dict:
        return {
            "theta_ed": self.theta_ed,
            "theta_co": self.theta_co,
            "theta_mc": float(self.theta_mc),
            "theta_ms": float(self.theta_ms),
            "theta_mr": float(self.theta_mr),
            "theta_ssigma": float(self.theta_ssigma),
            "theta_st": float(self.theta_st),
        }

    @staticmethod
    def from_json(d: dict) -> "PostprocParams":
        return PostprocParams(**{k: d[k] for k in (
            "theta_ed", "theta_co", "theta_mc", "theta_ms", "theta_mr",
            "theta_ssigma", "theta_st") if k in d})


@dataclass(frozen=True)
class AdjacencyEdge:
    """Merge-graph edge between instances a < b with its features."""

    a: int
    b: int
    f_c: float  # contour continuity of 1D profiles across the interface
    f_s: float  # connecting-surface smoothness (plane-fit residual)
    f_r: float  # contact area relative to the smaller instance's surface

    def score(self, w_c: float, w_s: float, w_r: float) -> float:
        return w_c * self.f_c + w_s * self.f_s + w_r * self.f_r


def dilate_ball(mask: np.ndarray, r: int) -> np.ndarray:
    """Binary dilation with a Euclidean ball of radius r."""
    if r <= 0 or not mask.any():
        return mask.copy()
    d = ndimage.distance_transform_edt(~mask)
    return mask | (d <= r)


def erode_ball(mask: np.ndarray, r: int) -> np.ndarray:
    """Binary erosion with a Euclidean ball of radius r (outside = background)."""
    if r <= 0:
        return mask.copy()
    padded = np.pad(mask, 1, constant_values=False)
    d = ndimage.distance_transform_edt(padded)
    return (d > r)[1:-1, 1:-1, 1:-1]


def _nearest_instance(labels: np.ndarray, grown: np.ndarray) -> np.ndarray:
    """Assign each voxel of `grown` the id of the nearest original instance.

    Ties go to the lower id; exact because per-instance EDT distances are
    square roots of equal integers whenever tied.
    """
    out = np.zeros(labels.shape, dtype=np.int64)
    best = np.full(labels.shape, np.inf)
    for i in np.unique(labels[labels > 0]):
        d = ndimage.distance_transform_edt(labels != i)
        closer = grown & (d < best)
        out[closer] = i
        best = np.where(closer, d, best)
    return out


def apply_morphology(labels: LabelVolume, theta_ed: int, theta_co: int) -> LabelVolume:
    """Erode/dilate then open/close the union mask, remapping labels.

    Grown voxels take the label of the nearest original instance; removed
    voxels become background. Fragments produced by erosion keep their
    original id (splitting is a separate stage).
    """
    params = PostprocParams(theta_ed=theta_ed, theta_co=theta_co)
    if params.theta_ed == 0 and params.theta_co == 0:
        return labels
    mask = labels.data > 0
    if params.theta_ed > 0:
        mask = dilate_ball(mask, params.theta_ed)
    elif params.theta_ed < 0:
        mask = erode_ball(mask, -params.theta_ed)
    if params.theta_co > 0:
        mask = erode_ball(dilate_ball(mask, params.theta_co), params.theta_co)
    elif params.theta_co < 0:
        mask = dilate_ball(erode_ball(mask, -params.theta_co), -params.theta_co)
    out = np.where(mask, labels.data, 0)
    grown = mask & (labels.data == 0)
    if grown.any() and (labels.data > 0).any():
        out = np.where(grown, _nearest_instance(labels.data, grown), out)
    return LabelVolume(out, labels.spacing)


def _instance_slices(labels: np.ndarray):
    objects = ndimage.find_objects(labels)
    for i, sl in enumerate(objects, start=1):
        if sl is not None:
            yield i, sl


def _pad_slices(sl, shape, pad):
    return tuple(
        slice(max(0, s.start - pad), min(n, s.stop + pad)) for s, n in zip(sl, shape)
    )


def split_instances(
    labels: LabelVolume, theta_ssigma: float, theta_st: float, connectivity: int = 26
) -> LabelVolume:
    """Watershed-based instance splitting.

    Per instance: Euclidean distance to the instance boundary is smoothed
    with sigma = 4*theta_ssigma; voxels at or above the theta_st-quantile
    of the positive smoothed distances seed the markers; two or more
    markers trigger a watershed on the negated smoothed distance. The
    union foreground mask is never changed.
    """
    p = PostprocParams(theta_ssigma=theta_ssigma, theta_st=theta_st)
    if p.theta_ssigma == 0.0 and p.theta_st == 0.0:
        return labels
    data = labels.data
    out = np.zeros_like(data)
    structure = connectivity_structure(connectivity)
    next_id = 1
    for i, sl in _instance_slices(data):
        box = _pad_slices(sl, data.shape, 1)
        m = data[box] == i
        dt = ndimage.distance_transform_edt(np.pad(m, 1))[1:-1, 1:-1, 1:-1]
        sigma = SIGMA_SCALE * p.theta_ssigma
        sdt = ndimage.gaussian_filter(dt, sigma, mode="constant", cval=0.0) if sigma > 0 else dt
        vals = sdt[m]
        pos = vals[vals > 0]
        if pos.size == 0:
            markers = m.astype(np.int64)
            n_markers = 1
        else:
            q = float(np.quantile(pos, p.theta_st))
            markers, n_markers = ndimage.label(m & (sdt >= q), structure=structure)
        # every connected part needs a marker or watershed would drop it
        parts, n_parts = ndimage.label(m, structure=structure)
        for part in range(1, n_parts + 1):
            part_mask = parts == part
            if not markers[part_mask].any():
                flat = np.where(part_mask.ravel(), sdt.ravel(), -np.inf)
                n_markers += 1
                markers.ravel()[int(np.argmax(flat))] = n_markers
        if n_markers >= 2:
            seg = watershed(-sdt, markers=markers, mask=m,
                            connectivity=np.ones((3, 3, 3), dtype=bool))
            for k in range(1, n_markers + 1):
                region = seg == k
                if region.any():
                    out[box][region] = next_id
                    next_id += 1
        else:
            out[box][m] = next_id
            next_id += 1
    return LabelVolume(out, labels.spacing)


_AXIS_OFFSETS = [
    (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
]


def _shifted_equal(data: np.ndarray, value: int, offset, fill=0) -> np.ndarray:
    """Boolean array: data[v + offset] == value (out of bounds -> fill)."""
    out = np.full(data.shape, fill == value, dtype=bool)
    src = []
    dst = []
    for o, n in zip(offset, data.shape):
        if o >= 0:
            src.append(slice(o, n))
            dst.append(slice(0, n - o))
        else:
            src.append(slice(0, n + o))
            dst.append(slice(-o, n))
    out[tuple(dst)] = data[tuple(src)] == value
    return out


def _surface_faces(mask: np.ndarray) -> int:
    """Exposed voxel faces at 6-connectivity (volume border counts as exposed)."""
    total = 0
    for off in _AXIS_OFFSETS:
        neighbor_fg = _shifted_equal(mask.view(np.uint8), 1, off, fill=0)
        total += int(np.count_nonzero(mask & ~neighbor_fg))
    return total


def _contact_pairs(data: np.ndarray, a: int, b: int):
    """Contact faces between a and b: axis-aligned voxel pairs at distance
    1, or at distance 2 with a background voxel in between. Returns the
    pair count and the 3D midpoints of the pairs."""
    count = 0
    midpoints = []
    is_a = data == a
    for off in _AXIS_OFFSETS:
        touching = is_a & _shifted_equal(data, b, off)
        if touching.any():
            pts = np.argwhere(touching).astype(np.float64)
            midpoints.append(pts + 0.5 * np.asarray(off))
            count += len(pts)
        off2 = tuple(2 * o for o in off)
        gap = is_a & _shifted_equal(data, b, off2) & _shifted_equal(data, 0, off)
        if gap.any():
            pts = np.argwhere(gap).astype(np.float64)
            midpoints.append(pts + np.asarray(off))
            count += len(pts)
    if midpoints:
        return count, np.concatenate(midpoints, axis=0)
    return 0, np.zeros((0, 3))


def _plane_rms(points: np.ndarray) -> float:
    """RMS distance of points to their least-squares plane."""
    if len(points) < 3:
        return 0.0
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    eigvals = np.linalg.eigvalsh(cov)
    return float(np.sqrt(max(eigvals[0], 0.0)))


def _profile_continuous(data: np.ndarray, a: int, b: int, origin: np.ndarray,
                        direction: np.ndarray, half_len: int = 6) -> bool:
    """Sample the a|b union mask along a line; continuity holds when the
    line touches both instances with no background run longer than one
    voxel between its first and last foreground hits."""
    ts = np.arange(-half_len, half_len + 1, dtype=np.float64)
    pts = origin[None, :] + ts[:, None] * direction[None, :]
    idx = np.rint(pts).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(data.shape)), axis=1)
    values = np.zeros(len(ts), dtype=np.int64)
    values[inside] = data[tuple(idx[inside].T)]
    hits_a = values == a
    hits_b = values == b
    if not hits_a.any() or not hits_b.any():
        return False
    fg = hits_a | hits_b
    lo, hi = int(np.argmax(fg)), len(fg) - 1 - int(np.argmax(fg[::-1]))
    run = longest = 0
    for v in fg[lo : hi + 1]:
        run = 0 if v else run + 1
        longest = max(longest, run)
    return longest <= 1


def _orthonormal_frame(u: np.ndarray):
    ref = np.zeros(3)
    ref[int(np.argmin(np.abs(u)))] = 1.0
    v = np.cross(u, ref)
    v /= np.linalg.norm(v)
    w = np.cross(u, v)
    return v, w


def compute_merge_edges(labels: LabelVolume) -> list[AdjacencyEdge]:
    """Adjacency graph over instance pairs within Chebyshev distance <= 2,
    with the three merge features evaluated per edge."""
    data = labels.data
    ids = [i for i, _ in _instance_slices(data)]
    if len(ids) < 2:
        return []
    surfaces = {}
    centroids = {}
    pairs = set()
    cheb = ADJACENCY_CHEBYSHEV
    size = 2 * cheb + 1
    for i, sl in _instance_slices(data):
        box = _pad_slices(sl, data.shape, cheb)
        m = data[box] == i
        surfaces[i] = _surface_faces(m)
        centroids[i] = np.argwhere(m).mean(axis=0) + np.array(
            [s.start for s in box], dtype=np.float64
        )
        near = ndimage.binary_dilation(m, structure=np.ones((size,) * 3, dtype=bool))
        for j in np.unique(data[box][near]):
            if j > 0 and j != i:
                pairs.add((min(i, int(j)), max(i, int(j))))
    edges = []
    for a, b in sorted(pairs):
        n_contact, midpoints = _contact_pairs(data, a, b)
        f_r = min(1.0, n_contact / min(surfaces[a], surfaces[b])) if n_contact else 0.0
        f_s = (1.0 - min(1.0, _plane_rms(midpoints) / 2.0)) if n_contact else 0.0
        delta = centroids[b] - centroids[a]
        norm = float(np.linalg.norm(delta))
        if norm < 1e-9:
            f_c = 0.0
        else:
            u = delta / norm
            v, w = _orthonormal_frame(u)
            origin = midpoints.mean(axis=0) if n_contact else (centroids[a] + centroids[b]) / 2.0
            passed = 0
            for dv in (-1.0, 0.0, 1.0):
                for dw in (-1.0, 0.0, 1.0):
                    if _profile_continuous(data, a, b, origin + dv * v + dw * w, u):
                        passed += 1
            f_c = passed / 9.0
        edges.append(AdjacencyEdge(a=a, b=b, f_c=f_c, f_s=f_s, f_r=f_r))
    return edges


class _UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the lower id as the representative
            lo, hi = min(ra, rb), max(ra, rb)
            self.parent[hi] = lo


def merge_instances(
    labels: LabelVolume, theta_mc: float, theta_ms: float, theta_mr: float
) -> LabelVolume:
    """Merge adjacent instances whose weighted feature score exceeds 0.5.

    Merging is transitive (union-find); merged groups take the lowest
    member id and the result is relabeled to consecutive ids.
    """
    p = PostprocParams(theta_mc=theta_mc, theta_ms=theta_ms, theta_mr=theta_mr)
    if p.theta_mc == 0.0 and p.theta_ms == 0.0 and p.theta_mr == 0.0:
        return labels
    edges = compute_merge_edges(labels)
    ids = labels.ids().tolist()
    uf = _UnionFind(ids)
    for e in edges:
        if e.score(p.theta_mc, p.theta_ms, p.theta_mr) > MERGE_SCORE_THRESHOLD:
            uf.union(e.a, e.b)
    if all(uf.find(i) == i for i in ids):
        return labels
    lut = np.zeros(int(max(ids)) + 1, dtype=np.int64)
    for i in ids:
        lut[i] = uf.find(i)
    return LabelVolume(lut[labels.data], labels.spacing).relabel_consecutive()


def apply_postprocessing(labels: LabelVolume, params: PostprocParams) -> LabelVolume:
    """Morphology, merging and splitting in fixed order, each skipped when
    all of its parameters are zero; output ids are consecutive."""
    out = apply_morphology(labels, params.theta_ed, params.theta_co)
    out = merge_instances(out, params.theta_mc, params.theta_ms, params.theta_mr)
    out = split_instances(out, params.theta_ssigma, params.theta_st)
    return out.relabel_consecutive()
