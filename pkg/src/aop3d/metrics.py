"""Instance matching and the panoptic quality metrics used as objectives.

IPQ multiplies three factors, each isolating one interpretable error type:

    SQ  = mean IoU of the *union* of mapped predictions against each
          true-positive annotation (over-/undersegmentation),
    RQ  = |TP| / (|TP| + |FP|/2 + |FN|/2) (hallucinations, omissions),
    IQ  = |G| / sum of per-prediction splitting penalties, clamped to
          [0, 1] (instance splitting),
    IPQ = (k1 SQ) * (k2 RQ) * (k3 IQ).

Unlike standard PQ, the matching maps every overlapping prediction to an
annotation, so a split instance still counts as one detection but pays
for the split through IQ.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError
from .volume import LabelVolume

IQ_MODES = ("matched-predictions", "per-annotation")


@dataclass(frozen=True)
class IpqWeights:
    k1: float = 1.0
    k2: float = 1.0
    k3: float = 1.0

    def __post_init__(self):
        for name, v in (("k1", self.k1), ("k2", self.k2), ("k3", self.k3)):
            if not 0.0 <= float(v) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class MatchResult:
    """Outcome of mapping predicted instances onto annotations.

    groups maps every annotation id to the ascending list of prediction
    ids whose largest overlap is with that annotation. Predictions that
    overlap no annotation, plus the predictions of annotations that fail
    the IoU test, are false positives.
    """

    groups: dict[int, list[int]]
    tp: frozenset[int]
    fp: frozenset[int]
    fn: frozenset[int]
    union_iou: dict[int, float]
    pair_iou: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def n_annotations(self) -> int:
        return len(self.tp) + len(self.fn)

    @property
    def n_predictions(self) -> int:
        return len(self.fp) + sum(len(self.groups[g]) for g in self.tp)


def _counts(pred: np.ndarray, gt: np.ndarray):
    """Instance sizes and pairwise overlap counts between two label fields."""
    pred_ids, pred_sizes = np.unique(pred[pred > 0], return_counts=True)
    gt_ids, gt_sizes = np.unique(gt[gt > 0], return_counts=True)
    both = (pred > 0) & (gt > 0)
    overlaps: dict[tuple[int, int], int] = {}
    if both.any():
        offset = int(pred.max()) + 1
        keys, cnts = np.unique(
            gt[both].astype(np.int64) * offset + pred[both].astype(np.int64),
            return_counts=True,
        )
        for key, c in zip(keys, cnts):
            overlaps[(int(key // offset), int(key % offset))] = int(c)
    return (
        dict(zip(pred_ids.tolist(), pred_sizes.tolist())),
        dict(zip(gt_ids.tolist(), gt_sizes.tolist())),
        overlaps,
    )


def match_instances(pred: LabelVolume, gt: LabelVolume, tau: float = 0.5) -> MatchResult:
    """Map predictions to annotations and classify TP/FP/FN.

    Every prediction with nonzero annotation overlap is assigned to the
    annotation sharing the most voxels with it (ties to the lower
    annotation id). An annotation is a TP when the IoU of the union of
    its assigned predictions exceeds `tau`; otherwise it is an FN and its
    predictions become FPs.
    """
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    pred_sizes, gt_sizes, overlaps = _counts(pred.data, gt.data)

    best_gt: dict[int, tuple[int, int]] = {}  # pred id -> (overlap, gt id)
    for (g, p), c in overlaps.items():
        cur = best_gt.get(p)
        if cur is None or c > cur[0] or (c == cur[0] and g < cur[1]):
            best_gt[p] = (c, g)

    groups: dict[int, list[int]] = {g: [] for g in gt_sizes}
    for p in sorted(best_gt):
        groups[best_gt[p][1]].append(p)

    tp, fn, fp = set(), set(), set(pred_sizes) - set(best_gt)
    union_iou: dict[int, float] = {}
    pair_iou: dict[tuple[int, int], float] = {}
    for g, preds in groups.items():
        inter = sum(overlaps[(g, p)] for p in preds)
        union = sum(pred_sizes[p] for p in preds) + gt_sizes[g] - inter
        iou = inter / union if union else 0.0
        union_iou[g] = iou
        for p in preds:
            pair_iou[(g, p)] = overlaps[(g, p)] / (
                pred_sizes[p] + gt_sizes[g] - overlaps[(g, p)]
            )
        if preds and iou > tau:
            tp.add(g)
        else:
            fn.add(g)
            fp.update(preds)

    return MatchResult(
        groups=groups,
        tp=frozenset(tp),
        fp=frozenset(fp),
        fn=frozenset(fn),
        union_iou=union_iou,
        pair_iou=pair_iou,
    )


@dataclass(frozen=True)
class IpqReport:
    sq: float
    rq: float
    iq: float
    ipq: float
    pq: float
    counts: dict[str, int]
    iq_mode: str

    def to_json(self) -> dict:
        return {
            "sq": self.sq,
            "rq": self.rq,
            "iq": self.iq,
            "ipq": self.ipq,
            "pq": self.pq,
            "counts": dict(self.counts),
        }


def _iq(m: MatchResult, iq_mode: str) -> float:
    n_gt = m.n_annotations
    if iq_mode == "matched-predictions":
        # Each prediction mapped to a TP annotation contributes
        # max(1, group size - 1); FPs are excluded so IQ stays a pure
        # splitting penalty.
        denom = sum(len(m.groups[g]) * max(1, len(m.groups[g]) - 1) for g in m.tp)
    elif iq_mode == "per-annotation":
        denom = sum(max(1, len(m.groups.get(g, [])) - 1)
                    for g in (m.tp | m.fn))
    else:
        raise ValueError(f"iq_mode must be one of {IQ_MODES}, got {iq_mode!r}")
    if denom == 0:
        return 1.0
    return min(1.0, n_gt / denom)


def _pq_from_match(m: MatchResult, tau: float) -> float:
    """Standard PQ on the same volumes: one-to-one IoU>tau pairs.

    tau >= 0.5 makes the matching provably unique, so scanning the
    max-overlap pairs recorded during matching finds every such pair.
    """
    tau = max(tau, 0.5)
    matched: dict[int, tuple[float, int]] = {}  # gt -> (iou, pred)
    for (g, p), iou in m.pair_iou.items():
        if iou > tau:
            cur = matched.get(g)
            if cur is None or iou > cur[0] or (iou == cur[0] and p < cur[1]):
                matched[g] = (iou, p)
    n_tp = len(matched)
    n_fn = m.n_annotations - n_tp
    n_fp = m.n_predictions - n_tp
    if m.n_annotations == 0 and m.n_predictions == 0:
        return 1.0
    denom = n_tp + 0.5 * n_fp + 0.5 * n_fn
    if denom == 0:
        return 0.0
    return sum(iou for iou, _ in matched.values()) / denom


def compute_ipq(
    m: MatchResult,
    k: IpqWeights = IpqWeights(),
    iq_mode: str = "matched-predictions",
    tau: float = 0.5,
) -> IpqReport:
    """Score a match result. `tau` is only used for the PQ side report."""
    n_gt, n_pred = m.n_annotations, m.n_predictions
    if n_gt == 0 and n_pred == 0:
        sq = rq = iq = 1.0
    elif n_gt == 0:
        sq, iq, rq = 1.0, 1.0, 0.0
    else:
        sq = (
            float(np.mean([m.union_iou[g] for g in sorted(m.tp)])) if m.tp else 0.0
        )
        rq = len(m.tp) / (len(m.tp) + 0.5 * len(m.fp) + 0.5 * len(m.fn))
        iq = _iq(m, iq_mode)
    ipq = (k.k1 * sq) * (k.k2 * rq) * (k.k3 * iq)
    return IpqReport(
        sq=sq,
        rq=rq,
        iq=iq,
        ipq=ipq,
        pq=_pq_from_match(m, tau),
        counts={
            "tp": len(m.tp),
            "fp": len(m.fp),
            "fn": len(m.fn),
            "n_gt": n_gt,
            "n_pred": n_pred,
        },
        iq_mode=iq_mode,
    )


def evaluate_ipq(
    pred: LabelVolume,
    gt: LabelVolume,
    tau: float = 0.5,
    k: IpqWeights = IpqWeights(),
    iq_mode: str = "matched-predictions",
) -> IpqReport:
    """Match and score in one step."""
    return compute_ipq(match_instances(pred, gt, tau), k, iq_mode, tau)


def compute_pq(pred: LabelVolume, gt: LabelVolume, tau: float = 0.5) -> float:
    """Standard panoptic quality: one-to-one matching of IoU>tau pairs."""
    if not 0.5 <= tau < 1.0:
        raise ValueError(f"PQ requires tau in [0.5, 1), got {tau}")
    return _pq_from_match(match_instances(pred, gt, tau), tau)
