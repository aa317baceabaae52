"""Class-agnostic average-precision evaluation of instance maps.

Protocol: predictions carry a uniform confidence, so they are ranked
deterministically by (point count descending, instance id ascending) after
removing unannotated points.  At each IoU threshold the ranking is matched
greedily — every prediction claims the unmatched ground-truth instance of
highest IoU, and counts as a true positive when that IoU meets the
threshold.  AP is the 101-point interpolated area under the resulting
precision-recall curve; the headline AP averages thresholds 0.50:0.95:0.05,
with AP50 and AP25 reported at single thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .instances import InstanceMap

IOU_THRESHOLDS = tuple(np.arange(10) * 0.05 + 0.50) + (0.25,)
RECALL_SAMPLES = np.linspace(0.0, 1.0, 101)


def instance_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Jaccard overlap of two index sets over the same cloud."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.size == 0 and gt.size == 0:
        raise DataError("instance_iou is undefined for two empty sets")
    inter = np.intersect1d(pred, gt, assume_unique=True).size
    union = pred.size + gt.size - inter
    return inter / union


@dataclass
class ThresholdResult:
    threshold: float
    tp: int
    fp: int
    n_gt: int
    precision: np.ndarray
    recall: np.ndarray
    ap: float

    def to_dict(self) -> dict:
        return {
            "threshold": round(self.threshold, 2),
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.n_gt - self.tp,
            "precision": [float(p) for p in self.precision],
            "recall": [float(r) for r in self.recall],
            "ap": self.ap,
        }


@dataclass
class APReport:
    ap: float
    ap50: float
    ap25: float
    per_threshold: list[ThresholdResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap25": self.ap25,
            "per_threshold": [t.to_dict() for t in self.per_threshold],
        }


def _interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """101-point interpolation: mean over sampled recalls of the best
    precision achieved at or beyond that recall."""
    if len(precision) == 0:
        return 0.0
    best = np.zeros(len(RECALL_SAMPLES))
    for i, r in enumerate(RECALL_SAMPLES):
        at_least = precision[recall >= r - 1e-12]
        if len(at_least):
            best[i] = at_least.max()
    return float(best.mean())


def evaluate(pred_ids: np.ndarray | InstanceMap, gt_ids: np.ndarray) -> APReport:
    """Score a predicted instance map against ground-truth instance ids.

    ``gt_ids`` uses 0 for unannotated points; those points are stripped
    from every prediction before ranking and matching.
    """
    if isinstance(pred_ids, InstanceMap):
        pred_ids = pred_ids.ids
    pred_ids = np.asarray(pred_ids)
    gt_ids = np.asarray(gt_ids)
    if pred_ids.shape != gt_ids.shape:
        raise DataError(f"prediction/GT size mismatch: {pred_ids.shape} vs {gt_ids.shape}")
    gt_instances = {int(g): np.flatnonzero(gt_ids == g) for g in np.unique(gt_ids) if g > 0}
    if not gt_instances:
        raise DataError("ground truth has no annotated instances")

    annotated = gt_ids > 0
    predictions = []
    for p in np.unique(pred_ids):
        if p <= 0:
            continue
        members = np.flatnonzero((pred_ids == p) & annotated)
        if members.size:
            predictions.append((int(p), members))
    predictions.sort(key=lambda item: (-len(item[1]), item[0]))

    gt_keys = sorted(gt_instances)
    iou = np.zeros((len(predictions), len(gt_keys)))
    for i, (_, members) in enumerate(predictions):
        for j, g in enumerate(gt_keys):
            iou[i, j] = instance_iou(members, gt_instances[g])

    results = []
    for threshold in IOU_THRESHOLDS:
        matched = np.zeros(len(gt_keys), dtype=bool)
        tp_flags = np.zeros(len(predictions), dtype=bool)
        for i in range(len(predictions)):
            open_slots = np.flatnonzero(~matched)
            if len(open_slots) == 0:
                continue
            j = open_slots[int(np.argmax(iou[i, open_slots]))]
            if iou[i, j] >= threshold:
                matched[j] = True
                tp_flags[i] = True
        tp_cum = np.cumsum(tp_flags)
        fp_cum = np.cumsum(~tp_flags)
        precision = tp_cum / (tp_cum + fp_cum) if len(predictions) else np.zeros(0)
        recall = tp_cum / len(gt_keys) if len(predictions) else np.zeros(0)
        results.append(
            ThresholdResult(
                threshold=float(threshold),
                tp=int(tp_cum[-1]) if len(predictions) else 0,
                fp=int(fp_cum[-1]) if len(predictions) else 0,
                n_gt=len(gt_keys),
                precision=precision,
                recall=recall,
                ap=_interpolated_ap(precision, recall),
            )
        )

    by_threshold = {round(r.threshold, 2): r for r in results}
    ap = float(np.mean([by_threshold[round(t, 2)].ap for t in IOU_THRESHOLDS[:-1]]))
    return APReport(
        ap=ap,
        ap50=by_threshold[0.5].ap,
        ap25=by_threshold[0.25].ap,
        per_threshold=results,
    )


def transfer_gt_labels(
    src_points: np.ndarray,
    src_ids: np.ndarray,
    dst_points: np.ndarray,
    workers: int = 1,
) -> np.ndarray:
    """Carry ground-truth ids from an original cloud onto a working cloud.

    Every source point votes for its nearest working point; each working
    point takes the majority id among its voters (ties to the smaller id)
    and 0 when nothing votes for it.
    """
    src_points = np.asarray(src_points, dtype=np.float64)
    src_ids = np.asarray(src_ids).astype(np.int64)
    if len(src_points) != len(src_ids):
        raise DataError("source points and ids differ in length")
    tree = cKDTree(np.asarray(dst_points, dtype=np.float64))
    _, nearest = tree.query(src_points, k=1, workers=workers)
    out = np.zeros(len(dst_points), dtype=np.int32)
    order = np.lexsort((src_ids, nearest))
    nearest_sorted = nearest[order]
    ids_sorted = src_ids[order]
    boundaries = np.flatnonzero(np.diff(nearest_sorted)) + 1
    for chunk_ids, dst in zip(
        np.split(ids_sorted, boundaries), nearest_sorted[np.r_[0, boundaries]]
    ):
        values, counts = np.unique(chunk_ids, return_counts=True)
        out[dst] = values[int(np.argmax(counts))]  # first max: smaller id wins ties
    return out
