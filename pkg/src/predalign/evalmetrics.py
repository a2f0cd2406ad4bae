"""Detection metrics: AP, precision/recall/F1/false-alarm rate, run statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .detector import Detection, iou_matrix

METRIC_NAMES = ("AP", "F1", "PR", "RR", "FAR")


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    flags: np.ndarray  # bool per detection, descending score order
    scores: np.ndarray  # matching scores, same order


@dataclass
class MetricsReport:
    AP: float
    F1: float
    PR: float
    RR: float
    FAR: float
    threshold: float

    def as_dict(self) -> dict:
        return asdict(self)


def _unpack(detections) -> tuple[np.ndarray, np.ndarray]:
    if len(detections) and isinstance(detections[0], Detection):
        boxes = np.array([d.box for d in detections], dtype=np.float64)
        scores = np.array([d.score for d in detections], dtype=np.float64)
        return boxes.reshape(-1, 4), scores
    boxes, scores = detections if len(detections) == 2 and not isinstance(detections, np.ndarray) else ([], [])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(scores, dtype=np.float64)


def _gt_boxes(gts) -> np.ndarray:
    if isinstance(gts, tuple):
        gts = gts[0]
    return np.asarray(gts, dtype=np.float64).reshape(-1, 4)


def match_detections(detections, gts, iou_threshold: float = 0.5) -> MatchResult:
    """Greedy score-ordered matching of one image's detections to its ground truths.

    ``detections`` is a list of :class:`Detection` or a ``(boxes, scores)``
    pair. A detection is a true positive when its best-IoU still unmatched gt
    reaches ``iou_threshold``.
    """
    boxes, scores = _unpack(detections)
    gt = _gt_boxes(gts)
    order = np.argsort(-scores, kind="stable")
    flags = np.zeros(len(order), dtype=bool)
    if len(gt) and len(order):
        ious = iou_matrix(boxes, gt)
        taken = np.zeros(len(gt), dtype=bool)
        for rank, i in enumerate(order):
            cand = np.where(taken, -1.0, ious[i])
            j = int(np.argmax(cand))
            if cand[j] >= iou_threshold:
                taken[j] = True
                flags[rank] = True
    tp = int(flags.sum())
    return MatchResult(tp, len(order) - tp, len(gt) - tp, flags, scores[order])


def pool_matches(detections_per_image, gts_per_image, iou_threshold: float = 0.5):
    """Concatenate per-image matches: ``(scores, tp_flags, n_gt)``."""
    scores, flags, n_gt = [], [], 0
    for dets, gts in zip(detections_per_image, gts_per_image):
        m = match_detections(dets, gts, iou_threshold)
        scores.append(m.scores)
        flags.append(m.flags)
        n_gt += m.tp + m.fn
    if not scores:
        return np.zeros(0), np.zeros(0, dtype=bool), n_gt
    return np.concatenate(scores), np.concatenate(flags), n_gt


def _curve_counts(scores: np.ndarray, flags: np.ndarray):
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, f = scores[order], flags[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1] if len(s) else np.zeros(0, dtype=int)
    return s[last], np.cumsum(f)[last], np.cumsum(~f)[last]


def pr_curve(scores: np.ndarray, flags: np.ndarray, n_gt: int):
    """Precision and recall at every distinct score, thresholds descending.

    Detections tying on score enter the curve together.
    """
    thresholds, tp, fp = _curve_counts(scores, flags)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / n_gt if n_gt > 0 else np.zeros(len(tp))
    return thresholds, precision, recall


def ap_from_curve(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-point interpolated area: running max of precision from the right times recall steps."""
    if len(precision) == 0:
        return 0.0
    envelope = np.maximum.accumulate(np.asarray(precision, dtype=np.float64)[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * envelope))


def ap_from_matches(scores, flags, n_gt: int) -> float:
    """All-point AP from matched detections, exact up to one final rounding.

    Counts are integers, so the area is summed as a fraction.
    """
    if n_gt <= 0:
        raise ValueError("average precision is undefined without ground truths")
    _, tp, fp = _curve_counts(scores, flags)
    area, best, prev_tp = Fraction(0), Fraction(0), 0
    envelope = []
    for t, f in zip(tp[::-1].tolist(), fp[::-1].tolist()):
        best = max(best, Fraction(t, t + f))
        envelope.append(best)
    for t, p in zip(tp.tolist(), reversed(envelope)):
        area += (t - prev_tp) * p
        prev_tp = t
    return float(area / n_gt)


def average_precision(detections_per_image, gts_per_image, iou_threshold: float = 0.5) -> float:
    """AP over detections pooled across the whole test set."""
    return ap_from_matches(*pool_matches(detections_per_image, gts_per_image, iou_threshold))


def _rates(tp: int, fp: int, fn: int) -> tuple[float, float, float, float]:
    pr = tp / (tp + fp) if tp + fp else 0.0
    rr = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * pr * rr / (pr + rr) if pr + rr > 0 else 0.0
    far = fp / (tp + fp) if tp + fp else 0.0
    return pr, rr, f1, far


def threshold_metrics(detections_per_image, gts_per_image, threshold: float, iou_threshold: float = 0.5):
    """``(PR, RR, F1, FAR)`` using only detections scoring at least ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("confidence threshold must lie in [0, 1]")
    tp = fp = fn = 0
    for dets, gts in zip(detections_per_image, gts_per_image):
        boxes, scores = _unpack(dets)
        keep = scores >= threshold
        m = match_detections((boxes[keep], scores[keep]), gts, iou_threshold)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    return _rates(tp, fp, fn)


def best_f1_operating_point(detections_per_image, gts_per_image, iou_threshold: float = 0.5) -> MetricsReport:
    """Point metrics at the score threshold maximising F1 (ties go to the higher threshold).

    Greedy matching is score-ordered, so raising the threshold never changes
    the match of a surviving detection; the sweep reads cumulative counts.
    """
    scores, flags, n_gt = pool_matches(detections_per_image, gts_per_image, iou_threshold)
    if len(scores) == 0:
        raise ValueError("best-F1 sweep needs at least one detection")
    thresholds, tp, fp = _curve_counts(scores, flags)
    k_best, best = 0, -1.0
    for k in range(len(thresholds)):  # thresholds descend, so strict > keeps the higher one on ties
        f1 = _rates(int(tp[k]), int(fp[k]), n_gt - int(tp[k]))[2]
        if f1 > best:
            k_best, best = k, f1
    pr, rr, f1, far = _rates(int(tp[k_best]), int(fp[k_best]), n_gt - int(tp[k_best]))
    ap = ap_from_matches(scores, flags, n_gt) if n_gt else 0.0
    return MetricsReport(AP=ap, F1=f1, PR=pr, RR=rr, FAR=far, threshold=float(thresholds[k_best]))


def aggregate_stats(values) -> tuple[float, float]:
    """Mean and standard error (sample std over sqrt(R)); R = 1 gives 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))
