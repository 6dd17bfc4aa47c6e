"""Segmentation scoring: region similarity, contour accuracy, DAVIS-style
aggregation, and multi-label matching protocols."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment


@dataclass
class MetricReport:
    metric: str
    per_frame: np.ndarray
    mean: float
    recall: float
    decay: float


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection-over-union of two binary masks; both empty scores 1."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("mask dimensions differ")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def default_boundary_tol(height: int, width: int) -> int:
    """0.8% of the image diagonal, rounded up (benchmark convention)."""
    return int(np.ceil(0.008 * np.hypot(height, width)))


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbor of different value; outside counts
    as background, so the mask rim at the image border is boundary too."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    inner = (padded[1:-1, :-2] & padded[1:-1, 2:] &
             padded[:-2, 1:-1] & padded[2:, 1:-1])
    return mask & ~inner


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol: int | None = None) -> float:
    """Contour F-measure: boundary precision/recall within tol pixels."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("mask dimensions differ")
    if tol is None:
        tol = default_boundary_tol(*pred.shape)
    pb = _boundary(pred)
    gb = _boundary(gt)
    np_, ng = pb.sum(), gb.sum()
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~gb)
    dist_to_pred = ndimage.distance_transform_edt(~pb)
    precision = float((dist_to_gt[pb] <= tol).mean())
    recall = float((dist_to_pred[gb] <= tol).mean())
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def davis_aggregate(per_frame, metric: str = "J") -> MetricReport:
    """Mean / Recall / Decay aggregation of per-frame scores.

    Recall counts scores strictly greater than 0.5. Decay compares the
    first and last index quartiles (ceil split) of the frame sequence.
    """
    scores = np.asarray(list(per_frame), dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no scores to aggregate")
    q = int(np.ceil(scores.size / 4))
    return MetricReport(metric=metric, per_frame=scores,
                        mean=float(scores.mean()),
                        recall=float((scores > 0.5).mean()),
                        decay=float(scores[:q].mean() - scores[-q:].mean()))


def _frames_with_gt(pred_frames, gt_frames):
    if len(pred_frames) != len(gt_frames):
        raise ValueError("sequences have different lengths")
    for p, g in zip(pred_frames, gt_frames):
        if g is None:
            continue
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ValueError("frame dimensions differ")
        yield p, g


def select_foreground_subset(pred_frames, gt_frames, labels=None):
    """Exhaustive foreground label-subset selection against a binary gt.

    Scores every nonempty proper subset of the predicted labels by summed
    per-frame IoU of the subset union against the gt (frames without gt
    skipped); ties prefer smaller subsets, then lexicographic order.
    Returns (subset, binary_frames).
    """
    if labels is None:
        labels = sorted({int(l) for p in pred_frames if p is not None
                         for l in np.unique(p)})
    if len(labels) > 8:
        raise ValueError("exhaustive search limited to 8 labels")
    pairs = list(_frames_with_gt(pred_frames, gt_frames))
    best = None
    for size in range(1, len(labels)):
        for subset in itertools.combinations(labels, size):
            score = sum(jaccard(np.isin(p, subset), g > 0) for p, g in pairs)
            if best is None or score > best[0] + 1e-12:
                best = (score, subset)
    if best is None:
        raise ValueError("need at least two labels to split")
    subset = best[1]
    binary = [None if p is None or g is None else np.isin(p, subset)
              for p, g in zip(pred_frames, gt_frames)]
    return set(subset), binary


def _frame_iou_matrix(pred_frames, gt_frames, pred_labels, gt_labels):
    """Mean per-frame IoU for every (gt, pred) label pair.

    For a gt label the mean runs over frames where that label is present.
    Returns (matrix (n_gt, n_pred), per-pair per-frame lists).
    """
    sums = np.zeros((len(gt_labels), len(pred_labels)))
    counts = np.zeros(len(gt_labels))
    per_frame = [[[] for _ in pred_labels] for _ in gt_labels]
    for p, g in _frames_with_gt(pred_frames, gt_frames):
        for a, gl in enumerate(gt_labels):
            gmask = g == gl
            if not gmask.any():
                continue
            counts[a] += 1
            for b, pl in enumerate(pred_labels):
                v = jaccard(p == pl, gmask)
                sums[a, b] += v
                per_frame[a][b].append(v)
    with np.errstate(invalid="ignore"):
        mat = np.where(counts[:, None] > 0, sums / np.maximum(counts[:, None], 1), 0.0)
    return mat, per_frame, counts


def _pooled_iou_matrix(pred_frames, gt_frames, pred_labels, gt_labels):
    """Sequence-level (pooled-pixel) IoU for every (gt, pred) label pair."""
    inter = np.zeros((len(gt_labels), len(pred_labels)))
    union = np.zeros((len(gt_labels), len(pred_labels)))
    for p, g in _frames_with_gt(pred_frames, gt_frames):
        for a, gl in enumerate(gt_labels):
            gmask = g == gl
            for b, pl in enumerate(pred_labels):
                pmask = p == pl
                inter[a, b] += np.logical_and(pmask, gmask).sum()
                union[a, b] += np.logical_or(pmask, gmask).sum()
    with np.errstate(invalid="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def hungarian_sequence_match(pred_frames, gt_frames, tol: int | None = None):
    """Official-style multi-mask scoring with one-to-one label assignment.

    Non-background (nonzero) labels are matched by maximizing total
    sequence-level pooled IoU; unmatched gt labels score 0. Per gt label,
    J and F are per-frame means over frames where the label appears, then
    averaged over gt labels. Returns (mapping, report dict with J, F, J&F).
    """
    gt_labels = sorted({int(l) for g in gt_frames if g is not None
                        for l in np.unique(g) if l != 0})
    pred_labels = sorted({int(l) for p in pred_frames if p is not None
                          for l in np.unique(p) if l != 0})
    if len(gt_labels) > 32 or len(pred_labels) > 32:
        raise ValueError("label counts above 32 are not supported")
    if not gt_labels:
        return {}, {"J": 1.0, "F": 1.0, "J&F": 1.0}
    mapping = {}
    if pred_labels:
        iou = _pooled_iou_matrix(pred_frames, gt_frames, pred_labels, gt_labels)
        rows, cols = linear_sum_assignment(-iou)
        mapping = {gt_labels[a]: pred_labels[b] for a, b in zip(rows, cols)}
    j_scores, f_scores = [], []
    for gl in gt_labels:
        pl = mapping.get(gl)
        js, fs = [], []
        for p, g in _frames_with_gt(pred_frames, gt_frames):
            gmask = g == gl
            if not gmask.any():
                continue
            pmask = np.zeros_like(gmask) if pl is None else (p == pl)
            js.append(jaccard(pmask, gmask))
            fs.append(boundary_f(pmask, gmask, tol))
        j_scores.append(float(np.mean(js)) if js else 0.0)
        f_scores.append(float(np.mean(fs)) if fs else 0.0)
    j = float(np.mean(j_scores))
    f = float(np.mean(f_scores))
    return mapping, {"J": j, "F": f, "J&F": 0.5 * (j + f)}


def bootstrap_iou(pred_frames, gt_frames) -> float:
    """Frame-level many-to-one matching: each gt segment (background
    included) takes the predicted label of highest IoU in that frame;
    the score is the mean over all (gt segment, frame) pairs."""
    scores = []
    for p, g in _frames_with_gt(pred_frames, gt_frames):
        pred_labels = np.unique(p)
        for gl in np.unique(g):
            gmask = g == gl
            scores.append(max(jaccard(p == pl, gmask) for pl in pred_labels))
    if not scores:
        raise ValueError("no annotated frames")
    return float(np.mean(scores))


def linear_assignment_score(pred_frames, gt_frames) -> float:
    """One-to-one sequence-level matching over all gt labels (background
    included), maximizing the summed mean per-frame IoU; the score is the
    mean over (gt segment, frame) pairs of the matched IoU, with unmatched
    gt labels contributing 0. Always <= bootstrap_iou."""
    gt_labels = sorted({int(l) for g in gt_frames if g is not None
                        for l in np.unique(g)})
    pred_labels = sorted({int(l) for p in pred_frames if p is not None
                          for l in np.unique(p)})
    if not gt_labels:
        raise ValueError("no annotated frames")
    mat, per_frame, counts = _frame_iou_matrix(pred_frames, gt_frames,
                                               pred_labels, gt_labels)
    # weight rows by presence count so the assignment optimizes the same
    # per-(segment, frame) mean the score reports
    rows, cols = linear_sum_assignment(-(mat * counts[:, None]))
    assigned = dict(zip(rows, cols))
    scores = []
    for a in range(len(gt_labels)):
        b = assigned.get(a)
        if b is None:
            scores.extend([0.0] * int(counts[a]))
        else:
            scores.extend(per_frame[a][b])
    return float(np.mean(scores)) if scores else 1.0
