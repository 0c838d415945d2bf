"""Frame AP and Video AP with greedy score-ordered matching.

Detections are sorted by decreasing score (ties keep record order) and
greedily claim the best still-unmatched ground truth with overlap at or
above the threshold.  The precision-recall curve is integrated with
all-point interpolation; because true/false-positive counts are integers
the integration is carried out in exact rational arithmetic and only the
final AP is converted to float.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import geometry

SMALL_MAX = 32.0 ** 2
MEDIUM_MAX = 96.0 ** 2
BUCKETS = ("small", "medium", "large")


@dataclass
class FrameDetection:
    video_id: str
    frame: int
    class_id: int
    score: float
    box: np.ndarray  # center form [4]


@dataclass
class FrameGroundTruth:
    video_id: str
    frame: int
    class_id: int
    box: np.ndarray
    area_px: float = 0.0


@dataclass
class TubeDetection:
    video_id: str
    class_id: int
    score: float
    tube: geometry.Tube


@dataclass
class TubeGroundTruth:
    video_id: str
    class_id: int
    tube: geometry.Tube


@dataclass
class APReport:
    threshold: object
    per_class: dict
    mean_ap: float
    absent_classes: list = field(default_factory=list)
    per_class_buckets: dict = field(default_factory=dict)
    mean_ap_buckets: dict = field(default_factory=dict)


def _bucket_of(area_px: float) -> str:
    if area_px < SMALL_MAX:
        return "small"
    if area_px < MEDIUM_MAX:
        return "medium"
    return "large"


def _group_key(rec):
    return (rec.video_id, rec.frame) if hasattr(rec, "frame") else rec.video_id


def _greedy_match(dets, gts, iou_of, thresh, ignore_mask=None):
    """Flags per detection: 1 TP, 0 FP, -1 ignored (matched an ignored gt).

    Detections must already be sorted.  Real ground truths are preferred
    over ignored ones at equal eligibility.  Candidates are restricted to
    the same video (and frame, for frame-level records).
    """
    ignore_mask = ignore_mask if ignore_mask is not None else [False] * len(gts)
    taken = [False] * len(gts)
    by_key: dict = {}
    for i, gt in enumerate(gts):
        by_key.setdefault(_group_key(gt), []).append(i)
    flags = []
    for det in dets:
        best_i, best_iou = -1, 0.0
        best_ign_i, best_ign_iou = -1, 0.0
        for i in by_key.get(_group_key(det), ()):
            if taken[i]:
                continue
            v = iou_of(det, gts[i])
            if v < thresh:
                continue
            if ignore_mask[i]:
                if v > best_ign_iou:
                    best_ign_i, best_ign_iou = i, v
            elif v > best_iou:
                best_i, best_iou = i, v
        if best_i >= 0:
            taken[best_i] = True
            flags.append(1)
        elif best_ign_i >= 0:
            taken[best_ign_i] = True
            flags.append(-1)
        else:
            flags.append(0)
    return flags


def average_precision(flags, n_gt: int) -> float:
    """All-point interpolated AP from ordered TP/FP flags (exact)."""
    if n_gt == 0:
        raise ValueError("average_precision needs at least one ground truth")
    kept = [f for f in flags if f >= 0]
    tp = 0
    points = []
    for k, f in enumerate(kept, start=1):
        tp += f
        points.append((Fraction(tp, n_gt), Fraction(tp, k)))
    ap = Fraction(0)
    prev_r = Fraction(0)
    # precision envelope: max precision at or beyond each recall point
    env = []
    best = Fraction(0)
    for r, p in reversed(points):
        best = max(best, p)
        env.append((r, best))
    for r, p in reversed(env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def _sorted_dets(dets):
    return sorted(enumerate(dets), key=lambda kv: (-kv[1].score, kv[0]))


def _frame_iou(det, gt) -> float:
    return float(geometry.pairwise_iou(det.box[None], gt.box[None])[0, 0])


def _tube_iou(det, gt) -> float:
    return geometry.tube_iou_3d(det.tube, gt.tube)


def _eval_class(dets, gts, iou_of, thresh, ignore_mask=None) -> float:
    order = _sorted_dets(dets)
    flags = _greedy_match([d for _, d in order], gts, iou_of, thresh, ignore_mask)
    n_real = len(gts) - (sum(ignore_mask) if ignore_mask else 0)
    return average_precision(flags, n_real)


def frame_ap(preds, gts, iou_thresh: float = 0.5, size_buckets: bool = False) -> APReport:
    """Per-class frame-level AP at one IoU threshold.

    Classes without ground truth are excluded from the mean and listed as
    absent.  With ``size_buckets``, AP is additionally computed per COCO
    area bucket of the ground-truth boxes (in pixels of the annotation
    resolution, recorded on each FrameGroundTruth); out-of-bucket ground
    truths are ignored rather than counted as false positives.
    """
    classes = sorted({g.class_id for g in gts})
    pred_classes = sorted({p.class_id for p in preds})
    per_class = {}
    per_class_buckets = {}
    for c in classes:
        dets_c = [p for p in preds if p.class_id == c]
        gts_c = [g for g in gts if g.class_id == c]
        per_class[c] = _eval_class(dets_c, gts_c, _frame_iou, iou_thresh)
        if size_buckets:
            buckets = {}
            for b in BUCKETS:
                mask = [_bucket_of(g.area_px) != b for g in gts_c]
                if all(mask):
                    continue
                buckets[b] = _eval_class(dets_c, gts_c, _frame_iou, iou_thresh, mask)
            per_class_buckets[c] = buckets
    mean_ap = float(np.mean([per_class[c] for c in classes])) if classes else 0.0
    mean_buckets = {}
    if size_buckets:
        for b in BUCKETS:
            vals = [per_class_buckets[c][b] for c in classes if b in per_class_buckets.get(c, {})]
            if vals:
                mean_buckets[b] = float(np.mean(vals))
    return APReport(threshold=iou_thresh, per_class=per_class, mean_ap=mean_ap,
                    absent_classes=[c for c in pred_classes if c not in classes],
                    per_class_buckets=per_class_buckets, mean_ap_buckets=mean_buckets)


def video_ap(pred_tubes, gt_tubes, thresholds=(0.2, 0.5)) -> dict:
    """Per-class tube-level AP at each 3D-IoU threshold.

    Returns {threshold: APReport}.  Tube IoUs are cached across
    thresholds.
    """
    classes = sorted({g.class_id for g in gt_tubes})
    pred_classes = sorted({p.class_id for p in pred_tubes})
    cache: dict = {}

    def iou_of(det, gt):
        key = (id(det), id(gt))
        if key not in cache:
            cache[key] = _tube_iou(det, gt)
        return cache[key]

    out = {}
    for thresh in thresholds:
        per_class = {}
        for c in classes:
            dets_c = [p for p in pred_tubes if p.class_id == c]
            gts_c = [g for g in gt_tubes if g.class_id == c]
            per_class[c] = _eval_class(dets_c, gts_c, iou_of, thresh)
        mean_ap = float(np.mean([per_class[c] for c in classes])) if classes else 0.0
        out[thresh] = APReport(threshold=thresh, per_class=per_class, mean_ap=mean_ap,
                               absent_classes=[c for c in pred_classes if c not in classes])
    return out


VAP_RANGE = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def video_ap_standard(pred_tubes, gt_tubes) -> dict:
    """vAP at 0.2, 0.5 and the 0.5:0.95 mean, keyed by printable names."""
    reports = video_ap(pred_tubes, gt_tubes, thresholds=(0.2, 0.5) + VAP_RANGE)
    mean_range = float(np.mean([reports[t].mean_ap for t in VAP_RANGE]))
    return {"vAP20": reports[0.2], "vAP50": reports[0.5], "vAP50:95": mean_range,
            "_all": reports}


def _fmt(x: float) -> str:
    return repr(float(x))


def write_frame_ap_csv(report: APReport, path: str):
    """Fixed column order: class_id, AP, then bucket APs."""
    with open(path, "w") as f:
        f.write("class_id,ap,ap_small,ap_medium,ap_large\n")
        for c in sorted(report.per_class):
            row = [str(c), _fmt(report.per_class[c])]
            buckets = report.per_class_buckets.get(c, {})
            for b in BUCKETS:
                row.append(_fmt(buckets[b]) if b in buckets else "")
            f.write(",".join(row) + "\n")
        row = ["mean", _fmt(report.mean_ap)]
        for b in BUCKETS:
            row.append(_fmt(report.mean_ap_buckets[b]) if b in report.mean_ap_buckets else "")
        f.write(",".join(row) + "\n")


def write_video_ap_csv(reports: dict, path: str):
    with open(path, "w") as f:
        f.write("class_id,vap20,vap50,vap50_95\n")
        r20, r50 = reports["vAP20"], reports["vAP50"]
        all_r = reports["_all"]
        for c in sorted(r20.per_class):
            range_mean = float(np.mean([all_r[t].per_class[c] for t in VAP_RANGE]))
            f.write(",".join([str(c), _fmt(r20.per_class[c]), _fmt(r50.per_class[c]),
                              _fmt(range_mean)]) + "\n")
        f.write(",".join(["mean", _fmt(r20.mean_ap), _fmt(r50.mean_ap),
                          _fmt(reports["vAP50:95"])]) + "\n")
