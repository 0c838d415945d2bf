"""Matched set losses: L1 + (1 - GIoU) on boxes, focal loss on classes.

The total loss averages per-frame losses over labelled frames only.
Matched query slots are supervised with all three terms; unmatched slots
only with the classification term against the background target.  No
term weighting.  Gradients with respect to the predicted boxes and class
probabilities are exact; the matching itself is treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import geometry

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    alpha: float = 0.3
    gamma: float = 2.0
    use_focal: bool = True
    use_aux: bool = False
    # swap the focal modulators (p^gamma on the positive term and
    # (1-p)^gamma on the negative one) instead of the standard placement
    swapped_focal_modulators: bool = False
    matching_class_cost: str = "focal"  # or "neg_prob"

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0, 1]")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")
        if self.use_aux:
            raise ValueError("auxiliary per-layer losses are not supported")
        if self.matching_class_cost not in ("focal", "neg_prob"):
            raise ValueError("matching_class_cost must be 'focal' or 'neg_prob'")


@dataclass
class LossBreakdown:
    frames: list
    l_box: dict
    l_iou: dict
    l_class: dict
    total_box: float
    total_iou: float
    total_class: float
    total: float
    assignment: object = None
    grad_b: Optional[np.ndarray] = None
    grad_a: Optional[np.ndarray] = None
    # retained tape roots so loss_backward can run after the fact
    _tape: object = None


def class_target_rows(class_ids_per_row, n_channels: int) -> np.ndarray:
    """Multi-hot action targets with the background channel forced to 0."""
    out = np.zeros((len(class_ids_per_row), n_channels))
    for i, ids in enumerate(class_ids_per_row):
        for c in ids:
            if not (0 <= c < n_channels - 1):
                raise ValueError(f"class id {c} out of range")
            out[i, c] = 1.0
    return out


def background_target(n_channels: int) -> np.ndarray:
    t = np.zeros(n_channels)
    t[-1] = 1.0
    return t


def focal_class_loss_rows(targets: np.ndarray, probs: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Classification loss summed over channels; broadcasts over leading axes."""
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    y = targets
    if not cfg.use_focal:
        return -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum(-1)
    if cfg.swapped_focal_modulators:
        pos = -cfg.alpha * y * p ** cfg.gamma * np.log(p)
        neg = -(1.0 - cfg.alpha) * (1.0 - y) * (1.0 - p) ** cfg.gamma * np.log1p(-p)
    else:
        pos = -cfg.alpha * y * (1.0 - p) ** cfg.gamma * np.log(p)
        neg = -(1.0 - cfg.alpha) * (1.0 - y) * p ** cfg.gamma * np.log1p(-p)
    return (pos + neg).sum(-1)


def focal_class_loss(target: np.ndarray, pred: np.ndarray, cfg: LossConfig | None = None) -> float:
    """Scalar classification loss for one target/prediction vector pair."""
    cfg = cfg or LossConfig()
    return float(focal_class_loss_rows(np.asarray(target, dtype=np.float64)[None],
                                       np.asarray(pred, dtype=np.float64)[None], cfg)[0])


def _tape_class_loss(rows: ad.Tensor, targets: np.ndarray, cfg: LossConfig) -> ad.Tensor:
    p = ad.clip(rows, PROB_EPS, 1.0 - PROB_EPS)
    y = ad.Tensor(targets)
    one_m_y = ad.Tensor(1.0 - targets)
    log_p = ad.log(p)
    log_1mp = ad.log(ad.sub(ad.Tensor(np.ones_like(targets)), p))
    if not cfg.use_focal:
        return ad.mul(ad.tsum(ad.add(ad.mul(y, log_p), ad.mul(one_m_y, log_1mp))), -1.0)
    one_m_p = ad.sub(ad.Tensor(np.ones_like(targets)), p)
    if cfg.swapped_focal_modulators:
        pos_mod, neg_mod = ad.pow_const(p, cfg.gamma), ad.pow_const(one_m_p, cfg.gamma)
    else:
        pos_mod, neg_mod = ad.pow_const(one_m_p, cfg.gamma), ad.pow_const(p, cfg.gamma)
    pos = ad.mul(ad.mul(ad.mul(y, pos_mod), log_p), -cfg.alpha)
    neg = ad.mul(ad.mul(ad.mul(one_m_y, neg_mod), log_1mp), -(1.0 - cfg.alpha))
    return ad.tsum(ad.add(pos, neg))


def _col(t: ad.Tensor, i: int) -> ad.Tensor:
    return ad.reshape(ad.take(t, np.array([i]), axis=1), (t.shape[0],))


def _tape_box_terms(pred_rows: ad.Tensor, gt_boxes: np.ndarray):
    """(sum L1, sum (1 - giou)) for matched center-form box rows."""
    l1 = ad.tsum(ad.absolute(ad.sub(pred_rows, ad.Tensor(gt_boxes))))
    pcx, pcy = _col(pred_rows, 0), _col(pred_rows, 1)
    pw, ph = _col(pred_rows, 2), _col(pred_rows, 3)
    half = 0.5
    px0, px1 = ad.sub(pcx, ad.mul(pw, half)), ad.add(pcx, ad.mul(pw, half))
    py0, py1 = ad.sub(pcy, ad.mul(ph, half)), ad.add(pcy, ad.mul(ph, half))
    gc = geometry.boxes_to_corners(gt_boxes)
    gx0, gy0, gx1, gy1 = (ad.Tensor(gc[:, k]) for k in range(4))
    zero = ad.Tensor(np.zeros(len(gt_boxes)))
    iw = ad.maximum(ad.sub(ad.minimum(px1, gx1), ad.maximum(px0, gx0)), zero)
    ih = ad.maximum(ad.sub(ad.minimum(py1, gy1), ad.maximum(py0, gy0)), zero)
    inter = ad.mul(iw, ih)
    parea = ad.mul(pw, ph)
    garea = ad.Tensor((gc[:, 2] - gc[:, 0]) * (gc[:, 3] - gc[:, 1]))
    union = ad.sub(ad.add(parea, garea), inter)
    hw = ad.sub(ad.maximum(px1, gx1), ad.minimum(px0, gx0))
    hh = ad.sub(ad.maximum(py1, gy1), ad.minimum(py0, gy0))
    hull = ad.mul(hw, hh)
    giou = ad.sub(ad.div(inter, union), ad.div(ad.sub(hull, union), hull))
    liou = ad.tsum(ad.sub(ad.Tensor(np.ones(len(gt_boxes))), giou))
    return l1, liou


def _frame_pairs(gt, t: int, frame_map: dict):
    rows = gt.instances_at(t)
    for r in frame_map:
        if r >= len(rows):
            raise ValueError(f"assignment references missing ground truth row {r} at frame {t}")
    return rows


def frame_values(preds, gt, t: int, frame_map: dict, cfg: LossConfig):
    """(l_box, l_iou, l_class) at one labelled frame, plain numbers."""
    rows = _frame_pairs(gt, t, frame_map)
    S = preds.b.shape[1]
    n_ch = preds.a.shape[-1]
    l_box = l_iou = 0.0
    l_class = 0.0
    matched = set(frame_map.values())
    if frame_map:
        gt_idx = sorted(frame_map)
        q_idx = [frame_map[i] for i in gt_idx]
        gt_boxes = np.stack([rows[i].box for i in gt_idx])
        pred_boxes = preds.b[t, q_idx]
        l_box = float(np.abs(pred_boxes - gt_boxes).sum())
        gi = geometry.pairwise_giou(gt_boxes, pred_boxes)
        l_iou = float((1.0 - np.diagonal(gi)).sum())
        targets = class_target_rows([rows[i].class_ids for i in gt_idx], n_ch)
        l_class += float(focal_class_loss_rows(targets, preds.a[t, q_idx], cfg).sum())
    unmatched = [j for j in range(S) if j not in matched]
    if unmatched:
        bg = np.broadcast_to(background_target(n_ch), (len(unmatched), n_ch))
        l_class += float(focal_class_loss_rows(bg, preds.a[t, unmatched], cfg).sum())
    return l_box, l_iou, l_class


def frame_loss(preds, gt, t: int, frame_map: dict, cfg: LossConfig | None = None) -> LossBreakdown:
    """Loss restricted to a single labelled frame under a given assignment."""
    cfg = cfg or LossConfig()
    lb, li, lc = frame_values(preds, gt, t, frame_map, cfg)
    from .matching import Assignment, PER_FRAME
    return LossBreakdown(
        frames=[t], l_box={t: lb}, l_iou={t: li}, l_class={t: lc},
        total_box=lb, total_iou=li, total_class=lc, total=lb + li + lc,
        assignment=Assignment(PER_FRAME, {t: dict(frame_map)}))


def total_loss(preds, gt, mode: str = "per_frame", cfg: LossConfig | None = None,
               assignment=None) -> LossBreakdown:
    """Mean over labelled frames of the per-frame set loss.

    Runs matching in the requested mode unless an assignment is supplied.
    Gradients w.r.t. preds.b and preds.a are available via loss_backward.
    """
    cfg = cfg or LossConfig()
    from . import matching as mt
    if assignment is None:
        ct = mt.build_cost(preds, gt, cfg)
        assignment = mt.match(ct, mode)
    frames = sorted(assignment.per_frame)
    if not frames:
        raise ValueError("no labelled frames")
    l_box, l_iou, l_class = {}, {}, {}
    for t in frames:
        lb, li, lc = frame_values(preds, gt, t, assignment.per_frame[t], cfg)
        l_box[t], l_iou[t], l_class[t] = lb, li, lc
    n = len(frames)
    tb = sum(l_box[t] for t in frames) / n
    ti = sum(l_iou[t] for t in frames) / n
    tc = sum(l_class[t] for t in frames) / n
    bd = LossBreakdown(
        frames=frames, l_box=l_box, l_iou=l_iou, l_class=l_class,
        total_box=tb, total_iou=ti, total_class=tc, total=tb + ti + tc,
        assignment=assignment)
    bd._tape = (cfg, gt)
    return bd


def loss_backward(breakdown: LossBreakdown, preds):
    """Exact gradients of the total loss w.r.t. preds.b and preds.a.

    The assignment recorded in the breakdown is held fixed (no gradient
    flows through the argmin).  Results are cached on the breakdown and
    also returned as (grad_b, grad_a).
    """
    if breakdown._tape is None:
        raise ValueError("breakdown was not produced by total_loss")
    cfg, gt = breakdown._tape
    assignment = breakdown.assignment
    frames = breakdown.frames
    T, S, _ = preds.b.shape
    n_ch = preds.a.shape[-1]
    b_leaf = ad.parameter(preds.b)
    a_leaf = ad.parameter(preds.a)
    flat_b = ad.reshape(b_leaf, (T * S, 4))
    flat_a = ad.reshape(a_leaf, (T * S, n_ch))

    m_idx, m_boxes, m_targets = [], [], []
    u_idx = []
    for t in frames:
        fmap = assignment.per_frame[t]
        rows = _frame_pairs(gt, t, fmap)
        matched = set(fmap.values())
        for i in sorted(fmap):
            m_idx.append(t * S + fmap[i])
            m_boxes.append(rows[i].box)
            m_targets.append(rows[i].class_ids)
        u_idx.extend(t * S + j for j in range(S) if j not in matched)

    terms = []
    if m_idx:
        pred_rows = ad.take(flat_b, np.array(m_idx), axis=0)
        l1, liou = _tape_box_terms(pred_rows, np.stack(m_boxes))
        targets = class_target_rows(m_targets, n_ch)
        cls_m = _tape_class_loss(ad.take(flat_a, np.array(m_idx), axis=0), targets, cfg)
        terms.extend([l1, liou, cls_m])
    if u_idx:
        bg = np.broadcast_to(background_target(n_ch), (len(u_idx), n_ch)).copy()
        cls_u = _tape_class_loss(ad.take(flat_a, np.array(u_idx), axis=0), bg, cfg)
        terms.append(cls_u)
    if not terms:
        breakdown.grad_b = np.zeros_like(preds.b)
        breakdown.grad_a = np.zeros_like(preds.a)
        return breakdown.grad_b, breakdown.grad_a

    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    total = ad.mul(total, 1.0 / len(frames))
    total.backward()
    breakdown.grad_b = b_leaf.grad if b_leaf.grad is not None else np.zeros_like(preds.b)
    breakdown.grad_a = a_leaf.grad if a_leaf.grad is not None else np.zeros_like(preds.a)
    return breakdown.grad_b, breakdown.grad_a
