"""Cost construction and optimal assignment of predictions to ground truth.

Two matching modes: independent optimal assignment at each labelled frame,
or a single tube-level assignment shared across all labelled frames.  The
matching cost is the same unweighted three-term sum used by the training
loss (L1 + (1 - GIoU) + classification).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import geometry
from .losses import LossConfig, focal_class_loss_rows, class_target_rows

PER_FRAME = "per_frame"
TUBELET = "tubelet"


@dataclass
class CostTensor:
    """Per-frame assignment costs.

    ``costs[k]`` is an [n_gt(t), S] matrix for labelled frame
    ``frames[k]``; ``actor_ids[k]`` names the ground-truth row owners.
    """

    frames: list
    costs: list
    actor_ids: list
    n_queries: int

    def n_gt(self, k: int) -> int:
        return self.costs[k].shape[0]


@dataclass
class Assignment:
    """Maps ground truth to query slots.

    ``per_frame[t]`` is a dict gt_row -> query index for labelled frame t.
    In tubelet mode ``tube_map`` additionally records actor_id -> query,
    and the per-frame maps are derived from it.  Queries not named by a
    map are implicitly assigned to the background label.
    """

    mode: str
    per_frame: dict
    tube_map: dict = field(default_factory=dict)

    def matched_queries(self, t: int) -> set:
        return set(self.per_frame.get(t, {}).values())


def solve_assignment(costs: np.ndarray):
    """Minimum-cost injective assignment of n rows into m >= n columns.

    Returns (mapping, total_cost) where mapping is a dict row -> column.
    Ties between equally optimal assignments resolve deterministically;
    an all-equal cost matrix yields the identity (lowest-index) map.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    n, m = costs.shape
    if n > m:
        raise ValueError("more ground truths than queries")
    if not np.isfinite(costs).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(costs)
    mapping = {int(r): int(c) for r, c in zip(rows, cols)}
    total = assignment_cost(costs, mapping)
    return mapping, total


def assignment_cost(costs: np.ndarray, mapping: dict) -> float:
    """Cost of a given row -> column map, summed in row order."""
    total = 0.0
    for r in sorted(mapping):
        total += float(costs[r, mapping[r]])
    return total


def build_cost(preds, gt, cfg: LossConfig | None = None) -> CostTensor:
    """Three-term matching cost between a TubeletSet and an AnnotationSet.

    cost[t][i][j] = box_l1 + (1 - giou) + class_cost for ground-truth
    instance i against query j at labelled frame t.  Term definitions are
    shared with the loss module.
    """
    cfg = cfg or LossConfig()
    frames = [t for t in range(gt.frames_total) if gt.labelled_mask[t]]
    if not frames:
        raise ValueError("no labelled frames")
    S = preds.b.shape[1]
    out_frames, out_costs, out_ids = [], [], []
    for t in frames:
        rows = gt.instances_at(t)
        n = len(rows)
        if n == 0:
            out_frames.append(t)
            out_costs.append(np.zeros((0, S)))
            out_ids.append([])
            continue
        gt_boxes = np.stack([r.box for r in rows])
        l1 = geometry.pairwise_l1(gt_boxes, preds.b[t])
        gi = geometry.pairwise_giou(gt_boxes, preds.b[t])
        targets = class_target_rows([r.class_ids for r in rows], preds.a.shape[-1])
        if cfg.matching_class_cost == "neg_prob":
            # alternative class cost: minus the probability mass on the
            # labelled action channels
            cls = -(targets[:, None, :] * preds.a[t][None, :, :]).sum(-1)
        else:
            cls = focal_class_loss_rows(targets[:, None, :], preds.a[t][None, :, :], cfg)
        out_frames.append(t)
        out_costs.append(l1 + (1.0 - gi) + cls)
        out_ids.append([r.actor_id for r in rows])
    return CostTensor(out_frames, out_costs, out_ids, S)


def match_per_frame(ct: CostTensor) -> Assignment:
    """Independent optimal assignment at each labelled frame."""
    per_frame = {}
    for k, t in enumerate(ct.frames):
        if ct.n_gt(k) == 0:
            per_frame[t] = {}
            continue
        mapping, _ = solve_assignment(ct.costs[k])
        per_frame[t] = mapping
    return Assignment(PER_FRAME, per_frame)


def match_tubelet(ct: CostTensor) -> Assignment:
    """One assignment of actor tubes to queries shared across frames.

    A tube's cost against query j is the sum of its per-frame costs at
    the labelled frames where the actor appears; the chosen assignment
    minimises the total (equivalently the mean over labelled frames).
    """
    actors = []
    seen = set()
    for ids in ct.actor_ids:
        if len(ids) != len(set(ids)):
            raise ValueError("inconsistent actor ids: duplicate actor in one frame")
        for a in ids:
            if a not in seen:
                seen.add(a)
                actors.append(a)
    if not actors:
        return Assignment(TUBELET, {t: {} for t in ct.frames})
    tube_costs = np.zeros((len(actors), ct.n_queries))
    index = {a: i for i, a in enumerate(actors)}
    for k in range(len(ct.frames)):
        for row, a in enumerate(ct.actor_ids[k]):
            tube_costs[index[a]] += ct.costs[k][row]
    tube_rows, _ = solve_assignment(tube_costs)
    tube_map = {actors[i]: j for i, j in tube_rows.items()}
    per_frame = {}
    for k, t in enumerate(ct.frames):
        per_frame[t] = {row: tube_map[a] for row, a in enumerate(ct.actor_ids[k])}
    return Assignment(TUBELET, per_frame, tube_map=tube_map)


def match(ct: CostTensor, mode: str) -> Assignment:
    if mode == PER_FRAME:
        return match_per_frame(ct)
    if mode == TUBELET:
        return match_tubelet(ct)
    raise ValueError(f"unknown matching mode: {mode!r}")


def total_assignment_cost(ct: CostTensor, assignment: Assignment) -> float:
    """Summed cost of an assignment over all labelled frames, frame order."""
    total = 0.0
    for k, t in enumerate(ct.frames):
        total += assignment_cost(ct.costs[k], assignment.per_frame.get(t, {}))
    return total
