"""Greedy causal linking of clip-level tubelets into full-video tubes.

Clips are processed in temporal order.  Each active tube extends with the
unclaimed tubelet maximising (mean box IoU over the temporally
overlapping frames + tubelet confidence), subject to the IoU floor;
unmatched tubelets start new tubes and tubes that fail to extend for one
step terminate.  Boxes and class scores on overlapping frames are
averaged over all contributing tubelets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import geometry


@dataclass
class ScoredTubelet:
    """One query slot's prediction over a clip, in video frame indices."""

    video_id: str
    first_frame: int
    boxes: np.ndarray  # [T, 4] center form
    class_probs: np.ndarray  # [T, C+1], last channel background
    confidence: float = None  # type: ignore[assignment]
    slot: int = -1

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        if self.confidence is None:
            self.confidence = tubelet_confidence(self.class_probs)

    @property
    def last_frame(self) -> int:
        return self.first_frame + len(self.boxes)


def tubelet_confidence(class_probs: np.ndarray) -> float:
    """Mean over frames of the maximum action-class probability (the
    explicit background channel is excluded)."""
    return float(class_probs[:, :-1].max(axis=1).mean())


class VideoTube:
    """Chain of linked tubelets with per-frame averaged geometry."""

    def __init__(self, video_id: str, first: ScoredTubelet):
        self.video_id = video_id
        self.first_frame = first.first_frame
        self.tubelets = []
        n_ch = first.class_probs.shape[1]
        self._box_sum = np.zeros((0, 4))
        self._prob_sum = np.zeros((0, n_ch))
        self._count = np.zeros(0, dtype=int)
        self.extend(first)

    @property
    def last_frame(self) -> int:
        return self.first_frame + len(self._count)

    def extend(self, tl: ScoredTubelet):
        end = max(self.last_frame, tl.last_frame)
        grow = end - self.last_frame
        if grow > 0:
            self._box_sum = np.vstack([self._box_sum, np.zeros((grow, 4))])
            self._prob_sum = np.vstack([self._prob_sum,
                                        np.zeros((grow, self._prob_sum.shape[1]))])
            self._count = np.concatenate([self._count, np.zeros(grow, dtype=int)])
        k = tl.first_frame - self.first_frame
        self._box_sum[k:k + len(tl.boxes)] += tl.boxes
        self._prob_sum[k:k + len(tl.boxes)] += tl.class_probs
        self._count[k:k + len(tl.boxes)] += 1
        self.tubelets.append(tl)

    def boxes(self) -> np.ndarray:
        return self._box_sum / self._count[:, None]

    def class_probs(self) -> np.ndarray:
        return self._prob_sum / self._count[:, None]

    @property
    def score(self) -> float:
        return float(np.mean([t.confidence for t in self.tubelets]))

    def overlap_mean_iou(self, tl: ScoredTubelet) -> Optional[float]:
        """Mean IoU over frames shared with the candidate tubelet, or
        None when there is no temporal overlap."""
        lo = max(self.first_frame, tl.first_frame)
        hi = min(self.last_frame, tl.last_frame)
        if hi <= lo:
            return None
        mine = self.boxes()[lo - self.first_frame:hi - self.first_frame]
        theirs = tl.boxes[lo - tl.first_frame:hi - tl.first_frame]
        vals = [geometry.pairwise_iou(mine[i][None], theirs[i][None])[0, 0]
                for i in range(hi - lo)]
        return float(np.mean(vals))

    def to_tube(self, class_id: int = -1) -> geometry.Tube:
        return geometry.Tube(self.first_frame,
                             [geometry.Box(*row) for row in self.boxes()],
                             class_id=class_id)


def link_tubelets(clips, overlap_frames: int, link_iou_min: float = 0.1) -> list:
    """Link per-clip tubelet sets (temporal order) into VideoTubes.

    ``clips`` is a sequence of lists of ScoredTubelet, one list per clip.
    A single clip passes through as the identity grouping.  Every input
    tubelet ends up in exactly one tube.
    """
    if overlap_frames < 1:
        raise ValueError("overlap_frames must be >= 1")
    active: list[VideoTube] = []
    finished: list[VideoTube] = []
    prev_start = None
    for tubelets in clips:
        start = tubelets[0].first_frame if tubelets else None
        if start is not None:
            if any(tl.first_frame != start for tl in tubelets):
                raise ValueError("tubelets of one clip must share a start frame")
            if prev_start is not None and start <= prev_start:
                raise ValueError("clips out of order")
            prev_start = start
        claimed = set()
        still_active = []
        for tube in active:
            best_idx, best_score = -1, -np.inf
            for idx, tl in enumerate(tubelets):
                if idx in claimed:
                    continue
                miou = tube.overlap_mean_iou(tl)
                if miou is None or miou < link_iou_min:
                    continue
                s = miou + tl.confidence
                if s > best_score:
                    best_idx, best_score = idx, s
            if best_idx >= 0:
                tube.extend(tubelets[best_idx])
                claimed.add(best_idx)
                still_active.append(tube)
            else:
                finished.append(tube)
        for idx, tl in enumerate(tubelets):
            if idx not in claimed:
                nt = VideoTube(tl.video_id, tl)
                still_active.append(nt)
        active = still_active
    finished.extend(active)
    return finished


# ---------------------------------------------------------------------------
# prediction file format: one JSON record per line, per tubelet or tube


def tube_record(video_id: str, first_frame: int, boxes: np.ndarray,
                class_probs: np.ndarray, confidence: float) -> dict:
    return {
        "video_id": video_id,
        "frame_range": [int(first_frame), int(first_frame + len(boxes))],
        "boxes": [[float(v) for v in row] for row in boxes],
        "class_probs": [[float(v) for v in row] for row in class_probs],
        "confidence": float(confidence),
    }


def save_predictions(records, path: str):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def load_predictions(path: str) -> list:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def record_from_tubelet(tl: ScoredTubelet) -> dict:
    return tube_record(tl.video_id, tl.first_frame, tl.boxes, tl.class_probs, tl.confidence)


def record_from_tube(tube: VideoTube) -> dict:
    return tube_record(tube.video_id, tube.first_frame, tube.boxes(),
                       tube.class_probs(), tube.score)


def tubelet_from_record(rec: dict) -> ScoredTubelet:
    return ScoredTubelet(rec["video_id"], int(rec["frame_range"][0]),
                         np.array(rec["boxes"], dtype=np.float64),
                         np.array(rec["class_probs"], dtype=np.float64),
                         float(rec["confidence"]))
