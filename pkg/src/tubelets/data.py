"""Annotations, synthetic scene generation, supervision subsampling, and
geometric augmentation.

Synthetic scenes are textured rectangles on a dark background moving on
linear paths; the texture pattern carries the action class so a detector
can recover it from pixels alone.  Ground-truth tubes are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import geometry


@dataclass
class Instance:
    """One actor at one frame."""

    actor_id: object
    box: np.ndarray  # center form [4]
    class_ids: list


@dataclass
class ActorTrack:
    """Full-length per-frame track for one actor.

    Arrays span the whole video; ``present[t]`` marks the frames where the
    actor exists.  ``class_ids[t]`` is the (possibly multi-label) list of
    action classes active at frame t.
    """

    actor_id: object
    boxes: np.ndarray  # [frames_total, 4]
    present: np.ndarray  # bool [frames_total]
    class_ids: list  # list of per-frame lists

    def slice(self, start: int, stop: int) -> "ActorTrack":
        return ActorTrack(self.actor_id, self.boxes[start:stop].copy(),
                          self.present[start:stop].copy(),
                          [list(c) for c in self.class_ids[start:stop]])


@dataclass
class AnnotationSet:
    video_id: str
    frames_total: int
    width: int
    height: int
    tubes: list
    labelled_mask: np.ndarray

    def __post_init__(self):
        ids = [t.actor_id for t in self.tubes]
        if len(ids) != len(set(ids)):
            raise ValueError("actor ids must be unique per video")
        self.labelled_mask = np.asarray(self.labelled_mask, dtype=bool)
        if len(self.labelled_mask) != self.frames_total:
            raise ValueError("labelled_mask length must equal frames_total")

    def labelled_frames(self) -> list:
        return [t for t in range(self.frames_total) if self.labelled_mask[t]]

    def instances_at(self, t: int) -> list:
        out = []
        for track in self.tubes:
            if track.present[t]:
                out.append(Instance(track.actor_id, track.boxes[t], list(track.class_ids[t])))
        return out

    def geometry_tubes(self) -> list:
        """One geometry.Tube per (actor, class) pair, for tube metrics."""
        out = []
        for track in self.tubes:
            classes = sorted({c for t in range(self.frames_total) if track.present[t]
                              for c in track.class_ids[t]})
            for c in classes:
                boxes = []
                for t in range(self.frames_total):
                    if track.present[t] and c in track.class_ids[t]:
                        boxes.append(geometry.Box(*track.boxes[t]))
                    else:
                        boxes.append(None)
                out.append(geometry.Tube(0, boxes, actor_id=track.actor_id, class_id=c))
        return out


@dataclass
class AugmentConfig:
    rho: int = 0
    scale_min: float = 1.0
    scale_max: float = 1.0
    hflip_prob: float = 0.0
    box_jitter_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.scale_min <= self.scale_max):
            raise ValueError("need 0 < scale_min <= scale_max")
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise ValueError("hflip_prob must be a probability")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")


@dataclass
class ClipSample:
    clip: np.ndarray  # [T, H, W, ch]
    ann: AnnotationSet
    provenance: dict = field(default_factory=dict)


@dataclass
class SceneSpec:
    n_actors: int = 2
    n_classes: int = 4
    length: int = 16
    H: int = 64
    W: int = 64
    motion: str = "linear"  # or "crossing"
    size_min: float = 0.18
    size_max: float = 0.30
    margin: float = 0.02
    travel_max: float = 1.0  # cap on total center displacement per video


def _class_texture(class_id: int, h: int, w: int) -> np.ndarray:
    """Deterministic texture per class: oriented stripes and checks in a
    class-specific colour."""
    yy, xx = np.mgrid[0:h, 0:w]
    k = class_id % 4
    period = 4 + 2 * (class_id // 4)
    if k == 0:
        mask = (yy // period) % 2
    elif k == 1:
        mask = (xx // period) % 2
    elif k == 2:
        mask = ((xx + yy) // period) % 2
    else:
        mask = ((yy // period) % 2) ^ ((xx // period) % 2)
    base = np.array([[0.9, 0.25, 0.2], [0.2, 0.85, 0.3], [0.25, 0.35, 0.95],
                     [0.9, 0.85, 0.2], [0.85, 0.3, 0.85], [0.3, 0.85, 0.85]])
    c1 = base[class_id % len(base)]
    c2 = 0.35 * c1
    return np.where(mask[..., None] == 1, c1, c2)


def generate_synthetic(spec: SceneSpec, seed: int, video_id: Optional[str] = None):
    """Render a deterministic scene and its exact ground-truth tubes.

    Returns (video [length, H, W, 3] float64 in [0, 1], AnnotationSet with
    every frame labelled).
    """
    rng = np.random.default_rng(seed)
    vid = video_id or f"synth-{seed:06d}"
    L, H, W = spec.length, spec.H, spec.W
    video = np.full((L, H, W, 3), 0.08)
    # faint background gradient so the scene is not a constant
    video += (np.linspace(0.0, 0.04, W).reshape(1, 1, W, 1)
              + np.linspace(0.0, 0.04, H).reshape(1, H, 1, 1))

    sizes = rng.uniform(spec.size_min, spec.size_max, size=(spec.n_actors, 2))
    classes = rng.integers(0, spec.n_classes, size=spec.n_actors)
    centers = np.zeros((spec.n_actors, L, 2))  # (cx, cy) per frame
    if spec.motion == "crossing" and spec.n_actors >= 2:
        t_cross = L // 2
        cross_pt = rng.uniform(0.4, 0.6, size=2)
        for i in range(spec.n_actors):
            ang = rng.uniform(0, 2 * np.pi)
            speed = rng.uniform(0.01, 0.02)
            v = speed * np.array([np.cos(ang), np.sin(ang)])
            for t in range(L):
                centers[i, t] = cross_pt + (t - t_cross) * v
    else:
        for i in range(spec.n_actors):
            lo = spec.margin + sizes[i] / 2
            hi = 1.0 - spec.margin - sizes[i] / 2
            start = rng.uniform(lo, hi)
            end = np.clip(start + rng.uniform(-spec.travel_max, spec.travel_max, 2),
                          lo, hi)
            for t in range(L):
                a = t / max(L - 1, 1)
                centers[i, t] = (1 - a) * start + a * end
    centers = np.clip(centers, 0.05, 0.95)

    tracks = []
    for i in range(spec.n_actors):
        boxes = np.zeros((L, 4))
        boxes[:, 0:2] = centers[i]
        boxes[:, 2] = sizes[i, 0]
        boxes[:, 3] = sizes[i, 1]
        tracks.append(ActorTrack(actor_id=f"actor{i}", boxes=boxes,
                                 present=np.ones(L, dtype=bool),
                                 class_ids=[[int(classes[i])] for _ in range(L)]))

    for t in range(L):
        for i in range(spec.n_actors):
            cx, cy, w, h = tracks[i].boxes[t]
            x0 = int(round((cx - w / 2) * W))
            x1 = int(round((cx + w / 2) * W))
            y0 = int(round((cy - h / 2) * H))
            y1 = int(round((cy + h / 2) * H))
            x0, x1 = max(x0, 0), min(x1, W)
            y0, y1 = max(y0, 0), min(y1, H)
            if x1 <= x0 or y1 <= y0:
                continue
            tex = _class_texture(int(classes[i]), y1 - y0, x1 - x0)
            video[t, y0:y1, x0:x1] = tex

    ann = AnnotationSet(video_id=vid, frames_total=L, width=W, height=H,
                        tubes=tracks, labelled_mask=np.ones(L, dtype=bool))
    return video, ann


def subsample_supervision(ann: AnnotationSet, scheme: str, seed: int = 0) -> AnnotationSet:
    """Thin the labelled mask; tube content is untouched.

    Schemes: "all", "every_<k>" (keeps frames 0, k, 2k, ...), or
    "one_per_video" (one uniformly-seeded labelled frame).
    """
    if not ann.labelled_mask.all():
        raise ValueError("subsampling expects a fully labelled annotation set")
    mask = np.zeros(ann.frames_total, dtype=bool)
    if scheme == "all":
        mask[:] = True
    elif scheme.startswith("every_"):
        k = int(scheme.split("_", 1)[1])
        if k < 1:
            raise ValueError("every_k needs k >= 1")
        mask[np.arange(0, ann.frames_total, k)] = True
    elif scheme == "one_per_video":
        rng = np.random.default_rng(seed)
        mask[int(rng.integers(0, ann.frames_total))] = True
    else:
        raise ValueError(f"unknown supervision scheme {scheme!r}")
    return AnnotationSet(ann.video_id, ann.frames_total, ann.width, ann.height,
                         [t.slice(0, ann.frames_total) for t in ann.tubes], mask)


def decenter_sample(video: np.ndarray, ann: AnnotationSet, T: int, rho: int,
                    rng: np.random.Generator) -> ClipSample:
    """Extract a T-frame window around a labelled keyframe.

    The keyframe lands at window index T//2 + delta with delta drawn
    uniformly from the integers [-rho, rho]; the window is clamped to the
    video bounds and any clamping is recorded in the provenance.
    """
    if ann.frames_total < T:
        raise ValueError("video shorter than the requested window")
    labelled = ann.labelled_frames()
    if not labelled:
        raise ValueError("no labelled frames to sample around")
    key = int(labelled[int(rng.integers(0, len(labelled)))])
    delta = int(rng.integers(-rho, rho + 1)) if rho > 0 else 0
    # the keyframe must stay inside the window even when rho >= T/2
    position = min(max(T // 2 + delta, 0), T - 1)
    start = key - position
    clamped_start = min(max(start, 0), ann.frames_total - T)
    window = slice(clamped_start, clamped_start + T)
    ann_w = AnnotationSet(ann.video_id, T, ann.width, ann.height,
                          [t.slice(window.start, window.stop) for t in ann.tubes],
                          ann.labelled_mask[window].copy())
    return ClipSample(
        clip=np.array(video[window]),
        ann=ann_w,
        provenance={"video_id": ann.video_id, "start": clamped_start,
                    "keyframe": key, "delta": delta,
                    "clamped": clamped_start != start})


def _scale_pixel_map(n: int, s: float) -> np.ndarray:
    """Source index per output pixel for a center-anchored scale by s;
    -1 marks out-of-range (background)."""
    i = np.arange(n)
    src = ((i + 0.5 - n / 2.0) / s + n / 2.0) - 0.5
    j = np.rint(src).astype(int)
    j[(src < -0.5) | (src > n - 0.5)] = -1
    return np.clip(j, -1, n - 1)


def _affine_box(boxes: np.ndarray, a: float, bx: float, by: float, s: float) -> np.ndarray:
    out = boxes.copy()
    out[:, 0] = a * boxes[:, 0] + bx
    out[:, 1] = s * boxes[:, 1] + by
    out[:, 2] = abs(a) * boxes[:, 2]
    out[:, 3] = s * boxes[:, 3]
    return out


def apply_box_affine(boxes: np.ndarray, record: dict) -> np.ndarray:
    """Apply a recorded augmentation affine to center-form boxes."""
    return _affine_box(boxes, record["a_x"], record["b_x"], record["b_y"], record["s_y"])


def augment(sample: ClipSample, cfg: AugmentConfig, rng: Optional[np.random.Generator] = None) -> ClipSample:
    """Scale (log-uniform), horizontal flip, and ground-truth box jitter.

    Pixel and box transforms mirror each other exactly; boxes are clamped
    to the frame afterwards and instances whose boxes vanish are dropped
    at that frame.  The applied affine is recorded in the provenance.
    """
    rng = rng or np.random.default_rng(cfg.seed)
    T, H, W, _ = sample.clip.shape
    s = float(np.exp(rng.uniform(np.log(cfg.scale_min), np.log(cfg.scale_max))))
    flip = bool(rng.random() < cfg.hflip_prob)

    clip = sample.clip
    if s != 1.0:
        jy = _scale_pixel_map(H, s)
        jx = _scale_pixel_map(W, s)
        valid_y = jy >= 0
        valid_x = jx >= 0
        sub = clip[:, jy[valid_y]][:, :, jx[valid_x]]
        block = np.zeros((T, H, W, clip.shape[-1]))
        yy = np.where(valid_y)[0]
        xx = np.where(valid_x)[0]
        block[np.ix_(range(T), yy, xx)] = sub
        clip = block
    else:
        clip = clip.copy()
    if flip:
        clip = clip[:, :, ::-1].copy()

    # box affine: scale about the frame center, then mirror in x
    a_x, b_x = s, 0.5 - 0.5 * s
    s_y, b_y = s, 0.5 - 0.5 * s
    if flip:
        a_x, b_x = -a_x, 1.0 - b_x
    record = {"a_x": a_x, "b_x": b_x, "s_y": s_y, "b_y": b_y,
              "scale": s, "flip": flip, "jitter_std": cfg.box_jitter_std}

    tracks = []
    for track in sample.ann.tubes:
        boxes = _affine_box(track.boxes, a_x, b_x, b_y, s_y)
        present = track.present.copy()
        if cfg.box_jitter_std > 0:
            noise = rng.normal(0.0, cfg.box_jitter_std, boxes.shape)
            boxes = boxes + noise
        corners = geometry.boxes_to_corners(boxes)
        corners = np.clip(corners, 0.0, 1.0)
        boxes = geometry.corners_to_boxes(corners)
        degenerate = (boxes[:, 2] <= 1e-9) | (boxes[:, 3] <= 1e-9)
        present = present & ~degenerate
        boxes[~present] = 0.0
        tracks.append(ActorTrack(track.actor_id, boxes, present,
                                 [list(c) for c in track.class_ids]))

    ann = AnnotationSet(sample.ann.video_id, T, sample.ann.width, sample.ann.height,
                        tracks, sample.ann.labelled_mask.copy())
    prov = dict(sample.provenance)
    prov["transform"] = record
    return ClipSample(clip=clip, ann=ann, provenance=prov)


# ---------------------------------------------------------------------------
# file formats


def annotations_to_doc(ann: AnnotationSet) -> dict:
    return {
        "video_id": ann.video_id,
        "frames_total": ann.frames_total,
        "width": ann.width,
        "height": ann.height,
        "tubes": [{
            "actor_id": t.actor_id,
            "class_ids": [list(map(int, c)) for c in t.class_ids],
            "boxes": [[float(v) for v in row] for row in t.boxes],
            "present": [bool(v) for v in t.present],
        } for t in ann.tubes],
        "labelled_mask": [bool(v) for v in ann.labelled_mask],
    }


def annotations_from_doc(doc: dict) -> AnnotationSet:
    tracks = []
    for t in doc["tubes"]:
        tracks.append(ActorTrack(
            actor_id=t["actor_id"],
            boxes=np.array(t["boxes"], dtype=np.float64).reshape(len(t["boxes"]), 4),
            present=np.array(t["present"], dtype=bool),
            class_ids=[list(c) for c in t["class_ids"]]))
    return AnnotationSet(doc["video_id"], int(doc["frames_total"]),
                         int(doc["width"]), int(doc["height"]),
                         tracks, np.array(doc["labelled_mask"], dtype=bool))


def save_annotations(ann: AnnotationSet, path: str):
    with open(path, "w") as f:
        json.dump(annotations_to_doc(ann), f, indent=1)
        f.write("\n")


def load_annotations(path: str) -> AnnotationSet:
    with open(path) as f:
        return annotations_from_doc(json.load(f))


VIDEO_MAGIC = "tubelets-video v1"


def save_video(video: np.ndarray, path: str):
    """Raw tensor file: text header (dims, dtype) then little-endian bytes."""
    video = np.asarray(video, dtype=np.float64)
    header = (f"{VIDEO_MAGIC}\n"
              f"dims {','.join(str(s) for s in video.shape)}\n"
              f"dtype <f8\ndata\n")
    with open(path, "wb") as f:
        f.write(header.encode())
        f.write(np.ascontiguousarray(video, dtype="<f8").tobytes())


def load_video(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.index(b"data\n") + len(b"data\n")
    lines = raw[:end].decode().splitlines()
    if lines[0] != VIDEO_MAGIC:
        raise ValueError("bad video file magic")
    dims = tuple(int(s) for s in lines[1].split()[1].split(","))
    dtype = lines[2].split()[1]
    return np.frombuffer(raw[end:], dtype=dtype).reshape(dims).astype(np.float64)
