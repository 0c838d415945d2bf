"""Experiment harness: resolved configs, training runs, evaluation with
linking, ablation sweeps, and overlay rendering.

Every run directory receives the exact resolved configuration; re-running
from that file reproduces all outputs byte-identically.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np

from . import data as data_mod
from . import evaluation, linking, losses, model, training
from .flops import flop_count
from .matching import PER_FRAME, TUBELET


# full-scale training settings, kept as reference metadata only; the
# desk-scale defaults below are deliberately much smaller
REFERENCE_SCALE = {
    "batch_size": 128,
    "epochs": 30,
    "spatial_queries": 64,
    "frames": 32,
    "decoder_layers": 6,
    "decoder_hidden": 256,
    "decoder_mlp": 2048,
}


@dataclass
class DataConfig:
    n_videos: int = 4
    n_actors: int = 2
    n_classes: int = 4
    video_length: int = 16
    motion: str = "linear"
    H: int = 64
    W: int = 64
    travel_max: float = 1.0


@dataclass
class ExperimentConfig:
    model: model.ModelConfig = field(default_factory=model.ModelConfig)
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    augment: data_mod.AugmentConfig = field(default_factory=data_mod.AugmentConfig)
    optim: training.OptimConfig = field(default_factory=training.OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    matching_mode: str = PER_FRAME
    supervision: str = "all"
    use_dropout: bool = False
    link_iou_min: float = 0.1
    clip_stride: int = 0  # 0 means T // 2
    render_score_min: float = 0.5
    seed: int = 0
    out_dir: str = "runs/exp"

    def validate(self):
        if self.matching_mode not in (PER_FRAME, TUBELET):
            raise ValueError(f"unknown matching mode {self.matching_mode!r}")
        if self.model.C != self.data.n_classes:
            raise ValueError("model.C must equal data.n_classes")
        if (self.model.H, self.model.W) != (self.data.H, self.data.W):
            raise ValueError("model resolution must match data resolution")
        if self.data.video_length < self.model.T:
            raise ValueError("videos must be at least T frames long")
        return self

    @property
    def stride(self) -> int:
        return self.clip_stride if self.clip_stride > 0 else max(self.model.T // 2, 1)


# --------------------------------------------------------------------------
# key = value config files


def _flatten(obj, prefix=""):
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(v):
            out.update(_flatten(v, prefix=f"{key}."))
        else:
            out[key] = v
    return out


def _parse_value(text: str, typ):
    if typ is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text


def save_config(cfg: ExperimentConfig, path: str):
    flat = _flatten(cfg)
    with open(path, "w") as f:
        f.write("# tubelets experiment config\n")
        for k in flat:
            v = flat[k]
            f.write(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n")


def _set_dotted(cfg, dotted: str, text: str):
    parts = dotted.split(".")
    obj = cfg
    for p in parts[:-1]:
        obj = getattr(obj, p)
    name = parts[-1]
    ftypes = {f.name: f.type for f in fields(obj)}
    if name not in ftypes:
        raise ValueError(f"unknown config key {dotted!r}")
    current = getattr(obj, name)
    typ = type(current) if current is not None else str
    setattr(obj, name, _parse_value(text, typ))


def load_config(path: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            _set_dotted(cfg, key, val)
    # dataclass __post_init__ checks run on construction only; re-validate
    cfg.model = model.ModelConfig(**{f.name: getattr(cfg.model, f.name)
                                     for f in fields(cfg.model)})
    cfg.loss = losses.LossConfig(**{f.name: getattr(cfg.loss, f.name)
                                    for f in fields(cfg.loss)})
    return cfg.validate()


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, val = (s.strip() for s in item.split("=", 1))
        _set_dotted(cfg, key, val)
    return cfg


# --------------------------------------------------------------------------
# inference and evaluation


def clip_starts(video_length: int, T: int, stride: int) -> list:
    if video_length < T:
        raise ValueError("video shorter than clip length")
    if video_length == T:
        return [0]
    starts = list(range(0, video_length - T + 1, stride))
    if starts[-1] != video_length - T:
        starts.append(video_length - T)
    return starts


def predict_video(params, mcfg: model.ModelConfig, video: np.ndarray, video_id: str,
                  stride: int, link_iou_min: float):
    """Per-clip tubelets plus the linked full-video tubes."""
    starts = clip_starts(len(video), mcfg.T, stride)
    per_clip = []
    for s in starts:
        preds, _ = model.forward(video[s:s + mcfg.T], params, mcfg)
        tubelets = []
        for j in range(preds.b.shape[1]):
            tubelets.append(linking.ScoredTubelet(
                video_id=video_id, first_frame=s,
                boxes=preds.b[:, j], class_probs=preds.a[:, j], slot=j))
        per_clip.append(tubelets)
    overlap = max(mcfg.T - stride, 1)
    tubes = linking.link_tubelets(per_clip, overlap_frames=overlap,
                                  link_iou_min=link_iou_min)
    return per_clip, tubes


def tubes_to_eval_records(tubes):
    """Frame- and tube-level detection records from linked tubes."""
    frame_dets, tube_dets = [], []
    for tube in tubes:
        boxes = tube.boxes()
        probs = tube.class_probs()
        n_actions = probs.shape[1] - 1
        for k in range(len(boxes)):
            t = tube.first_frame + k
            for c in range(n_actions):
                frame_dets.append(evaluation.FrameDetection(
                    tube.video_id, t, c, float(probs[k, c]), boxes[k]))
        for c in range(n_actions):
            tube_dets.append(evaluation.TubeDetection(
                tube.video_id, c, float(probs[:, c].mean()), tube.to_tube(class_id=c)))
    return frame_dets, tube_dets


def gt_eval_records(anns):
    frame_gts, tube_gts = [], []
    for ann in anns:
        area_scale = ann.width * ann.height
        for track in ann.tubes:
            for t in range(ann.frames_total):
                if not track.present[t]:
                    continue
                for c in track.class_ids[t]:
                    frame_gts.append(evaluation.FrameGroundTruth(
                        ann.video_id, t, c, track.boxes[t],
                        area_px=float(track.boxes[t][2] * track.boxes[t][3] * area_scale)))
        for tube in ann.geometry_tubes():
            tube_gts.append(evaluation.TubeGroundTruth(ann.video_id, tube.class_id, tube))
    return frame_gts, tube_gts


def run_training(cfg: ExperimentConfig):
    """Train per config; writes config, checkpoint and log to out_dir."""
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_config(cfg, os.path.join(cfg.out_dir, "config.cfg"))
    dataset = training.make_dataset(cfg.data, cfg.seed, cfg.supervision)
    params = model.init_params(cfg.model, seed=cfg.seed)
    log = training.train_loop(params, cfg.model, cfg.loss, cfg.optim, dataset,
                              cfg.matching_mode, cfg.augment, seed=cfg.seed,
                              log_path=os.path.join(cfg.out_dir, "train_log.csv"),
                              out_dir=cfg.out_dir, use_dropout=cfg.use_dropout)
    ckpt = os.path.join(cfg.out_dir, "params.ckpt")
    model.save_params(params, ckpt)
    return params, log


def run_evaluation(cfg: ExperimentConfig, params=None, checkpoint=None):
    """Inference + linking + metrics on the (fully labelled) eval split."""
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    if params is None:
        ckpt = checkpoint or os.path.join(cfg.out_dir, "params.ckpt")
        if not os.path.exists(ckpt):
            raise FileNotFoundError(f"missing checkpoint {ckpt}")
        params = model.load_params(ckpt, cfg.model, seed=cfg.seed)
    dataset = training.make_dataset(cfg.data, cfg.seed, "all")
    all_tubelets, all_tubes = [], []
    for video, ann in dataset:
        per_clip, tubes = predict_video(params, cfg.model, video, ann.video_id,
                                        cfg.stride, cfg.link_iou_min)
        for clip_tl in per_clip:
            all_tubelets.extend(clip_tl)
        all_tubes.extend(tubes)
    linking.save_predictions([linking.record_from_tubelet(t) for t in all_tubelets],
                             os.path.join(cfg.out_dir, "tubelets.jsonl"))
    linking.save_predictions([linking.record_from_tube(t) for t in all_tubes],
                             os.path.join(cfg.out_dir, "tubes.jsonl"))
    anns = [ann for _, ann in dataset]
    frame_dets, tube_dets = tubes_to_eval_records(all_tubes)
    frame_gts, tube_gts = gt_eval_records(anns)
    frame_report = evaluation.frame_ap(frame_dets, frame_gts, iou_thresh=0.5,
                                       size_buckets=True)
    video_reports = evaluation.video_ap_standard(tube_dets, tube_gts)
    evaluation.write_frame_ap_csv(frame_report, os.path.join(cfg.out_dir, "frame_ap.csv"))
    evaluation.write_video_ap_csv(video_reports, os.path.join(cfg.out_dir, "video_ap.csv"))
    return {"frame_ap": frame_report, "video_ap": video_reports}


def evaluate_prediction_files(pred_path: str, annotation_paths, out_dir: str):
    """Score a tube prediction file against annotation documents.

    Reads the JSONL tube records and per-video annotation files, writes
    frame_ap.csv and video_ap.csv to out_dir, and returns the reports.
    """
    os.makedirs(out_dir, exist_ok=True)
    anns = [data_mod.load_annotations(p) for p in annotation_paths]
    tubes = []
    for rec in linking.load_predictions(pred_path):
        tl = linking.tubelet_from_record(rec)
        tubes.extend(linking.link_tubelets([[tl]], overlap_frames=1))
    frame_dets, tube_dets = tubes_to_eval_records(tubes)
    frame_gts, tube_gts = gt_eval_records(anns)
    frame_report = evaluation.frame_ap(frame_dets, frame_gts, iou_thresh=0.5,
                                       size_buckets=True)
    video_reports = evaluation.video_ap_standard(tube_dets, tube_gts)
    evaluation.write_frame_ap_csv(frame_report, os.path.join(out_dir, "frame_ap.csv"))
    evaluation.write_video_ap_csv(video_reports, os.path.join(out_dir, "video_ap.csv"))
    return {"frame_ap": frame_report, "video_ap": video_reports}


def slot_colour(slot: int, n_slots: int):
    h = (slot % max(n_slots, 1)) / max(n_slots, 1)
    r, g, b = colorsys.hsv_to_rgb(h, 0.95, 1.0)
    return int(r * 255), int(g * 255), int(b * 255)


def render_overlays(cfg: ExperimentConfig, params, video: np.ndarray, ann, out_dir: str):
    """Per-frame PNG overlays; box colour encodes the spatial query index,
    ground truth is drawn as a thin white outline."""
    from PIL import Image, ImageDraw

    os.makedirs(out_dir, exist_ok=True)
    per_clip, _ = predict_video(params, cfg.model, video, ann.video_id,
                                cfg.stride, cfg.link_iou_min)
    T = cfg.model.T
    H, W = video.shape[1:3]
    n_slots = cfg.model.n_slots
    boxes_by_frame = {}
    for clip_tl in per_clip:
        for tl in clip_tl:
            for k in range(len(tl.boxes)):
                score = float(tl.class_probs[k, :-1].max())
                if score < cfg.render_score_min:
                    continue
                boxes_by_frame.setdefault(tl.first_frame + k, []).append((tl.slot, tl.boxes[k]))
    paths = []
    for t in range(len(video)):
        img = Image.fromarray((np.clip(video[t], 0, 1) * 255).astype(np.uint8))
        draw = ImageDraw.Draw(img)
        for track in ann.tubes:
            if track.present[t]:
                cx, cy, w, h = track.boxes[t]
                draw.rectangle([(cx - w / 2) * W, (cy - h / 2) * H,
                                (cx + w / 2) * W, (cy + h / 2) * H],
                               outline=(255, 255, 255), width=1)
        for slot, box in boxes_by_frame.get(t, []):
            cx, cy, w, h = box
            draw.rectangle([(cx - w / 2) * W, (cy - h / 2) * H,
                            (cx + w / 2) * W, (cy + h / 2) * H],
                           outline=slot_colour(slot, n_slots), width=2)
        path = os.path.join(out_dir, f"{ann.video_id}_f{t:03d}.png")
        img.save(path)
        paths.append(path)
    return paths


ABLATION_AXES = {
    "decoder_layers": [0, 1, 3, 6],
    "attention_mode": ["full", "factorised"],
    "query_mode": ["independent", "factorised", "binds_action"],
    "matching_mode": [PER_FRAME, TUBELET],
    "supervision": ["all", "every_12", "every_24", "one_per_video"],
}


def _with_setting(cfg: ExperimentConfig, axis: str, value):
    import copy

    c = copy.deepcopy(cfg)
    if axis == "decoder_layers":
        c.model.L = int(value)
    elif axis == "attention_mode":
        c.model.attention_mode = value
    elif axis == "query_mode":
        c.model.query_mode = value
    elif axis == "matching_mode":
        c.matching_mode = value
    elif axis == "supervision":
        c.supervision = value
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return c


def run_ablation(cfg: ExperimentConfig, axis: str, values=None):
    """Train and evaluate one arm per setting with shared seeds; writes a
    sweep table to <out_dir>/sweep_<axis>.csv."""
    values = values if values is not None else ABLATION_AXES[axis]
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    for value in values:
        arm = _with_setting(cfg, axis, value)
        arm.out_dir = os.path.join(cfg.out_dir, f"{axis}_{value}")
        params, _ = run_training(arm)
        reports = run_evaluation(arm, params=params)
        row = {
            "setting": str(value),
            "frame_ap50": reports["frame_ap"].mean_ap,
            "vap20": reports["video_ap"]["vAP20"].mean_ap,
            "vap50": reports["video_ap"]["vAP50"].mean_ap,
            "vap50_95": reports["video_ap"]["vAP50:95"],
        }
        if axis == "attention_mode":
            row["gflops_per_layer"] = flop_count(arm.model, value)
        rows.append(row)
    out_path = os.path.join(cfg.out_dir, f"sweep_{axis}.csv")
    cols = list(rows[0].keys())
    with open(out_path, "w") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                             for c in cols) + "\n")
    return rows, out_path
