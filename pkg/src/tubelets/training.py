"""Toy trainer: Adam with cosine step-size decay and global-norm clipping.

Single process, fully deterministic per seed.  A NaN loss aborts the run
after dumping the offending batch for inspection.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from . import losses, model


class TrainAbort(RuntimeError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    cosine_decay: bool = True
    steps: int = 500
    batch_size: int = 8


class AdamState:
    def __init__(self, params: model.ModelParams):
        self.m = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        self.t = 0


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_by_global_norm(grads: dict, max_norm: float):
    """Scale all gradients so the global L2 norm is at most max_norm."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(params: model.ModelParams, grads: dict, state: AdamState, lr: float,
              cfg: OptimConfig):
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for k, t in params.tensors.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = state.m[k] / bc1
        vhat = state.v[k] / bc2
        t.data = t.data - lr * mhat / (np.sqrt(vhat) + cfg.eps)


def make_dataset(dcfg, seed: int, supervision: str = "all"):
    """Deterministic in-memory synthetic dataset: list of (video, ann)."""
    out = []
    for i in range(dcfg.n_videos):
        spec = data_mod.SceneSpec(n_actors=dcfg.n_actors, n_classes=dcfg.n_classes,
                                  length=dcfg.video_length, H=dcfg.H, W=dcfg.W,
                                  motion=dcfg.motion,
                                  travel_max=getattr(dcfg, "travel_max", 1.0))
        video, ann = data_mod.generate_synthetic(spec, seed=seed * 10000 + i,
                                                 video_id=f"video{i:03d}")
        if supervision != "all":
            ann = data_mod.subsample_supervision(ann, supervision, seed=seed * 10000 + i)
        out.append((video, ann))
    return out


def sample_batch(dataset, mcfg: model.ModelConfig, aug: data_mod.AugmentConfig,
                 batch_size: int, rng: np.random.Generator):
    """Batch of augmented clip windows centered near labelled keyframes."""
    batch = []
    for _ in range(batch_size):
        video, ann = dataset[int(rng.integers(0, len(dataset)))]
        sample = data_mod.decenter_sample(video, ann, mcfg.T, aug.rho, rng)
        if (aug.scale_min, aug.scale_max) != (1.0, 1.0) or aug.hflip_prob > 0 \
                or aug.box_jitter_std > 0:
            sample = data_mod.augment(sample, aug, rng)
        batch.append(sample)
    return batch


def train_step(params, mcfg, lcfg, batch, matching_mode, opt_cfg, adam, lr,
               dropout_rng=None):
    """One optimisation step over a batch; returns the loss breakdown means."""
    params.zero_grads()
    tot = box = iou_l = cls = 0.0
    n = len(batch)
    for sample in batch:
        preds, trace = model.forward(sample.clip, params, mcfg, dropout_rng=dropout_rng)
        if not (np.isfinite(preds.b).all() and np.isfinite(preds.a).all()):
            raise TrainAbort("non-finite network outputs")
        bd = losses.total_loss(preds, sample.ann, matching_mode, lcfg)
        if not np.isfinite(bd.total):
            raise TrainAbort(f"non-finite loss {bd.total}")
        gb, ga = losses.loss_backward(bd, preds)
        model.backward(trace, gb / n, ga / n, params)
        tot += bd.total / n
        box += bd.total_box / n
        iou_l += bd.total_iou / n
        cls += bd.total_class / n
    grads, norm = clip_by_global_norm(params.grads(), opt_cfg.clip_norm)
    adam_step(params, grads, adam, lr, opt_cfg)
    return {"total": tot, "l_box": box, "l_iou": iou_l, "l_class": cls,
            "grad_norm": norm}


def train_loop(params, mcfg, lcfg, opt_cfg: OptimConfig, dataset, matching_mode: str,
               aug: data_mod.AugmentConfig, seed: int, log_path=None, out_dir=None,
               use_dropout: bool = False):
    """Full training run; returns the per-step log as a list of dicts."""
    rng = np.random.default_rng(seed)
    adam = AdamState(params)
    log = []
    log_f = open(log_path, "w") if log_path else None
    if log_f:
        log_f.write("step,lr,total,l_box,l_iou,l_class,grad_norm\n")
    try:
        for step in range(opt_cfg.steps):
            batch = sample_batch(dataset, mcfg, aug, opt_cfg.batch_size, rng)
            lr = cosine_lr(opt_cfg.lr, step, opt_cfg.steps) if opt_cfg.cosine_decay \
                else opt_cfg.lr
            drop_rng = np.random.default_rng(seed * 1000003 + step) if use_dropout else None
            try:
                stats = train_step(params, mcfg, lcfg, batch, matching_mode, opt_cfg,
                                   adam, lr, dropout_rng=drop_rng)
            except TrainAbort:
                if out_dir:
                    dump = os.path.join(out_dir, "nan_batch_dump.npz")
                    np.savez(dump, *[s.clip for s in batch])
                    raise TrainAbort(f"non-finite loss at step {step}; batch dumped to {dump}")
                raise
            stats["step"] = step
            stats["lr"] = lr
            log.append(stats)
            if log_f:
                log_f.write(f"{step},{lr!r},{stats['total']!r},{stats['l_box']!r},"
                            f"{stats['l_iou']!r},{stats['l_class']!r},{stats['grad_norm']!r}\n")
    finally:
        if log_f:
            log_f.close()
    return log
