"""Command line interface.

Subcommands: train, eval, ablate, link, render.  Flags mirror the
experiment config fields via repeated ``--set key=value`` overrides; a
config file provides the base.  Exit code is nonzero on any validation
failure.
"""

from __future__ import annotations

import argparse
import sys

from . import experiment, linking, model, training


def _load_cfg(args) -> experiment.ExperimentConfig:
    cfg = experiment.load_config(args.config) if args.config else experiment.ExperimentConfig()
    experiment.apply_overrides(cfg, args.set or [])
    if args.out_dir:
        cfg.out_dir = args.out_dir
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    _, log = experiment.run_training(cfg)
    print(f"trained {cfg.optim.steps} steps; final loss {log[-1]['total']:.4f}; "
          f"outputs in {cfg.out_dir}")
    return 0


def cmd_eval(args) -> int:
    if args.predictions:
        if not args.annotations:
            raise ValueError("--predictions needs --annotations files to score against")
        out = args.out_dir or "."
        reports = experiment.evaluate_prediction_files(args.predictions,
                                                       args.annotations, out)
    else:
        cfg = _load_cfg(args)
        reports = experiment.run_evaluation(cfg, checkpoint=args.checkpoint)
    fap = reports["frame_ap"].mean_ap
    vap = reports["video_ap"]
    print(f"frame AP@0.5 {fap:.4f}  vAP@0.2 {vap['vAP20'].mean_ap:.4f}  "
          f"vAP@0.5 {vap['vAP50'].mean_ap:.4f}  vAP@0.5:0.95 {vap['vAP50:95']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    values = args.values.split(",") if args.values else None
    rows, path = experiment.run_ablation(cfg, args.axis, values)
    for row in rows:
        print(row)
    print(f"sweep table: {path}")
    return 0


def cmd_link(args) -> int:
    records = linking.load_predictions(args.predictions)
    by_clip: dict = {}
    for rec in records:
        by_clip.setdefault((rec["video_id"], rec["frame_range"][0]), []).append(
            linking.tubelet_from_record(rec))
    tubes = []
    for vid in sorted({k[0] for k in by_clip}):
        clips = [by_clip[k] for k in sorted(k for k in by_clip if k[0] == vid)]
        tubes.extend(linking.link_tubelets(clips, overlap_frames=args.overlap,
                                           link_iou_min=args.link_iou_min))
    linking.save_predictions([linking.record_from_tube(t) for t in tubes], args.out)
    print(f"linked {len(records)} tubelets into {len(tubes)} tubes -> {args.out}")
    return 0


def cmd_render(args) -> int:
    cfg = _load_cfg(args)
    ckpt = args.checkpoint or f"{cfg.out_dir}/params.ckpt"
    params = model.load_params(ckpt, cfg.model, seed=cfg.seed)
    dataset = training.make_dataset(cfg.data, cfg.seed, "all")
    idx = args.video_index
    if not (0 <= idx < len(dataset)):
        raise ValueError(f"video index {idx} out of range")
    video, ann = dataset[idx]
    out = args.out or f"{cfg.out_dir}/overlays"
    paths = experiment.render_overlays(cfg, params, video, ann, out)
    print(f"wrote {len(paths)} overlay frames to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tubelets", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field (repeatable)")
        sp.add_argument("--out-dir", help="output directory override")

    sp = sub.add_parser("train", help="train a toy model on synthetic scenes")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="run inference, linking and metrics")
    common(sp)
    sp.add_argument("--checkpoint", help="parameter checkpoint path")
    sp.add_argument("--predictions", help="score an existing tube file instead "
                                          "of running the model")
    sp.add_argument("--annotations", nargs="+",
                    help="annotation documents for --predictions scoring")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="sweep one design axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(experiment.ABLATION_AXES))
    sp.add_argument("--values", help="comma-separated override of sweep values")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("link", help="link per-clip tubelet predictions into tubes")
    sp.add_argument("--predictions", required=True, help="tubelet records (jsonl)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--overlap", type=int, default=8)
    sp.add_argument("--link-iou-min", type=float, default=0.1)
    sp.set_defaults(fn=cmd_link)

    sp = sub.add_parser("render", help="write per-frame overlay images")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--video-index", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, training.TrainAbort) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
