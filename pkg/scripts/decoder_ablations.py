#!/usr/bin/env python3
"""Decoder design sweeps: depth, attention pattern, query parameterisation
and matching mode, each trained with shared seeds at desk scale.

Usage: python scripts/decoder_ablations.py [axis] [out_dir]
where axis is one of: decoder_layers, attention_mode, query_mode,
matching_mode (default: decoder_layers).
"""

import sys

from tubelets import experiment, model, training


def main(axis="decoder_layers", out_dir=None):
    cfg = experiment.ExperimentConfig()
    cfg.model = model.ModelConfig(
        T=16, S=4, C=4, L=2, d_dec=32, d_mlp=64, n_heads=4, H=64, W=64, channels=3,
        encoder=model.EncoderConfig(patch_t=2, patch_hw=8, d_enc=32, d_mlp=64,
                                    layers_spatial=1, layers_temporal=1))
    cfg.data = experiment.DataConfig(n_videos=8, n_actors=2, n_classes=4,
                                     video_length=16, H=64, W=64)
    cfg.optim = training.OptimConfig(lr=1e-3, steps=1500, batch_size=4)
    cfg.out_dir = out_dir or f"runs/ablate_{axis}"
    cfg.validate()

    rows, path = experiment.run_ablation(cfg, axis)
    cols = [c for c in rows[0] if c != "setting"]
    print(f"{'setting':>14}  " + "  ".join(f"{c:>16}" for c in cols))
    for row in rows:
        print(f"{row['setting']:>14}  " + "  ".join(f"{row[c]:>16.4f}" for c in cols))
    print(f"table: {path}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
