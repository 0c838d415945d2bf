"""Analytic per-decoder-layer FLOP accounting for the two attention modes.

Counts one multiply-add per scalar product term of each matrix product
(the MAC convention used by common FLOP profilers) and reports GFLOPs.
Attention operations over a singleton axis are omitted by the model and
therefore contribute nothing here.  Key/value projections act on the
encoder-width features, per layer.
"""

from __future__ import annotations

from .model import ModelConfig


def flop_breakdown(config: ModelConfig, attention_mode: str) -> dict:
    """Multiply-add counts per decoder layer, split by component.

    Components: sa (self-attention, projections plus attends), ca_q
    (query/output projections of cross-attention), ca_kv (key/value
    projections, scale with the feature-map size), ca_attn (the
    cross-attention contraction), mlp.
    """
    if attention_mode not in ("factorised", "full"):
        raise ValueError("attention_mode must be 'factorised' or 'full'")
    T, S, d = config.T, config.S, config.d_dec
    hw = config.hw
    d_enc = config.encoder.d_enc
    n = T * S
    m = T * hw
    proj_set = 4 * n * d * d  # q, k, v, o over the query tokens

    if attention_mode == "factorised":
        sa = 0
        if S > 1:
            sa += proj_set + 2 * T * S * S * d
        if T > 1:
            sa += proj_set + 2 * S * T * T * d
        ca_attn = 2 * T * S * hw * d
    else:
        sa = proj_set + 2 * n * n * d if n > 1 else 0
        ca_attn = 2 * n * m * d

    ca_q = 2 * n * d * d
    ca_kv = 2 * m * d_enc * d
    mlp = 2 * n * d * config.d_mlp
    total = sa + ca_q + ca_kv + ca_attn + mlp
    return {"sa": sa, "ca_q": ca_q, "ca_kv": ca_kv, "ca_attn": ca_attn,
            "mlp": mlp, "total": total}


def flop_count(config: ModelConfig, attention_mode: str) -> float:
    """GFLOPs per decoder layer for the given attention mode."""
    return flop_breakdown(config, attention_mode)["total"] / 1e9
