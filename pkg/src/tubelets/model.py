"""Tubelet detection model: tiny factorised video encoder, factorised
query decoder, and box/class prediction heads, with manual forward and
reverse passes on float64 arrays.

The decoder layer follows the pre-norm transformer recipe:

    u = FactSA(LN(q)) + q
    v = FactCA(LN(u), x) + u
    z = MLP(LN(v)) + v

Factorised self-attention runs two attention operations, first within
each frame over the query slots, then along time at each spatial index;
each operation carries its own projections.  Attention over a singleton
axis would only apply a fixed linear map, so those operations are
omitted entirely (this also keeps the zero-layer and single-token
configurations honest in the FLOP accounting).  Factorised
cross-attention restricts queries to visual features from the same
frame.  With ``attention_mode="full"`` the same layer instead attends
over all query tokens and all visual tokens.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad


@dataclass
class EncoderConfig:
    patch_t: int = 2
    patch_hw: int = 8
    d_enc: int = 32
    d_mlp: int = 64
    layers_spatial: int = 1
    layers_temporal: int = 1


@dataclass
class ModelConfig:
    T: int = 16
    S: int = 8
    C: int = 4
    L: int = 2
    d_dec: int = 32
    d_mlp: int = 64
    n_heads: int = 4
    H: int = 64
    W: int = 64
    channels: int = 3
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention_mode: str = "factorised"  # or "full"
    query_mode: str = "factorised"  # "independent" | "binds_action"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_dec % self.n_heads:
            raise ValueError("d_dec must be divisible by n_heads")
        if self.encoder.d_enc % self.n_heads:
            raise ValueError("encoder d_enc must be divisible by n_heads")
        if self.T % self.encoder.patch_t:
            raise ValueError("T must be divisible by patch_t")
        if self.H % self.encoder.patch_hw or self.W % self.encoder.patch_hw:
            raise ValueError("H and W must be divisible by patch_hw")
        if self.L < 0:
            raise ValueError("decoder depth must be >= 0")
        if self.attention_mode not in ("factorised", "full"):
            raise ValueError("attention_mode must be 'factorised' or 'full'")
        if self.query_mode not in ("factorised", "independent", "binds_action"):
            raise ValueError("unknown query_mode")

    @property
    def t_tokens(self) -> int:
        return self.T // self.encoder.patch_t

    @property
    def h(self) -> int:
        return self.H // self.encoder.patch_hw

    @property
    def w(self) -> int:
        return self.W // self.encoder.patch_hw

    @property
    def hw(self) -> int:
        return self.h * self.w

    @property
    def n_slots(self) -> int:
        """Tubelet slots per frame: S, or h*w in the zero-layer mode."""
        return self.S if self.L > 0 else self.hw

    @property
    def head_in(self) -> int:
        return self.d_dec if self.L > 0 else self.encoder.d_enc


@dataclass
class FeatureMap:
    """Encoder output at full temporal resolution."""

    x: np.ndarray  # [T, h, w, d_enc]
    h: int
    w: int
    tensor: Optional[ad.Tensor] = None


@dataclass
class QuerySet:
    q_s: Optional[np.ndarray]  # [S, d_dec]
    q_t: Optional[np.ndarray]  # [T, d_dec]
    q: np.ndarray  # [T, S, d_dec]


@dataclass
class TubeletSet:
    """Per-frame boxes b[T, S, 4] (center form, in (0, 1)) and class
    probabilities a[T, S, C+1]; the last channel is the explicit
    background score."""

    b: np.ndarray
    a: np.ndarray


@dataclass
class DecoderTrace:
    """Per-layer intermediates plus tape handles for the reverse pass."""

    u: list
    v: list
    z: list
    b_node: Optional[ad.Tensor] = None
    a_node: Optional[ad.Tensor] = None


class ModelParams:
    """Named learnable tensors, each carrying a gradient accumulator."""

    def __init__(self):
        self.tensors: dict[str, ad.Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> ad.Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name}")
        t = ad.parameter(value, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list:
        return list(self.tensors)

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self) -> dict:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.tensors.items()}

    def state(self) -> dict:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_state(self, state: dict):
        missing = set(self.tensors) - set(state)
        extra = set(state) - set(self.tensors)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in self.tensors.items():
            if state[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            t.data = np.array(state[k], dtype=np.float64)


def init_scale(shape: tuple) -> float:
    """Scale used for weight matrices: inverse square root of fan-in."""
    return 1.0 / math.sqrt(shape[0])


def _init_linear(p: ModelParams, rng, name: str, d_in: int, d_out: int):
    p.add(f"{name}.w", rng.normal(0.0, init_scale((d_in, d_out)), (d_in, d_out)))
    p.add(f"{name}.b", np.zeros(d_out))


def _init_ln(p: ModelParams, name: str, d: int):
    p.add(f"{name}.g", np.ones(d))
    p.add(f"{name}.b", np.zeros(d))


def _init_attn(p: ModelParams, rng, name: str, d_q: int, d_kv: int, d: int):
    _init_linear(p, rng, f"{name}.q", d_q, d)
    _init_linear(p, rng, f"{name}.k", d_kv, d)
    _init_linear(p, rng, f"{name}.v", d_kv, d)
    _init_linear(p, rng, f"{name}.o", d, d)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Deterministic seeded initialisation.

    Weight matrices are scaled-normal (fan-in scaling), biases and
    positional embeddings start at zero, layer norms at identity, and
    query embeddings are unit normal.
    """
    rng = np.random.default_rng(seed)
    p = ModelParams()
    e = config.encoder
    patch_dim = e.patch_t * e.patch_hw * e.patch_hw * config.channels
    _init_linear(p, rng, "enc.patch", patch_dim, e.d_enc)
    p.add("enc.pos_spatial", np.zeros((config.hw, e.d_enc)))
    p.add("enc.pos_temporal", np.zeros((config.t_tokens, e.d_enc)))
    for kind, n_layers in (("spatial", e.layers_spatial), ("temporal", e.layers_temporal)):
        for i in range(n_layers):
            base = f"enc.{kind}{i}"
            _init_ln(p, f"{base}.ln1", e.d_enc)
            _init_attn(p, rng, f"{base}.attn", e.d_enc, e.d_enc, e.d_enc)
            _init_ln(p, f"{base}.ln2", e.d_enc)
            _init_linear(p, rng, f"{base}.mlp1", e.d_enc, e.d_mlp)
            _init_linear(p, rng, f"{base}.mlp2", e.d_mlp, e.d_enc)

    if config.L > 0:
        if config.query_mode == "independent":
            p.add("dec.q_full", rng.normal(0.0, 1.0, (config.T, config.S, config.d_dec)))
        else:
            p.add("dec.q_s", rng.normal(0.0, 1.0, (config.S, config.d_dec)))
            p.add("dec.q_t", rng.normal(0.0, 1.0, (config.T, config.d_dec)))
        d = config.d_dec
        for l in range(config.L):
            base = f"dec.layer{l}"
            _init_ln(p, f"{base}.ln_sa", d)
            if config.attention_mode == "factorised":
                if config.S > 1:
                    _init_attn(p, rng, f"{base}.sa_spatial", d, d, d)
                if config.T > 1:
                    _init_attn(p, rng, f"{base}.sa_temporal", d, d, d)
            else:
                if config.T * config.S > 1:
                    _init_attn(p, rng, f"{base}.sa_full", d, d, d)
            _init_ln(p, f"{base}.ln_ca_q", d)
            _init_ln(p, f"{base}.ln_ca_x", e.d_enc)
            _init_attn(p, rng, f"{base}.ca", d, e.d_enc, d)
            _init_ln(p, f"{base}.ln_mlp", d)
            _init_linear(p, rng, f"{base}.mlp1", d, config.d_mlp)
            _init_linear(p, rng, f"{base}.mlp2", config.d_mlp, d)
    _init_ln(p, "head.ln", config.head_in)
    hid = config.head_in
    _init_linear(p, rng, "head.box1", hid, hid)
    _init_linear(p, rng, "head.box2", hid, hid)
    _init_linear(p, rng, "head.box3", hid, 4)
    _init_linear(p, rng, "head.cls", hid, config.C + 1)
    return p


def _linear(x: ad.Tensor, p: ModelParams, name: str) -> ad.Tensor:
    return ad.add(ad.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def _ln(x: ad.Tensor, p: ModelParams, name: str) -> ad.Tensor:
    return ad.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def _split_heads(x: ad.Tensor, n_heads: int) -> ad.Tensor:
    """[..., n, d] -> [..., heads, n, dh]"""
    *lead, n, d = x.shape
    dh = d // n_heads
    y = ad.reshape(x, (*lead, n, n_heads, dh))
    return ad.moveaxis(y, -2, -3)

def _merge_heads(x: ad.Tensor) -> ad.Tensor:
    """[..., heads, n, dh] -> [..., n, heads*dh]"""
    *lead, h, n, dh = x.shape
    y = ad.moveaxis(x, -3, -2)
    return ad.reshape(y, (*lead, n, h * dh))


def _attend(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor) -> ad.Tensor:
    """Scaled dot-product attention over the second-to-last axis."""
    dh = q.shape[-1]
    scores = ad.mul(ad.matmul(q, ad.moveaxis(k, -1, -2)), 1.0 / math.sqrt(dh))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def _mha(q_in: ad.Tensor, kv_in: ad.Tensor, p: ModelParams, name: str, n_heads: int) -> ad.Tensor:
    """Multi-head attention; the leading axes of q_in/kv_in are batch."""
    q = _split_heads(_linear(q_in, p, f"{name}.q"), n_heads)
    k = _split_heads(_linear(kv_in, p, f"{name}.k"), n_heads)
    v = _split_heads(_linear(kv_in, p, f"{name}.v"), n_heads)
    out = _merge_heads(_attend(q, k, v))
    return _linear(out, p, f"{name}.o")


def _enc_block(x: ad.Tensor, p: ModelParams, base: str, n_heads: int) -> ad.Tensor:
    """Pre-norm transformer block attending over the second-to-last axis."""
    xn = _ln(x, p, f"{base}.ln1")
    h = ad.add(x, _mha(xn, xn, p, f"{base}.attn", n_heads))
    m = _linear(ad.gelu(_linear(_ln(h, p, f"{base}.ln2"), p, f"{base}.mlp1")), p, f"{base}.mlp2")
    return ad.add(h, m)


def upsample_weights(t_src: int, patch_t: int, t_dst: int):
    """Linear interpolation of patch-center times, endpoints clamped.

    Source token i covers frames [i*patch_t, (i+1)*patch_t) and sits at
    time i*patch_t + (patch_t - 1) / 2.  Returns (i0, i1, w1) so that
    out[t] = (1 - w1[t]) * src[i0[t]] + w1[t] * src[i1[t]].
    """
    centers = np.arange(t_src) * patch_t + (patch_t - 1) / 2.0
    i0 = np.zeros(t_dst, dtype=int)
    i1 = np.zeros(t_dst, dtype=int)
    w1 = np.zeros(t_dst)
    for t in range(t_dst):
        if t <= centers[0]:
            i0[t] = i1[t] = 0
        elif t >= centers[-1]:
            i0[t] = i1[t] = t_src - 1
        else:
            j = int(np.searchsorted(centers, t, side="right")) - 1
            i0[t], i1[t] = j, j + 1
            w1[t] = (t - centers[j]) / (centers[j + 1] - centers[j])
    return i0, i1, w1


def _encoder(clip: np.ndarray, p: ModelParams, cfg: ModelConfig) -> ad.Tensor:
    e = cfg.encoder
    T, H, W, ch = clip.shape
    if (T, H, W, ch) != (cfg.T, cfg.H, cfg.W, cfg.channels):
        raise ValueError(f"clip shape {clip.shape} does not match config "
                         f"({cfg.T}, {cfg.H}, {cfg.W}, {cfg.channels})")
    tt, h, w = cfg.t_tokens, cfg.h, cfg.w
    pt, ph = e.patch_t, e.patch_hw
    # patch tokenisation: [tt, h, w, pt*ph*ph*ch]
    patches = clip.reshape(tt, pt, h, ph, w, ph, ch)
    patches = patches.transpose(0, 2, 4, 1, 3, 5, 6).reshape(tt, h, w, pt * ph * ph * ch)
    tokens = _linear(ad.Tensor(patches), p, "enc.patch")
    tokens = ad.reshape(tokens, (tt, h * w, e.d_enc))
    tokens = ad.add(tokens, p["enc.pos_spatial"])
    tokens = ad.add(tokens, ad.reshape(p["enc.pos_temporal"], (tt, 1, e.d_enc)))
    x = tokens  # [tt, hw, d]
    for i in range(e.layers_spatial):
        x = _enc_block(x, p, f"enc.spatial{i}", cfg.n_heads)
    x = ad.moveaxis(x, 0, 1)  # [hw, tt, d]
    for i in range(e.layers_temporal):
        x = _enc_block(x, p, f"enc.temporal{i}", cfg.n_heads)
    x = ad.moveaxis(x, 0, 1)  # [tt, hw, d]
    i0, i1, w1 = upsample_weights(tt, pt, cfg.T)
    lo = ad.take(x, i0, axis=0)
    hi = ad.take(x, i1, axis=0)
    wcol = w1.reshape(cfg.T, 1, 1)
    x = ad.add(ad.mul(lo, 1.0 - wcol), ad.mul(hi, wcol))  # [T, hw, d]
    return ad.reshape(x, (cfg.T, h, w, e.d_enc))


def encoder_forward(clip: np.ndarray, params: ModelParams, config: ModelConfig) -> FeatureMap:
    t = _encoder(np.asarray(clip, dtype=np.float64), params, config)
    return FeatureMap(x=t.data, h=config.h, w=config.w, tensor=t)


def query_set(params: ModelParams, config: ModelConfig) -> QuerySet:
    if config.L == 0:
        raise ValueError("zero-layer mode has no learned queries")
    if config.query_mode == "independent":
        q = params["dec.q_full"].data
        return QuerySet(q_s=None, q_t=None, q=q.copy())
    q_s = params["dec.q_s"].data
    q_t = params["dec.q_t"].data
    return QuerySet(q_s=q_s.copy(), q_t=q_t.copy(), q=q_t[:, None, :] + q_s[None, :, :])


def _materialise_queries(p: ModelParams, cfg: ModelConfig) -> ad.Tensor:
    if cfg.query_mode == "independent":
        return p["dec.q_full"]
    qt = ad.reshape(p["dec.q_t"], (cfg.T, 1, cfg.d_dec))
    qs = ad.reshape(p["dec.q_s"], (1, cfg.S, cfg.d_dec))
    return ad.add(qt, qs)


def _maybe_dropout(x: ad.Tensor, cfg: ModelConfig, rng) -> ad.Tensor:
    if rng is None or cfg.dropout_rate <= 0.0:
        return x
    return ad.dropout(x, cfg.dropout_rate, rng)


def _fact_self_attention(q_ln: ad.Tensor, p: ModelParams, base: str, cfg: ModelConfig):
    """Spatial attend (over slots, per frame) then temporal attend (over
    frames, per slot); singleton axes are skipped.  None when both are."""
    x = q_ln
    ran = False
    if cfg.S > 1:
        x = _mha(x, x, p, f"{base}.sa_spatial", cfg.n_heads)
        ran = True
    if cfg.T > 1:
        xt = ad.moveaxis(x, 0, 1)  # [S, T, d]
        xt = _mha(xt, xt, p, f"{base}.sa_temporal", cfg.n_heads)
        x = ad.moveaxis(xt, 0, 1)
        ran = True
    return x if ran else None


def _full_self_attention(q_ln: ad.Tensor, p: ModelParams, base: str, cfg: ModelConfig):
    n = cfg.T * cfg.S
    if n <= 1:
        return None
    flat = ad.reshape(q_ln, (n, cfg.d_dec))
    out = _mha(flat, flat, p, f"{base}.sa_full", cfg.n_heads)
    return ad.reshape(out, (cfg.T, cfg.S, cfg.d_dec))


def _cross_attention(u_ln: ad.Tensor, x_ln: ad.Tensor, p: ModelParams, base: str,
                     cfg: ModelConfig) -> ad.Tensor:
    name = f"{base}.ca"
    if cfg.attention_mode == "factorised":
        # queries attend only to features of the same frame
        q = _split_heads(_linear(u_ln, p, f"{name}.q"), cfg.n_heads)  # [T, H, S, dh]
        k = _split_heads(_linear(x_ln, p, f"{name}.k"), cfg.n_heads)  # [T, H, hw, dh]
        v = _split_heads(_linear(x_ln, p, f"{name}.v"), cfg.n_heads)
        out = _merge_heads(_attend(q, k, v))
        return _linear(out, p, f"{name}.o")
    n, m = u_ln.shape[0] * u_ln.shape[1], x_ln.shape[0] * x_ln.shape[1]
    qf = ad.reshape(u_ln, (n, cfg.d_dec))
    xf = ad.reshape(x_ln, (m, x_ln.shape[-1]))
    q = _split_heads(_linear(qf, p, f"{name}.q"), cfg.n_heads)
    k = _split_heads(_linear(xf, p, f"{name}.k"), cfg.n_heads)
    v = _split_heads(_linear(xf, p, f"{name}.v"), cfg.n_heads)
    out = _linear(_merge_heads(_attend(q, k, v)), p, f"{name}.o")
    return ad.reshape(out, (u_ln.shape[0], u_ln.shape[1], cfg.d_dec))


def _heads(z: ad.Tensor, p: ModelParams, cfg: ModelConfig):
    zn = _ln(z, p, "head.ln")
    hbox = ad.relu(_linear(zn, p, "head.box1"))
    hbox = ad.relu(_linear(hbox, p, "head.box2"))
    b = ad.sigmoid(_linear(hbox, p, "head.box3"))
    if cfg.query_mode == "binds_action" and cfg.L > 0:
        pooled = ad.tmean(zn, axis=0)  # [S, d]
        logits = _linear(pooled, p, "head.cls")
        logits = ad.add(ad.reshape(logits, (1, *logits.shape)),
                        ad.Tensor(np.zeros((z.shape[0], *logits.shape))))
    else:
        logits = _linear(zn, p, "head.cls")
    a = ad.sigmoid(logits)
    return b, a


def decoder_forward(x: FeatureMap, params: ModelParams, config: ModelConfig,
                    dropout_rng=None):
    """Decode visual features into a TubeletSet; returns the trace too."""
    if x.tensor is None:
        xt = ad.Tensor(x.x)
    else:
        xt = x.tensor
    T, h, w, d_enc = xt.shape
    xt2 = ad.reshape(xt, (T, h * w, d_enc))
    trace = DecoderTrace(u=[], v=[], z=[])
    if config.L == 0:
        z = xt2
    else:
        q = _materialise_queries(params, config)
        z = q
        for l in range(config.L):
            base = f"dec.layer{l}"
            q_ln = _ln(z, params, f"{base}.ln_sa")
            if config.attention_mode == "factorised":
                sa = _fact_self_attention(q_ln, params, base, config)
            else:
                sa = _full_self_attention(q_ln, params, base, config)
            u = z if sa is None else ad.add(z, _maybe_dropout(sa, config, dropout_rng))
            ca = _cross_attention(_ln(u, params, f"{base}.ln_ca_q"),
                                  _ln(xt2, params, f"{base}.ln_ca_x"),
                                  params, base, config)
            v = ad.add(u, _maybe_dropout(ca, config, dropout_rng))
            m = _linear(ad.gelu(_linear(_ln(v, params, f"{base}.ln_mlp"),
                                        params, f"{base}.mlp1")), params, f"{base}.mlp2")
            z = ad.add(v, _maybe_dropout(m, config, dropout_rng))
            trace.u.append(u.data.copy())
            trace.v.append(v.data.copy())
            trace.z.append(z.data.copy())
    b, a = _heads(z, params, config)
    trace.b_node, trace.a_node = b, a
    return TubeletSet(b=b.data.copy(), a=a.data.copy()), trace


def forward(clip: np.ndarray, params: ModelParams, config: ModelConfig,
            dropout_rng=None):
    """Full forward pass: encoder then decoder."""
    fmap = encoder_forward(clip, params, config)
    return decoder_forward(fmap, params, config, dropout_rng=dropout_rng)


def backward(trace: DecoderTrace, grad_b: np.ndarray, grad_a: np.ndarray,
             params: ModelParams):
    """Reverse pass seeded with upstream loss gradients on (b, a).

    Gradients accumulate into the parameter tensors (summed, never
    overwritten); call params.zero_grads() between optimisation steps.
    """
    if trace.b_node is None or trace.a_node is None:
        raise ValueError("trace does not contain tape outputs; rerun forward")
    surrogate = ad.add(ad.tsum(ad.mul(trace.b_node, ad.Tensor(grad_b))),
                       ad.tsum(ad.mul(trace.a_node, ad.Tensor(grad_a))))
    surrogate.backward()


CHECKPOINT_MAGIC = "tubelets-params v1"


def save_params(params: ModelParams, path):
    """Flat little-endian float64 payload preceded by a text manifest."""
    names = params.names()
    manifest = io.StringIO()
    manifest.write(f"{CHECKPOINT_MAGIC}\n")
    manifest.write(f"count {len(names)}\n")
    offset = 0
    blobs = []
    for name in names:
        arr = params[name].data
        shape = ",".join(str(s) for s in arr.shape) if arr.ndim else "scalar"
        manifest.write(f"{name} {shape} {offset}\n")
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        blobs.append(blob)
        offset += len(blob)
    manifest.write("data\n")
    with open(path, "wb") as f:
        f.write(manifest.getvalue().encode("utf-8"))
        for blob in blobs:
            f.write(blob)


def load_params_state(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    header_end = raw.index(b"data\n") + len(b"data\n")
    header = raw[:header_end].decode("utf-8").splitlines()
    if header[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic: {header[0]!r}")
    count = int(header[1].split()[1])
    state = {}
    payload = raw[header_end:]
    for line in header[2:2 + count]:
        name, shape_s, offset_s = line.rsplit(" ", 2)
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
        n = int(np.prod(shape)) if shape else 1
        off = int(offset_s)
        arr = np.frombuffer(payload[off:off + 8 * n], dtype="<f8").reshape(shape)
        state[name] = arr.astype(np.float64)
    return state


def load_params(path, config: ModelConfig, seed: int = 0) -> ModelParams:
    """Instantiate parameters for ``config`` and load a checkpoint into them."""
    p = init_params(config, seed)
    p.load_state(load_params_state(path))
    return p
