import numpy as np
import pytest

import tubelets.autodiff as ad
from conftest import tiny_model_config
from tubelets import model
from tubelets.model import EncoderConfig, ModelConfig


class TestConfig:
    def test_divisibility_checks(self):
        with pytest.raises(ValueError):
            tiny_model_config(d_dec=15)
        with pytest.raises(ValueError):
            tiny_model_config(T=5)
        with pytest.raises(ValueError):
            tiny_model_config(H=20)
        with pytest.raises(ValueError):
            tiny_model_config(L=-1)

    def test_zero_layer_slots(self):
        cfg = tiny_model_config(L=0)
        assert cfg.n_slots == cfg.hw
        assert cfg.head_in == cfg.encoder.d_enc


class TestInit:
    def test_same_seed_identical(self):
        cfg = tiny_model_config()
        p1 = model.init_params(cfg, seed=5)
        p2 = model.init_params(cfg, seed=5)
        assert p1.names() == p2.names()
        for k in p1.names():
            assert np.array_equal(p1[k].data, p2[k].data)

    def test_different_seed_differs(self):
        cfg = tiny_model_config()
        p1 = model.init_params(cfg, seed=1)
        p2 = model.init_params(cfg, seed=2)
        assert any(not np.array_equal(p1[k].data, p2[k].data) for k in p1.names())

    def test_weight_std_matches_configured_scale(self):
        # a 100 x 100 weight gives 10^4 samples of the scaled normal
        cfg = ModelConfig(T=4, S=2, C=2, L=1, d_dec=100, d_mlp=100, n_heads=2,
                          H=20, W=20, channels=1,
                          encoder=EncoderConfig(patch_t=2, patch_hw=10, d_enc=100,
                                                d_mlp=100, layers_spatial=1,
                                                layers_temporal=1))
        p = model.init_params(cfg, seed=0)
        w = p["dec.layer0.mlp1.w"].data
        assert w.shape == (100, 100)
        want = model.init_scale(w.shape)
        assert abs(w.std() - want) / want < 0.10

    def test_biases_and_positions_zero(self):
        cfg = tiny_model_config()
        p = model.init_params(cfg, seed=0)
        assert np.all(p["enc.patch.b"].data == 0)
        assert np.all(p["enc.pos_spatial"].data == 0)
        assert np.all(p["head.box3.b"].data == 0)


class TestEncoder:
    def test_shape_arithmetic(self):
        cfg = ModelConfig(T=4, S=2, C=2, L=1, d_dec=16, d_mlp=32, n_heads=2,
                          H=32, W=32, channels=3,
                          encoder=EncoderConfig(patch_t=2, patch_hw=16, d_enc=16,
                                                d_mlp=32, layers_spatial=1,
                                                layers_temporal=1))
        p = model.init_params(cfg, seed=0)
        fmap = model.encoder_forward(np.zeros((4, 32, 32, 3)), p, cfg)
        assert fmap.x.shape == (4, 2, 2, 16)

    def test_zero_clip_zero_activations(self):
        cfg = tiny_model_config()
        p = model.init_params(cfg, seed=0)
        fmap = model.encoder_forward(np.zeros((cfg.T, cfg.H, cfg.W, cfg.channels)), p, cfg)
        assert np.all(fmap.x == 0.0)

    def test_dim_mismatch_rejected(self):
        cfg = tiny_model_config()
        p = model.init_params(cfg, seed=0)
        with pytest.raises(ValueError, match="does not match config"):
            model.encoder_forward(np.zeros((cfg.T, cfg.H + 8, cfg.W, cfg.channels)), p, cfg)

    def test_upsample_matches_interp_oracle(self):
        i0, i1, w1 = model.upsample_weights(t_src=2, patch_t=2, t_dst=4)
        src = np.array([3.0, 7.0])
        got = (1 - w1) * src[i0] + w1 * src[i1]
        centers = np.array([0.5, 2.5])
        want = np.interp(np.arange(4), centers, src)
        assert np.allclose(got, want, atol=1e-12)
        # endpoints clamp
        assert got[0] == 3.0 and got[3] == 7.0

    def test_upsample_oracle_random(self):
        rng = np.random.default_rng(0)
        for t_src, pt in ((3, 4), (5, 2), (8, 2)):
            i0, i1, w1 = model.upsample_weights(t_src, pt, t_src * pt)
            src = rng.normal(size=t_src)
            got = (1 - w1) * src[i0] + w1 * src[i1]
            centers = np.arange(t_src) * pt + (pt - 1) / 2
            want = np.interp(np.arange(t_src * pt), centers, src)
            assert np.allclose(got, want, atol=1e-12)


def _np_ln(x, g, b, eps=1e-12):
    mu = x.mean(-1, keepdims=True)
    v = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(v + eps) * g + b


def _np_masked_mha(x_q, x_kv, weights, n_heads, mask):
    """Full multi-head attention with an additive block mask; the oracle
    for the factorised attention equivalence checks."""
    wq, bq, wk, bk, wv, bv, wo, bo = weights
    n, d = x_q.shape
    m = x_kv.shape[0]
    dh = d // n_heads
    q = (x_q @ wq + bq).reshape(n, n_heads, dh).transpose(1, 0, 2)
    k = (x_kv @ wk + bk).reshape(m, n_heads, dh).transpose(1, 0, 2)
    v = (x_kv @ wv + bv).reshape(m, n_heads, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh) + mask[None]
    scores = scores - scores.max(-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(-1, keepdims=True)
    out = (attn @ v).transpose(1, 0, 2).reshape(n, d)
    return out @ wo + bo


def _attn_weights(p, name):
    return tuple(p[f"{name}.{part}.{wb}"].data for part in ("q", "k", "v", "o")
                 for wb in ("w", "b"))


class TestFactorisationEquivalence:
    def setup_method(self):
        # T=3, S=2, hw=4 (2x2 grid)
        self.cfg = ModelConfig(T=3, S=2, C=2, L=1, d_dec=16, d_mlp=32, n_heads=2,
                               H=16, W=16, channels=1,
                               encoder=EncoderConfig(patch_t=3, patch_hw=8, d_enc=8,
                                                     d_mlp=16, layers_spatial=1,
                                                     layers_temporal=1))
        self.params = model.init_params(self.cfg, seed=0)
        rng = np.random.default_rng(1)
        self.q_in = rng.normal(size=(3, 2, 16))
        self.x_in = rng.normal(size=(3, 4, 8))

    def test_factorised_ca_equals_masked_full_ca(self):
        cfg, p = self.cfg, self.params
        got = model._cross_attention(ad.Tensor(self.q_in), ad.Tensor(self.x_in),
                                     p, "dec.layer0", cfg).data
        T, S, hw = 3, 2, 4
        mask = np.full((T * S, T * hw), -np.inf)
        for t in range(T):
            mask[t * S:(t + 1) * S, t * hw:(t + 1) * hw] = 0.0
        want = _np_masked_mha(self.q_in.reshape(T * S, 16), self.x_in.reshape(T * hw, 8),
                              _attn_weights(p, "dec.layer0.ca"), cfg.n_heads, mask)
        assert np.abs(got.reshape(T * S, 16) - want).max() < 1e-10

    def test_spatial_sa_step_equals_masked_full_sa(self):
        cfg, p = self.cfg, self.params
        got = model._mha(ad.Tensor(self.q_in), ad.Tensor(self.q_in), p,
                         "dec.layer0.sa_spatial", cfg.n_heads).data
        T, S = 3, 2
        flat = self.q_in.reshape(T * S, 16)
        mask = np.full((T * S, T * S), -np.inf)
        for t in range(T):
            mask[t * S:(t + 1) * S, t * S:(t + 1) * S] = 0.0
        want = _np_masked_mha(flat, flat, _attn_weights(p, "dec.layer0.sa_spatial"),
                              cfg.n_heads, mask)
        assert np.abs(got.reshape(T * S, 16) - want).max() < 1e-10

    def test_temporal_sa_step_equals_masked_full_sa(self):
        cfg, p = self.cfg, self.params
        moved = ad.moveaxis(ad.Tensor(self.q_in), 0, 1)
        got = ad.moveaxis(model._mha(moved, moved, p, "dec.layer0.sa_temporal",
                                     cfg.n_heads), 0, 1).data
        T, S = 3, 2
        flat = self.q_in.reshape(T * S, 16)
        mask = np.full((T * S, T * S), -np.inf)
        for t in range(T):
            for t2 in range(T):
                for s in range(S):
                    mask[t * S + s, t2 * S + s] = 0.0
        want = _np_masked_mha(flat, flat, _attn_weights(p, "dec.layer0.sa_temporal"),
                              cfg.n_heads, mask)
        assert np.abs(got.reshape(T * S, 16) - want).max() < 1e-10


class TestDecoder:
    def test_residual_identity_with_zero_weights(self, tiny_config):
        cfg = tiny_config
        p = model.init_params(cfg, seed=0)
        for name in p.names():
            if name.startswith("dec.layer") and (".sa_" in name or ".ca." in name
                                                 or ".mlp" in name):
                p[name].data = np.zeros_like(p[name].data)
        rng = np.random.default_rng(0)
        clip = rng.uniform(0, 1, (cfg.T, cfg.H, cfg.W, cfg.channels))
        fmap = model.encoder_forward(clip, p, cfg)
        _, trace = model.decoder_forward(fmap, p, cfg)
        from tubelets.model import query_set
        q = query_set(p, cfg).q
        for layer in range(cfg.L):
            assert np.array_equal(trace.z[layer], q)

    def test_materialised_queries_equal_broadcast_sum(self, tiny_config):
        p = model.init_params(tiny_config, seed=3)
        qs = model.query_set(p, tiny_config)
        assert np.array_equal(qs.q, qs.q_t[:, None, :] + qs.q_s[None, :, :])

    def test_output_shapes_and_ranges(self, tiny_config):
        cfg = tiny_config
        p = model.init_params(cfg, seed=0)
        clip = np.random.default_rng(0).uniform(0, 1, (cfg.T, cfg.H, cfg.W, cfg.channels))
        ts, trace = model.forward(clip, p, cfg)
        assert ts.b.shape == (cfg.T, cfg.S, 4)
        assert ts.a.shape == (cfg.T, cfg.S, cfg.C + 1)
        assert np.all((ts.b > 0) & (ts.b < 1))
        assert np.all((ts.a > 0) & (ts.a < 1))
        assert len(trace.z) == cfg.L

    def test_forward_deterministic(self, tiny_config):
        cfg = tiny_config
        p = model.init_params(cfg, seed=0)
        clip = np.random.default_rng(1).uniform(0, 1, (cfg.T, cfg.H, cfg.W, cfg.channels))
        t1, _ = model.forward(clip, p, cfg)
        t2, _ = model.forward(clip, p, cfg)
        assert np.array_equal(t1.b, t2.b) and np.array_equal(t1.a, t2.a)

    def test_zero_layer_heads_on_features(self):
        cfg = tiny_model_config(L=0)
        p = model.init_params(cfg, seed=0)
        clip = np.random.default_rng(0).uniform(0, 1, (cfg.T, cfg.H, cfg.W, cfg.channels))
        ts, trace = model.forward(clip, p, cfg)
        assert ts.b.shape == (cfg.T, cfg.hw, 4)
        assert ts.a.shape == (cfg.T, cfg.hw, cfg.C + 1)
        assert trace.z == []

    def test_spatial_query_permutation_equivariance(self, tiny_config):
        cfg = tiny_config
        p = model.init_params(cfg, seed=0)
        clip = np.random.default_rng(2).uniform(0, 1, (cfg.T, cfg.H, cfg.W, cfg.channels))
        base, _ = model.forward(clip, p, cfg)
        perm = np.array([2, 0, 1])
        p2 = model.init_params(cfg, seed=0)
        p2["dec.q_s"].data = p2["dec.q_s"].data[perm]
        permuted, _ = model.forward(clip, p2, cfg)
        assert np.allclose(permuted.b, base.b[:, perm], atol=1e-12)
        assert np.allclose(permuted.a, base.a[:, perm], atol=1e-12)

    def test_full_attention_mode_runs(self):
        cfg = tiny_model_config(attention_mode="full")
        p = model.init_params(cfg, seed=0)
        clip = np.random.default_rng(0).uniform(0, 1, (cfg.T, cfg.H, cfg.W, cfg.channels))
        ts, _ = model.forward(clip, p, cfg)
        assert ts.b.shape == (cfg.T, cfg.S, 4)

    def test_independent_and_binds_action_modes(self):
        for qm in ("independent", "binds_action"):
            cfg = tiny_model_config(query_mode=qm)
            p = model.init_params(cfg, seed=0)
            clip = np.random.default_rng(0).uniform(0, 1, (cfg.T, cfg.H, cfg.W, cfg.channels))
            ts, _ = model.forward(clip, p, cfg)
            assert ts.a.shape == (cfg.T, cfg.S, cfg.C + 1)
            if qm == "binds_action":
                # pooled classification: scores constant across frames
                assert np.allclose(ts.a[0], ts.a[-1], atol=1e-12)

    def test_dropout_flag(self, tiny_config):
        cfg = tiny_model_config(dropout_rate=0.2)
        p = model.init_params(cfg, seed=0)
        clip = np.random.default_rng(0).uniform(0, 1, (cfg.T, cfg.H, cfg.W, cfg.channels))
        t1, _ = model.forward(clip, p, cfg, dropout_rng=np.random.default_rng(1))
        t2, _ = model.forward(clip, p, cfg, dropout_rng=np.random.default_rng(1))
        t3, _ = model.forward(clip, p, cfg, dropout_rng=np.random.default_rng(2))
        t4, _ = model.forward(clip, p, cfg)
        assert np.array_equal(t1.b, t2.b)
        assert not np.array_equal(t1.b, t3.b)
        assert not np.array_equal(t1.b, t4.b)


class TestBackward:
    def test_zero_upstream_zero_grads(self, tiny_config):
        cfg = tiny_config
        p = model.init_params(cfg, seed=0)
        clip = np.random.default_rng(0).uniform(0, 1, (cfg.T, cfg.H, cfg.W, cfg.channels))
        ts, trace = model.forward(clip, p, cfg)
        model.backward(trace, np.zeros_like(ts.b), np.zeros_like(ts.a), p)
        assert all(np.all(g == 0) for g in p.grads().values())

    def test_backward_linearity(self, tiny_config):
        cfg = tiny_config
        p = model.init_params(cfg, seed=0)
        rng = np.random.default_rng(0)
        clip = rng.uniform(0, 1, (cfg.T, cfg.H, cfg.W, cfg.channels))
        ts, trace = model.forward(clip, p, cfg)
        g1b = rng.normal(size=ts.b.shape)
        g1a = rng.normal(size=ts.a.shape)
        g2b = rng.normal(size=ts.b.shape)
        g2a = rng.normal(size=ts.a.shape)
        p.zero_grads()
        _, tr = model.forward(clip, p, cfg)
        model.backward(tr, g1b + g2b, g1a + g2a, p)
        combined = p.grads()
        p.zero_grads()
        _, tr = model.forward(clip, p, cfg)
        model.backward(tr, g1b, g1a, p)
        _, tr = model.forward(clip, p, cfg)
        model.backward(tr, g2b, g2a, p)
        summed = p.grads()
        for k in combined:
            assert np.allclose(combined[k], summed[k], atol=1e-9)

    def test_missing_trace_raises(self, tiny_config):
        trace = model.DecoderTrace(u=[], v=[], z=[])
        p = model.init_params(tiny_config, seed=0)
        with pytest.raises(ValueError, match="trace"):
            model.backward(trace, np.zeros(1), np.zeros(1), p)

    def test_accumulators_sum(self, tiny_config):
        cfg = tiny_config
        p = model.init_params(cfg, seed=0)
        clip = np.random.default_rng(0).uniform(0, 1, (cfg.T, cfg.H, cfg.W, cfg.channels))
        ts, trace = model.forward(clip, p, cfg)
        gb = np.ones_like(ts.b)
        ga = np.ones_like(ts.a)
        model.backward(trace, gb, ga, p)
        once = {k: g.copy() for k, g in p.grads().items()}
        _, tr2 = model.forward(clip, p, cfg)
        model.backward(tr2, gb, ga, p)
        twice = p.grads()
        for k in once:
            assert np.allclose(twice[k], 2 * once[k], atol=1e-12)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tiny_config, tmp_path):
        p = model.init_params(tiny_config, seed=7)
        path = tmp_path / "params.ckpt"
        model.save_params(p, path)
        state = model.load_params_state(path)
        assert set(state) == set(p.names())
        for k in p.names():
            assert np.array_equal(state[k], p[k].data)
        p2 = model.load_params(path, tiny_config, seed=0)
        for k in p.names():
            assert np.array_equal(p2[k].data, p[k].data)

    def test_shape_mismatch_rejected(self, tiny_config, tmp_path):
        p = model.init_params(tiny_config, seed=0)
        path = tmp_path / "params.ckpt"
        model.save_params(p, path)
        other = tiny_model_config(d_dec=32, n_heads=4)
        with pytest.raises(ValueError):
            model.load_params(path, other, seed=0)
