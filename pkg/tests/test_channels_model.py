import numpy as np
import pytest

from timemosaic import autodiff as ad
from timemosaic import channels as ch
from timemosaic.model import ModelConfig, build_model
from timemosaic.patching import ConfigurationError, GranularitySet


def _weights(mode, d=8, c=3, r=2, f=5, n_global=2, seed=0):
    return ch.init_channel_weights(mode, d, c, r, f, np.random.default_rng(seed),
                                   n_global=n_global)


class TestChannelTokens:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.gset = GranularitySet((8, 16, 32), 8)
        self.x = rng.normal(size=(4, 64, 3))      # B=4, L=64, C=3
        self.marks = rng.normal(size=(4, 64, 5))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigurationError):
            _weights("cd-x")

    def test_ci_has_no_tokens_or_params(self):
        w = _weights("ci")
        assert ch.build_extra_tokens(w, self.x, self.marks, self.gset) is None
        assert w.parameters() == {}

    def test_ci_plus_shapes_and_identity(self):
        w = _weights("ci+", n_global=2)
        t = ch.build_extra_tokens(w, self.x, self.marks, self.gset)
        assert t.shape == (12, 3, 8)  # B*C streams, 1 identity + 2 global
        # stream (b, c) carries channel c's identity token
        for b in range(4):
            for c in range(3):
                assert np.array_equal(t.data[b * 3 + c, 0], w.channel_tokens.data[c])
                assert np.array_equal(t.data[b * 3 + c, 1:], w.global_tokens.data)

    def test_ci_plus_no_globals(self):
        w = _weights("ci+", n_global=0)
        t = ch.build_extra_tokens(w, self.x, self.marks, self.gset)
        assert t.shape == (12, 1, 8)

    def test_cd_g_summarises_region_means(self):
        w = _weights("cd-g")
        t = ch.build_extra_tokens(w, self.x, None, self.gset)
        assert t.shape == (12, 1, 8)
        # all streams of one batch element share the token, and it equals
        # the projected per-region cross-channel mean
        summary = self.x.reshape(4, 2, 32, 3).mean(axis=(2, 3))
        ref = summary @ w.w_region.data + w.b_region.data
        for b in range(4):
            for c in range(3):
                assert np.allclose(t.data[b * 3 + c, 0], ref[b])

    def test_cd_p_and_cd_a_tokens(self):
        for mode, pooled in (("cd-p", self.marks.mean(axis=1)),
                             ("cd-a", self.marks[:, 0, :])):
            w = _weights(mode)
            t = ch.build_extra_tokens(w, self.x, self.marks, self.gset)
            ref = pooled @ w.w_marks.data + w.b_marks.data
            assert t.shape == (12, 1, 8)
            assert np.allclose(t.data[::3, 0], ref)

    def test_mark_modes_require_marks(self):
        for mode in ("cd-p", "cd-a"):
            with pytest.raises(ConfigurationError):
                ch.build_extra_tokens(_weights(mode), self.x, None, self.gset)

    def test_cd_p_additive_path(self):
        w = _weights("cd-p")
        add = ch.additive_mark_features(w, self.marks, self.gset, 3)
        # 64 / f_min=8 -> 8 slots
        assert add.shape == (12, 8, 8)
        ref = self.marks[:, ::8, :] @ w.w_feat.data
        assert np.allclose(add.data[::3], ref)
        assert ch.additive_mark_features(_weights("ci+"), self.marks, self.gset, 3) is None


class TestModel:
    def _cfg(self, **kw):
        base = dict(lookback=64, horizon=12, n_channels=2, granularities=(8, 16, 32),
                    d_model=16, d_ff=32, n_layers=1, n_heads=2, prompt_len=2)
        base.update(kw)
        return ModelConfig(**base)

    def test_default_segmentation(self):
        cfg = self._cfg(horizon=96)
        assert cfg.segment_len == 32
        assert cfg.segment_lengths == [32, 32, 32]

    def test_output_shape_and_determinism(self):
        cfg = self._cfg()
        m = build_model(cfg, seed=0)
        x = np.random.default_rng(0).normal(size=(3, 64, 2))
        a = m.forward(x, training=False).prediction.data
        b = m.forward(x, training=False).prediction.data
        assert a.shape == (3, 12, 2)
        assert np.array_equal(a, b)

    def test_same_seed_same_init(self):
        cfg = self._cfg()
        p1 = build_model(cfg, seed=3).parameters()
        p2 = build_model(cfg, seed=3).parameters()
        for k in p1:
            assert np.array_equal(p1[k].data, p2[k].data)

    def test_all_channel_modes_run(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 64, 2))
        marks = rng.normal(size=(2, 64, 5))
        for mode in ch.CHANNEL_MODES:
            m = build_model(self._cfg(channel_mode=mode), seed=0)
            out = m.forward(x, marks, training=False)
            assert out.prediction.shape == (2, 12, 2)

    def test_segment_independence(self):
        # decoding depends only on the segment's own prompt/head: zeroing one
        # segment's head leaves every other segment's output bitwise intact
        cfg = self._cfg(horizon=12, segment_len=4)
        m = build_model(cfg, seed=1)
        x = np.random.default_rng(1).normal(size=(2, 64, 2))
        full = m.forward(x, training=False).prediction.data
        m.heads[1].w.data[...] = 0.0
        m.heads[1].b.data[...] = 0.0
        cut = m.forward(x, training=False).prediction.data
        assert np.array_equal(full[:, :4], cut[:, :4])
        assert np.array_equal(full[:, 8:], cut[:, 8:])
        assert np.array_equal(cut[:, 4:8], np.zeros_like(cut[:, 4:8]))

    def test_instance_norm_shifts_are_undone(self):
        # adding a per-window constant offset shifts predictions by the same
        # offset when instance normalization is on
        cfg = self._cfg(instance_norm=True)
        m = build_model(cfg, seed=2)
        x = np.random.default_rng(2).normal(size=(1, 64, 2))
        base = m.forward(x, training=False).prediction.data
        shifted = m.forward(x + 5.0, training=False).prediction.data
        assert np.allclose(shifted, base + 5.0, atol=1e-9)

    def test_parameter_count_additivity(self):
        c1 = build_model(self._cfg(n_layers=1), seed=0).parameter_counts()
        c2 = build_model(self._cfg(n_layers=2), seed=0).parameter_counts()
        per_layer = c2["encoder"] - c1["encoder"]
        c3 = build_model(self._cfg(n_layers=3), seed=0).parameter_counts()
        assert c3["encoder"] - c2["encoder"] == per_layer
        for c in (c1, c2, c3):
            assert c["total"] == sum(v for k, v in c.items() if k != "total")

    def test_end_to_end_gradients_reach_all_parameters(self):
        cfg = self._cfg(channel_mode="cd-p")
        m = build_model(cfg, seed=0)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 64, 2))
        marks = rng.normal(size=(2, 64, 5))
        with ad.Tape():
            res = m.forward(x, marks, training=True, rng=rng)
            ad.backward(ad.mean(ad.square(res.prediction)))
        for name, p in m.parameters().items():
            assert p.grad is not None and np.abs(p.grad).sum() > 0, name

    def test_bad_input_shape_rejected(self):
        m = build_model(self._cfg(), seed=0)
        with pytest.raises(ConfigurationError):
            m.forward(np.zeros((2, 48, 2)), training=False)
