import numpy as np
import pytest

from timemosaic import autodiff as ad
from timemosaic import patching as pt
from timemosaic.autodiff import DomainError, Tensor


def _gset(sizes=(8, 16, 32), d=4):
    return pt.GranularitySet(tuple(sizes), d)


class TestGranularitySet:
    def test_derived_quantities(self):
        g = _gset()
        assert (g.f_min, g.f_max, g.K, g.N) == (8, 32, 3, 4)

    def test_requires_two_sizes(self):
        with pytest.raises(pt.ConfigurationError):
            pt.GranularitySet((8,), 4)

    def test_requires_divisibility(self):
        with pytest.raises(pt.ConfigurationError):
            pt.GranularitySet((8, 12, 32), 4)

    def test_requires_ascending_distinct(self):
        with pytest.raises(pt.ConfigurationError):
            pt.GranularitySet((16, 8, 32), 4)
        with pytest.raises(pt.ConfigurationError):
            pt.GranularitySet((8, 8, 32), 4)


class TestPartition:
    def test_region_counts(self):
        x = Tensor(np.arange(96.0))
        assert pt.partition_regions(x, 32).shape == (3, 32)
        assert pt.partition_regions(x, 96).shape == (1, 96)

    def test_non_divisible_errors_with_context(self):
        with pytest.raises(pt.ConfigurationError, match="100.*32"):
            pt.partition_regions(Tensor(np.zeros(100)), 32)

    def test_regions_are_contiguous(self):
        x = Tensor(np.arange(64.0))
        r = pt.partition_regions(x, 16)
        assert np.array_equal(r.data[1], np.arange(16.0, 32.0))


class TestGumbelSoftmax:
    def test_eval_is_pure_argmax(self):
        d = pt.gumbel_softmax(Tensor(np.array([0.0, 5.0, 1.0])), 1.0, hard=True, training=False)
        assert d.hard_index == 1
        assert np.array_equal(d.soft_probs.data, [0.0, 1.0, 0.0])

    def test_low_temperature_limit(self):
        # tiny noise, tau -> 0+: soft probs approach the one-hot of argmax
        rng = np.random.default_rng(0)
        logits = Tensor(np.array([0.0, 5.0, 1.0]))
        d = pt.gumbel_softmax(logits, 1e-3, hard=False, rng=rng, training=True)
        assert np.allclose(d.soft_probs.data, [0.0, 1.0, 0.0], atol=1e-6)

    def test_temperature_validation(self):
        with pytest.raises(DomainError):
            pt.gumbel_softmax(Tensor(np.zeros(3)), 0.0, hard=True, training=False)

    def test_straight_through_forward_is_one_hot(self):
        rng = np.random.default_rng(1)
        d = pt.gumbel_softmax(Tensor(np.zeros((5, 3))), 1.0, hard=True, rng=rng, training=True)
        assert np.allclose(d.blend.data.sum(axis=-1), 1.0)
        assert set(np.unique(d.blend.data)) <= {0.0, 1.0}
        assert np.array_equal(d.blend.data.argmax(axis=-1), d.hard_index)
        # the smooth probabilities stay smooth and agree on the argmax
        assert np.allclose(d.soft_probs.data.sum(axis=-1), 1.0)
        assert np.array_equal(d.soft_probs.data.argmax(axis=-1), d.hard_index)

    def test_soft_gradient_matches_finite_differences(self):
        w = np.array([0.3, -1.2, 0.9])

        def f(logits):
            # noise fixed per call via identical rng seed
            d = pt.gumbel_softmax(logits, 0.7, hard=False,
                                  rng=np.random.default_rng(7), training=True)
            return ad.tsum(ad.mul(d.soft_probs, Tensor(w)))

        for i in range(5):
            pt_i = Tensor(np.random.default_rng(i).normal(size=3))
            res = ad.check_gradient(f, pt_i, tol=1e-4)
            assert res["passed"], res

    def test_hard_gradient_equals_soft_gradient(self):
        w = np.array([0.3, -1.2, 0.9])
        x = np.array([0.2, 0.1, -0.3])
        grads = []
        for hard in (False, True):
            t = Tensor(x.copy(), requires_grad=True)
            with ad.Tape():
                d = pt.gumbel_softmax(t, 1.0, hard=hard,
                                      rng=np.random.default_rng(3), training=True)
                ad.backward(ad.tsum(ad.mul(d.blend, Tensor(w))))
            grads.append(t.grad.copy())
        assert not np.allclose(grads[0], 0.0)
        assert np.allclose(grads[0], grads[1])


class TestUnfoldProject:
    def test_patch_counts(self):
        region = Tensor(np.random.default_rng(0).normal(size=(3, 32)))
        proj = (Tensor(np.zeros((16, 4))), Tensor(np.zeros(4)))
        assert pt.unfold_project(region, 16, proj).shape == (3, 2, 4)
        proj = (Tensor(np.zeros((32, 4))), Tensor(np.zeros(4)))
        assert pt.unfold_project(region, 32, proj).shape == (3, 1, 4)

    def test_identity_projection_reproduces_patches(self):
        vals = np.arange(32.0)
        region = Tensor(vals)
        proj = (Tensor(np.eye(16)), Tensor(np.zeros(16)))
        out = pt.unfold_project(region, 16, proj)
        assert np.array_equal(out.data, vals.reshape(2, 16))


class TestRepeatPad:
    def test_consecutive_duplication(self):
        z = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))  # rows a, b
        out = pt.repeat_pad(z, 4)
        assert np.array_equal(out.data, [[1, 2], [1, 2], [3, 4], [3, 4]])

    def test_identity_when_full(self):
        z = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        assert np.array_equal(pt.repeat_pad(z, 4).data, z.data)

    def test_single_row_broadcast(self):
        z = Tensor(np.array([[5.0, 6.0]]))
        out = pt.repeat_pad(z, 4)
        assert np.array_equal(out.data, np.tile([5.0, 6.0], (4, 1)))


class TestAssembleTokens:
    def test_none_mode_is_concatenation(self):
        z = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 8)))
        out = pt.assemble_tokens(z, "none", weights=None)
        assert np.array_equal(out.data, z.data.reshape(2, 12, 8))

    def test_sinusoidal_slot0_even_dims_zero(self):
        pe = pt.sinusoidal_encoding(12, 8)
        assert np.allclose(pe[0, 0::2], 0.0)
        assert np.allclose(pe[0, 1::2], 1.0)

    def test_token_count(self):
        z = Tensor(np.zeros((1, 3, 4, 8)))
        assert pt.assemble_tokens(z, "sinusoidal", weights=None).shape == (1, 12, 8)

    def test_learnable_requires_matching_table(self):
        g = _gset(d=8)
        rng = np.random.default_rng(0)
        w = pt.init_ape_weights(g, n_slots=12, rng=rng, pe_mode="learnable")
        z = Tensor(np.zeros((1, 3, 4, 8)))
        out = pt.assemble_tokens(z, "learnable", w)
        assert np.array_equal(out.data[0], w.pos_table.data)
        with pytest.raises(pt.ConfigurationError):
            pt.assemble_tokens(Tensor(np.zeros((1, 2, 4, 8))), "learnable", w)


class TestUsageAndBudget:
    def _decision(self, probs):
        probs = np.asarray(probs, dtype=np.float64)
        return pt.RegionDecision(
            logits=np.log(np.maximum(probs, 1e-12)),
            soft_probs=Tensor(probs),
            hard_index=probs.argmax(axis=-1),
            temperature=1.0,
        )

    def test_all_one_hot_k0(self):
        d = self._decision(np.tile([1.0, 0.0, 0.0], (4, 1)))
        assert np.array_equal(pt.usage_ratios(d).data, [1.0, 0.0, 0.0])

    def test_two_decisions_mixed(self):
        d = self._decision([[1.0, 0, 0], [0, 1.0, 0]])
        assert np.array_equal(pt.usage_ratios(d).data, [0.5, 0.5, 0.0])

    def test_soft_mode_is_mean_of_probs(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(3), size=(2, 5))
        d = self._decision(p)
        assert np.allclose(pt.usage_ratios(d).data, p.reshape(-1, 3).mean(axis=0))

    def test_hard_mode_counts_selections(self):
        d = self._decision([[0.6, 0.4, 0.0], [0.6, 0.4, 0.0]])
        assert np.array_equal(pt.usage_ratios(d, soft=False).data, [1.0, 0.0, 0.0])

    def test_budget_zero_at_target(self):
        loss = pt.budget_loss(Tensor(np.array([1 / 3, 1 / 3, 1 / 3])), [1 / 3, 1 / 3])
        assert loss.data == pytest.approx(0.0, abs=1e-15)

    def test_budget_arithmetic_k3(self):
        loss = pt.budget_loss(Tensor(np.array([0.5, 0.25, 0.25])), [1 / 3, 1 / 3])
        assert loss.data == pytest.approx(5 / 144)

    def test_budget_arithmetic_k2(self):
        loss = pt.budget_loss(Tensor(np.array([0.7, 0.3])), [0.5])
        assert loss.data == pytest.approx(0.04)

    def test_budget_target_validation(self):
        with pytest.raises(pt.ConfigurationError):
            pt.budget_loss(Tensor(np.array([0.5, 0.5])), [1.5])
        with pytest.raises(pt.ConfigurationError):
            pt.budget_loss(Tensor(np.array([0.3, 0.3, 0.4])), [0.8, 0.8])


class TestEmbedLookback:
    def test_shapes_and_decision(self):
        g = _gset(d=6)
        rng = np.random.default_rng(0)
        w = pt.init_ape_weights(g, n_slots=(96 // 32) * 4, rng=rng)
        x = Tensor(rng.normal(size=(5, 96)))
        tokens, decision = pt.embed_lookback(x, w, training=False)
        assert tokens.shape == (5, 12, 6)
        assert decision.hard_index.shape == (5, 3)

    def test_eval_blend_equals_selected_branch(self):
        # with one-hot selection the blended output must equal the selected
        # branch's unfold+project+pad result exactly
        g = _gset(d=6)
        rng = np.random.default_rng(1)
        w = pt.init_ape_weights(g, n_slots=12, rng=rng)
        x = Tensor(rng.normal(size=(2, 96)))
        tokens, decision = pt.embed_lookback(x, w, pe_mode="none", training=False)
        regions = pt.partition_regions(x, g.f_max)
        for s in range(2):
            for r in range(3):
                k = int(decision.hard_index[s, r])
                region = Tensor(regions.data[s, r])
                z = pt.unfold_project(region, g.sizes[k], w.projections[k])
                z = pt.repeat_pad(z, g.N)
                got = tokens.data[s, r * 4 : (r + 1) * 4]
                assert np.allclose(got, z.data, atol=1e-12)

    def test_classifier_receives_gradient(self):
        g = _gset(d=6)
        rng = np.random.default_rng(2)
        w = pt.init_ape_weights(g, n_slots=12, rng=rng)
        x = Tensor(rng.normal(size=(3, 96)))
        with ad.Tape():
            tokens, decision = pt.embed_lookback(x, w, training=True, rng=rng)
            loss = ad.mean(ad.square(tokens)) + pt.budget_loss(
                pt.usage_ratios(decision), [1 / 3, 1 / 3])
            ad.backward(loss)
        assert w.classifier_w1.grad is not None
        assert np.abs(w.classifier_w1.grad).sum() > 0


class TestSlotSpans:
    def test_partition_and_monotone_property(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            f_min = 2 ** rng.integers(1, 4)
            depth = rng.integers(1, 3)
            sizes = [int(f_min * 2 ** i) for i in range(depth + 1)]
            g = pt.GranularitySet(tuple(sizes), 4)
            r_count = int(rng.integers(1, 6))
            hard = rng.integers(0, g.K, size=r_count)
            spans = pt.slot_spans(g, r_count, hard)
            length = r_count * g.f_max
            # chronological monotonicity
            starts = [s for s, _ in spans]
            assert starts == sorted(starts)
            # dedup consecutive spans, then they must exactly tile [0, L)
            tiles = [spans[0]]
            for sp in spans[1:]:
                if sp != tiles[-1]:
                    tiles.append(sp)
            assert tiles[0][0] == 0 and tiles[-1][1] == length
            for (a, b), (c, d) in zip(tiles, tiles[1:]):
                assert b == c
