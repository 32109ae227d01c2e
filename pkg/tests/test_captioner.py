import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstm_tsa import captioner as cap
from lstm_tsa.autodiff import Eager, finite_difference_gradient
from lstm_tsa.captioner import (GATED, VARIANTS, CaptionModel, Example, ModelDims, TrainConfig,
                                encode_video, train, training_loss, transfer_gate, transfer_unit)
from lstm_tsa.corpus import build_vocabulary
from lstm_tsa.experiments import build_examples

DIMS = ModelDims(vocab=5, video=3, attr_image=3, attr_video=2, embed=4, hidden=4)


def _inputs(rng):
    return rng.normal(size=3), rng.random(3), rng.random(2)


def _zero_model(variant, dims=DIMS):
    model = CaptionModel(dims, variant)
    return CaptionModel(dims, variant, {k: np.zeros_like(v) for k, v in model.params.items()})


class TestEncodeVideo:
    def test_single_frame(self):
        np.testing.assert_array_equal(encode_video([[1.0, 2.0]], [[3.0]]), [1.0, 2.0, 3.0])

    def test_duplicate_frames(self):
        np.testing.assert_array_equal(encode_video([[1.0, 2.0]] * 2, [[3.0]] * 2), [1.0, 2.0, 3.0])

    def test_mean(self):
        np.testing.assert_array_equal(encode_video([[1, 0], [0, 1]], [[2], [4]]), [0.5, 0.5, 3.0])

    def test_empty(self):
        with pytest.raises(ValueError):
            encode_video(np.zeros((0, 2)), np.zeros((0, 1)))


class TestTransferGate:
    def _params(self, De=2, V=3, Dh=2, Ai=2, Av=2):
        return {"G_s": np.zeros((De, V)), "G_h": np.zeros((De, Dh)), "G_i": np.zeros((De, Ai)),
                "G_v": np.zeros((De, Av)), "G_b": np.zeros(De)}

    def _gate(self, P, word, h, A_i, A_v):
        ctx = {"gate_static": Eager.add(Eager.add(Eager.matmul(A_i, P["G_i"], trans_b=True),
                                                  Eager.matmul(A_v, P["G_v"], trans_b=True)), P["G_b"])}
        return transfer_gate(Eager, P, word, h, ctx)

    def test_zero_parameters(self):
        P = self._params()
        g = self._gate(P, np.ones((1, 3)), np.ones((1, 2)), np.ones((1, 2)), np.ones((1, 2)))
        np.testing.assert_array_equal(g, 0.5)

    def test_large_bias(self):
        P = self._params()
        P["G_b"][:] = 10.0
        g = self._gate(P, np.ones((1, 3)), np.ones((1, 2)), np.ones((1, 2)), np.ones((1, 2)))
        assert np.all(g > 0.9999)

    def test_hand_evaluated(self):
        P = {"G_s": np.array([[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]]),
             "G_h": np.array([[0.2, -0.3], [0.0, 1.0]]),
             "G_i": np.array([[1.0, 1.0], [-1.0, 0.0]]),
             "G_v": np.array([[0.0, 2.0], [0.5, -0.5]]),
             "G_b": np.array([0.1, -0.2])}
        w, h = np.array([[0.0, 0.0, 1.0]]), np.array([[1.0, 2.0]])
        A_i, A_v = np.array([[0.3, 0.6]]), np.array([[0.9, 0.1]])
        pre = [-1.0 + (0.2 - 0.6) + 0.9 + 0.2 + 0.1, 0.5 + 2.0 - 0.3 + (0.45 - 0.05) - 0.2]
        expected = [1 / (1 + math.exp(-z)) for z in pre]
        np.testing.assert_allclose(self._gate(P, w, h, A_i, A_v)[0], expected, rtol=1e-15)

    @given(st.integers(0, 2**32 - 1))
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        P = {k: 5 * rng.standard_normal(v.shape) for k, v in self._params().items()}
        g = self._gate(P, rng.random((2, 3)), rng.standard_normal((2, 2)), rng.random((2, 2)), rng.random((2, 2)))
        assert np.all((g > 0) & (g < 1))


class TestTransferUnit:
    img = np.array([[1.0, -2.0, 0.5]])
    vid = np.array([[0.25, 4.0, -1.0]])

    def test_ungated_variants(self):
        assert transfer_unit(Eager, "none", self.img, self.vid) is None
        np.testing.assert_array_equal(transfer_unit(Eager, "i", self.img, self.vid), self.img)
        np.testing.assert_array_equal(transfer_unit(Eager, "v", self.img, self.vid), self.vid)
        np.testing.assert_array_equal(transfer_unit(Eager, "iv0", self.img, self.vid), self.img + self.vid)

    def test_endpoints(self):
        ones, zeros = np.ones((1, 3)), np.zeros((1, 3))
        iv0 = transfer_unit(Eager, "iv0", self.img, self.vid)
        np.testing.assert_array_equal(transfer_unit(Eager, "iv1", self.img, self.vid, ones), iv0)
        np.testing.assert_array_equal(transfer_unit(Eager, "iv2", self.img, self.vid, ones), iv0)
        np.testing.assert_array_equal(transfer_unit(Eager, "iv3", self.img, self.vid, zeros), self.img)
        np.testing.assert_array_equal(transfer_unit(Eager, "iv3", self.img, self.vid, ones), self.vid)

    def test_half_gate_halves_iv0(self):
        half = np.full((1, 3), 0.5)
        np.testing.assert_array_equal(transfer_unit(Eager, "iv3", self.img, self.vid, half),
                                      0.5 * transfer_unit(Eager, "iv0", self.img, self.vid))

    @given(st.integers(0, 2**32 - 1))
    def test_iv3_is_convex_blend(self, seed):
        rng = np.random.default_rng(seed)
        img, vid, g = rng.standard_normal((2, 4)), rng.standard_normal((2, 4)), rng.random((2, 4))
        np.testing.assert_allclose(transfer_unit(Eager, "iv3", img, vid, g), (1 - g) * img + g * vid,
                                   rtol=0, atol=1e-12)

    @pytest.mark.parametrize("variant", GATED)
    def test_gate_required(self, variant):
        with pytest.raises(ValueError, match="gate"):
            transfer_unit(Eager, variant, self.img, self.vid)

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="unknown variant"):
            CaptionModel(DIMS, "iv4")


class TestStep:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_zero_parameters_give_uniform(self, variant, rng):
        model = _zero_model(variant)
        state, ctx = model.start(*_inputs(rng))
        _, logp = model.step(state, [0], ctx)
        np.testing.assert_allclose(logp, -math.log(5), rtol=0, atol=1e-15)

    def test_none_matches_iv0_with_zero_projections(self, rng):
        iv0 = CaptionModel(DIMS, "iv0", seed=3)
        iv0.params["T_Ai"][:] = 0.0
        iv0.params["T_Av"][:] = 0.0
        none = CaptionModel(DIMS, "none", {k: iv0.params[k] for k in cap.param_shapes(DIMS, "none")})
        video, A_i, A_v = _inputs(rng)
        tokens = [2, 4, 3, 1]
        s0, c0 = none.start(video, A_i, A_v)
        s1, c1 = iv0.start(video, A_i, A_v)
        prev = 0
        for t in tokens:
            s0, lp0 = none.step(s0, [prev], c0)
            s1, lp1 = iv0.step(s1, [prev], c1)
            assert lp0.tobytes() == lp1.tobytes()
            for a, b in zip(s0, s1):
                assert a.tobytes() == b.tobytes()
            prev = t

    @pytest.mark.parametrize("variant", GATED)
    def test_gated_with_zero_attributes_match_iv0(self, variant, rng):
        model = CaptionModel(DIMS, variant, seed=5)
        iv0 = CaptionModel(DIMS, "iv0", seed=5)
        video = rng.normal(size=3)
        zi, zv = np.zeros(3), np.zeros(2)
        assert model.step_log_probs(video, zi, zv, [3, 2, 1]) == iv0.step_log_probs(video, zi, zv, [3, 2, 1])

    def test_matches_hand_stepped_lstm(self, rng):
        model = CaptionModel(DIMS, "iv3", seed=11)
        P = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in model.params.items()}
        video, A_i, A_v = _inputs(rng)
        De = Dh = 4

        def sig(z):
            return 1 / (1 + np.exp(-z))

        def cell(x, h, c, W, b, H):
            Wi, Wf, Wo, Wg = (W[k * H:(k + 1) * H] for k in range(4))
            bi, bf, bo, bg = (b[k * H:(k + 1) * H] for k in range(4))
            xh = np.concatenate([x, h])
            i, f, o = sig(Wi @ xh + bi), sig(Wf @ xh + bf), sig(Wo @ xh + bo)
            c = f * c + i * np.tanh(Wg @ xh + bg)
            return o * np.tanh(c), c

        def fused(word, h2):
            g = sig(P["G_s"] @ word + P["G_h"] @ h2 + P["G_i"] @ A_i + P["G_v"] @ A_v + P["G_b"])
            return (1 - g) * (P["T_Ai"] @ A_i) + g * (P["T_Av"] @ A_v)

        h1 = c1 = np.zeros(De)
        h2 = c2 = np.zeros(Dh)
        h1, c1 = cell(P["T_v"] @ video, h1, c1, P["f1.W"], P["f1.b"], De)
        h2, c2 = cell(h1 + fused(np.zeros(5), h2), h2, c2, P["f2.W"], P["f2.b"], Dh)
        expected = []
        for prev in (0, 3):
            w = np.eye(5)[prev]
            h1, c1 = cell(P["T_s"] @ w, h1, c1, P["f1.W"], P["f1.b"], De)
            h2, c2 = cell(h1 + fused(w, h2), h2, c2, P["f2.W"], P["f2.b"], Dh)
            logits = P["out.W"] @ h2 + P["out.b"]
            expected.append(logits - np.log(np.sum(np.exp(logits))))

        state, ctx = model.start(video, A_i, A_v, P)
        for prev, exp_lp in zip((0, 3), expected):
            state, logp = model.step(state, [prev], ctx, P)
            np.testing.assert_allclose(logp[0], exp_lp, rtol=0, atol=1e-12)
            assert abs(np.exp(logp).sum() - 1) < 1e-12

    def test_token_out_of_range(self, rng):
        model = CaptionModel(DIMS, "i")
        with pytest.raises(IndexError):
            model.sequence_log_prob(*_inputs(rng), [7])

    def test_wrong_video_length(self):
        model = CaptionModel(DIMS, "v")
        with pytest.raises(ValueError, match="video"):
            model.start(np.zeros(4), None, np.zeros(2))

    def test_unused_attributes_may_be_omitted(self, rng):
        model = CaptionModel(DIMS, "none", seed=2)
        video = rng.normal(size=3)
        assert model.step_log_probs(video, None, None, [2, 1]) == model.step_log_probs(
            video, np.zeros(3), np.zeros(2), [2, 1])


class TestSequenceLogProb:
    def test_uniform_model(self, rng):
        model = _zero_model("iv3")
        assert model.sequence_log_prob(*_inputs(rng), [2, 3, 1]) == pytest.approx(3 * math.log(1 / 5), abs=1e-12)
        assert round(3 * math.log(1 / 5), 4) == -4.8283

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from(VARIANTS), st.lists(st.integers(0, 4), min_size=1, max_size=5), st.integers(0, 1000))
    def test_decomposition_and_monotonicity(self, variant, tokens, seed):
        rng = np.random.default_rng(seed)
        model = CaptionModel(DIMS, variant, seed=seed)
        video, A_i, A_v = _inputs(rng)
        steps = model.step_log_probs(video, A_i, A_v, tokens)
        total = model.sequence_log_prob(video, A_i, A_v, tokens)
        assert abs(total - sum(steps)) < 1e-12
        assert model.sequence_log_prob(video, A_i, A_v, tokens + [1]) <= total
        assert total <= 0

    def test_graph_loss_matches_eager(self, rng):
        model = CaptionModel(DIMS, "iv2", seed=4)
        batch = [Example(*_inputs(rng), [2, 4, 1]), Example(*_inputs(rng), [3, 1])]
        loss, _ = training_loss(model, batch)
        eager = -np.mean([model.sequence_log_prob(ex.video, ex.A_i, ex.A_v, ex.tokens) for ex in batch])
        assert abs(loss - eager) < 1e-12


class TestTrainingLoss:
    def test_uniform_model(self, rng):
        loss, _ = training_loss(_zero_model("iv0"), [Example(*_inputs(rng), [2, 3, 1])])
        assert loss == pytest.approx(-3 * math.log(1 / 5), abs=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            training_loss(CaptionModel(DIMS, "none"), [])

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_gradients_match_finite_differences(self, variant, rng):
        model = CaptionModel(DIMS, variant, seed=0)
        params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in model.params.items()}
        batch = [Example(*_inputs(rng), [3, 1]), Example(*_inputs(rng), [2, 4, 1])]
        _, grads = model.loss_and_grads(batch, params)
        fd = finite_difference_gradient(lambda p: model.loss_and_grads(batch, p, grads=False)[0], params, 1e-5)
        for name in params:
            # the absolute slack absorbs roundoff on entries far below the loss scale
            np.testing.assert_allclose(grads[name], fd[name], rtol=1e-4, atol=1e-10, err_msg=name)


class TestTrain:
    def test_overfits_one_video(self, corpus):
        video = corpus.videos[0]
        vocab = build_vocabulary(video.captions, 100)
        examples = build_examples([video], vocab, n_attr_image=2, n_attr_video=2)
        dims = ModelDims(len(vocab), examples[0].video.size, 2, 2, 16, 16)
        result = train(examples, dims, "none", TrainConfig(epochs=150, learning_rate=0.5))
        assert result.per_token[-1] < 0.01

    def test_deterministic(self, corpus):
        vocab = build_vocabulary(corpus.all_captions(), 100)
        examples = build_examples(corpus.videos[:4], vocab, n_attr_image=2, n_attr_video=2)
        dims = ModelDims(len(vocab), examples[0].video.size, 2, 2, 8, 8)
        a = train(examples, dims, "iv3", TrainConfig(epochs=3))
        b = train(examples, dims, "iv3", TrainConfig(epochs=3))
        assert a.losses == b.losses
        for k in a.model.params:
            assert a.model.params[k].tobytes() == b.model.params[k].tobytes()

    def test_divergence_names_epoch(self, rng):
        dims = ModelDims(5, 3, 3, 2, 4, 4)
        bad = [Example(np.array([np.nan, 0.0, 0.0]), np.zeros(3), np.zeros(2), [2, 1])]
        with pytest.raises(FloatingPointError, match="epoch 0"):
            train(bad, dims, "none", TrainConfig(epochs=2))

    def test_loss_trace_mostly_decreasing(self, corpus, planted):
        vocab = build_vocabulary(corpus.all_captions(), 1000)
        dets = planted
        examples = build_examples(corpus.videos, vocab, dets, dets)
        dims = ModelDims(len(vocab), examples[0].video.size, len(dets.attributes), len(dets.attributes))
        losses = train(examples, dims, "iv3", TrainConfig(epochs=40)).losses
        pairs = list(zip(losses, losses[1:]))
        assert sum(b <= a for a, b in pairs) >= 0.9 * len(pairs)
