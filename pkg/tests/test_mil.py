import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lstm_tsa.corpus import CorpusConfig, VideoExample, generate_synthetic_corpus
from lstm_tsa.mil import (AttributeDetectors, MILConfig, RegionBag, bag_accuracy, frame_distributions,
                          image_attribute_representation, image_bags, mil_loss, noisy_or_image,
                          noisy_or_video, region_probabilities, train_mil, video_attribute_representation,
                          video_bags)

probs = st.floats(0.0, 1.0, allow_nan=False)


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


class TestRegionProbabilities:
    def test_zero_detector_gives_half(self):
        det = AttributeDetectors(["a", "b"], np.zeros((2, 3)), np.zeros(2))
        np.testing.assert_array_equal(region_probabilities(np.ones((9, 3)), det), 0.5)

    def test_large_aligned_weight_saturates(self):
        det = AttributeDetectors(["a"], np.array([[50.0, 0.0]]), np.zeros(1))
        assert region_probabilities(np.array([[1.0, 0.0]]), det)[0, 0] > 1 - 1e-12

    def test_hand_table_2x2(self):
        grid = np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0], [-1.0, 2.0]]])
        det = AttributeDetectors(["a", "b"], np.array([[2.0, -1.0], [0.5, 0.5]]), np.array([0.0, -1.0]))
        expected = [[_sig(2.0), _sig(-0.5)],
                    [_sig(-1.0), _sig(-0.5)],
                    [_sig(1.0), _sig(0.0)],
                    [_sig(-4.0), _sig(-0.5)]]
        np.testing.assert_allclose(region_probabilities(grid, det), expected, rtol=1e-14)

    def test_dimension_mismatch(self):
        det = AttributeDetectors(["a"], np.zeros((1, 3)), np.zeros(1))
        with pytest.raises(ValueError, match="region dim"):
            region_probabilities(np.zeros((4, 2)), det)


class TestNoisyOr:
    @pytest.mark.parametrize("p,expected", [([0, 0, 0], 0.0), ([1.0, 0.2], 1.0), ([0.5, 0.5], 0.75),
                                            ([0.1, 0.2, 0.3], 0.496)])
    def test_image_examples(self, p, expected):
        assert noisy_or_image(np.array(p, dtype=float)) == pytest.approx(expected, abs=1e-15)

    def test_video_examples(self):
        assert noisy_or_video(np.array([[0.5], [0.5]])) == pytest.approx(0.75, abs=1e-15)
        assert noisy_or_video(np.array([[0.1, 0.2], [0.0, 1.0]])) == 1.0

    def test_single_frame_video_is_image(self):
        p = np.array([0.1, 0.35, 0.7])
        assert noisy_or_video(p[None]) == noisy_or_image(p)

    @pytest.mark.parametrize("bad", [[-0.1, 0.2], [1.2], [np.nan]])
    def test_rejects_out_of_range(self, bad):
        with pytest.raises(ValueError):
            noisy_or_image(np.array(bad))

    def test_empty_bag(self):
        with pytest.raises(ValueError):
            noisy_or_video(np.zeros((0, 3)))

    def test_vectorised_over_attributes(self):
        p = np.array([[0.5, 0.1], [0.5, 0.2]])
        np.testing.assert_allclose(noisy_or_image(p), [0.75, 1 - 0.9 * 0.8], rtol=1e-15)

    def test_large_bag_does_not_underflow(self):
        assert noisy_or_image(np.full(100_000, 1e-6)) == pytest.approx(1 - (1 - 1e-6) ** 100_000, rel=1e-9)

    @settings(max_examples=200)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=probs),
           st.data())
    def test_monotone_in_each_region(self, p, data):
        f = data.draw(st.integers(0, p.shape[0] - 1))
        r = data.draw(st.integers(0, p.shape[1] - 1))
        q = p.copy()
        q[f, r] = min(1.0, q[f, r] + 0.01)
        assert noisy_or_video(q) >= noisy_or_video(p)
        assert noisy_or_image(q[f]) >= noisy_or_image(p[f])

    @settings(max_examples=200)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=probs),
           hnp.arrays(np.float64, 9, elements=probs))
    def test_adding_a_frame_never_decreases(self, p, extra):
        extra = extra[: p.shape[1]]
        assert noisy_or_video(np.vstack([p, extra])) >= noisy_or_video(p)

    @settings(max_examples=200)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)), elements=probs))
    def test_log_space_matches_direct_product(self, p):
        assert abs(noisy_or_video(p) - (1 - np.prod(1 - p))) < 1e-12


class TestLoss:
    def test_perfect_prediction(self):
        assert mil_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0])) <= 1.1e-7

    def test_max_entropy(self):
        assert mil_loss(np.full(4, 0.5), np.array([1, 0, 1, 1.0])) == pytest.approx(math.log(2), abs=1e-15)

    def test_hand_case(self):
        value = mil_loss(np.array([0.9, 0.2]), np.array([1.0, 0.0]))
        assert value == pytest.approx((-math.log(0.9) - math.log(0.8)) / 2, abs=1e-15)
        assert round(value, 4) == 0.1643

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            mil_loss(np.zeros(2), np.zeros(3))


def _separable_bags(rng, n, frames=1, h=6, regions=4):
    """Positive bags hide one region carrying ``pattern``; negatives are noise."""
    pattern = np.eye(h)[0] * 3.0
    bags = []
    for i in range(n):
        x = 0.3 * rng.standard_normal((frames, regions, h))
        label = i % 2
        if label:
            x[rng.integers(frames), rng.integers(regions)] += pattern
        bags.append(RegionBag(x, np.array([float(label)])))
    return bags


class TestTraining:
    def test_separable_bags(self, rng):
        train, held = _separable_bags(rng, 60), _separable_bags(rng, 40)
        det, trace = train_mil(train, ["x"], MILConfig(epochs=60, learning_rate=1.0))
        assert trace[-1] < 0.05
        pred = [noisy_or_image(region_probabilities(b.regions, det))[0] >= 0.5 for b in held]
        acc = np.mean([p == bool(b.labels[0]) for p, b in zip(pred, held)])
        assert acc >= 0.95

    def test_all_negative_labels(self, rng):
        bags = [RegionBag(rng.standard_normal((1, 9, 4)), np.zeros(2)) for _ in range(20)]
        det, _ = train_mil(bags, ["a", "b"], MILConfig(epochs=30))
        for bag in bags:
            assert np.all(noisy_or_image(region_probabilities(bag.regions, det)) < 0.1)

    def test_single_frame_video_training_equals_image_training(self):
        corpus = generate_synthetic_corpus(replace(CorpusConfig(), n_frames=1, dynamic_frames=1, n_videos=10))
        attrs = ["man", "woman", "running"]
        cfg = MILConfig(epochs=5, seed=3)
        logs = {"image": [], "video": []}
        det_i, _ = train_mil(image_bags(corpus.videos, attrs), attrs, cfg, log=lambda e, l: logs["image"].append(l))
        det_v, _ = train_mil(video_bags(corpus.videos, attrs), attrs, cfg, log=lambda e, l: logs["video"].append(l))
        assert logs["image"] == logs["video"]
        np.testing.assert_array_equal(det_i.W, det_v.W)
        np.testing.assert_array_equal(det_i.b, det_v.b)

    def test_no_bags(self):
        with pytest.raises(ValueError):
            train_mil([], ["a"])

    def test_deterministic(self, rng):
        bags = _separable_bags(rng, 10)
        a, _ = train_mil(bags, ["x"], MILConfig(epochs=3))
        b, _ = train_mil(bags, ["x"], MILConfig(epochs=3))
        assert a.W.tobytes() == b.W.tobytes()


def _video(region_grids):
    n = region_grids.shape[0]
    return VideoExample("v", np.zeros((n, 2)), np.zeros((n, 1)), region_grids, [["a"]])


class TestRepresentations:
    det = AttributeDetectors(["p", "q"], np.array([[1.0, -0.5], [0.2, 0.3]]), np.array([-0.5, 0.1]))

    def test_identical_frames(self, rng):
        frame = rng.standard_normal((2, 2, 2))
        video = _video(np.stack([frame] * 3))
        single = noisy_or_image(region_probabilities(frame.reshape(-1, 2), self.det))
        np.testing.assert_allclose(image_attribute_representation(video, self.det), single, rtol=1e-15)

    def test_mean_of_two_frames(self):
        # one region per frame and an identity detector: bag probability is sigmoid(region)
        det = AttributeDetectors(["p"], np.ones((1, 1)), np.zeros(1))
        grids = np.array([math.log(0.2 / 0.8), math.log(0.6 / 0.4)]).reshape(2, 1, 1, 1)
        A_i = image_attribute_representation(_video(grids), det)
        assert A_i[0] == pytest.approx(0.4, abs=1e-15)

    def test_three_frame_hand_mean(self, rng):
        grids = rng.standard_normal((3, 2, 2, 2))
        video = _video(grids)
        per_frame = []
        for j in range(3):
            p = [[_sig(self.det.W[k] @ r + self.det.b[k]) for k in range(2)] for r in grids[j].reshape(-1, 2)]
            per_frame.append([1 - np.prod([1 - row[k] for row in p]) for k in range(2)])
        np.testing.assert_allclose(image_attribute_representation(video, self.det), np.mean(per_frame, axis=0),
                                   rtol=1e-13)

    def test_single_frame_video_equals_image(self, rng):
        video = _video(rng.standard_normal((1, 2, 2, 2)))
        np.testing.assert_array_equal(video_attribute_representation(video, self.det),
                                      frame_distributions(video, self.det)[0])

    def test_video_dominates_frame_max(self, rng):
        video = _video(rng.standard_normal((4, 2, 2, 2)))
        A_v = video_attribute_representation(video, self.det)
        assert np.all(A_v >= frame_distributions(video, self.det).max(axis=0))

    def test_three_frame_brute_force(self, rng):
        grids = rng.standard_normal((3, 2, 2, 2))
        video = _video(grids)
        expected = []
        for k in range(2):
            miss = 1.0
            for j in range(3):
                for r in grids[j].reshape(-1, 2):
                    miss *= 1 - _sig(self.det.W[k] @ r + self.det.b[k])
            expected.append(1 - miss)
        np.testing.assert_allclose(video_attribute_representation(video, self.det), expected, rtol=1e-13)

    def test_missing_regions(self):
        video = VideoExample("v", np.zeros((1, 2)), np.zeros((1, 1)), np.zeros((0, 2, 2, 2)), [["a"]])
        with pytest.raises(ValueError):
            video_attribute_representation(video, self.det)

    def test_entries_in_unit_interval(self, corpus, planted):
        for v in corpus.videos[:5]:
            for rep in (image_attribute_representation, video_attribute_representation):
                A = rep(v, planted)
                assert np.all((A >= 0) & (A <= 1))


def test_planted_detectors_separate_domains(corpus, planted):
    dyn = corpus.dynamic_attributes
    assert bag_accuracy(corpus.videos, planted, "video", dyn) == 1.0
    assert bag_accuracy(corpus.videos, planted, "image", dyn) < 1.0
