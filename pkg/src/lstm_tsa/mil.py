"""Noisy-OR multiple-instance attribute detectors.

Each attribute has a linear region detector followed by a sigmoid.  A bag
is one frame's region grid (image form) or the regions of every sampled
frame of a video (video form); its probability is the noisy-OR of the
region probabilities, computed in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, _sigmoid, clip_grad_norm, glorot_uniform, sgd_step
from .corpus import VideoExample, attribute_labels

PROB_FLOOR = 1e-7


@dataclass
class AttributeDetectors:
    """Per-attribute weight rows ``W`` (n_attr, h) and biases ``b`` (n_attr,)."""

    attributes: list[str]
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[0] != len(self.attributes):
            raise ValueError("one detector row per attribute required")
        if self.b.shape != (len(self.attributes),):
            raise ValueError("one bias per attribute required")

    @property
    def region_dim(self):
        return self.W.shape[1]

    def params(self):
        return {"W": self.W, "b": self.b}


@dataclass
class RegionBag:
    """A MIL bag: ``frames`` has shape (n_frames, x*x, h); one label per attribute."""

    frames: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim == 2:
            self.frames = self.frames[None]
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError("a bag needs at least one frame of regions")
        self.labels = np.asarray(self.labels, dtype=np.float64)

    @property
    def regions(self):
        return self.frames.reshape(-1, self.frames.shape[-1])


def region_probabilities(regions, detectors: AttributeDetectors):
    """Sigmoid detector responses, shape (n_regions, n_attr)."""
    regions = np.asarray(regions, dtype=np.float64)
    if regions.ndim == 3:
        regions = regions.reshape(-1, regions.shape[-1])
    if regions.shape[-1] != detectors.region_dim:
        raise ValueError(f"region dim {regions.shape[-1]} != detector weight length {detectors.region_dim}")
    return _sigmoid(regions @ detectors.W.T + detectors.b)


def _check_probs(p):
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty bag")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("region probabilities must lie in [0, 1]")
    return p


def noisy_or_image(region_probs):
    """``1 - prod(1 - p)`` over regions (axis 0); vectorised over trailing attribute axis.

    Summed ``log1p(-p)`` keeps large bags from underflowing; ``p == 1``
    gives ``-inf`` and hence exactly 1.
    """
    p = _check_probs(region_probs)
    with np.errstate(divide="ignore"):
        return 1.0 - np.exp(np.log1p(-p).sum(axis=0))


def noisy_or_video(frame_region_probs):
    """Noisy-OR over every region of every frame; input shape (frames, regions[, attrs])."""
    p = _check_probs(frame_region_probs)
    if p.ndim < 2 or p.shape[0] < 1:
        raise ValueError("video bag needs at least one frame")
    return noisy_or_image(p.reshape((-1,) + p.shape[2:]))


def mil_loss(bag_probs, labels):
    """Attribute-averaged binary cross-entropy of bag probabilities."""
    bag_probs = np.asarray(bag_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if bag_probs.shape != labels.shape:
        raise ValueError(f"length mismatch: {bag_probs.shape} probabilities vs {labels.shape} labels")
    p = np.clip(bag_probs, PROB_FLOOR, 1 - PROB_FLOOR)
    return float(np.mean(-(labels * np.log(p) + (1 - labels) * np.log1p(-p))))


def build_mil_graph(n_regions, region_dim, n_attr, n_bags=1):
    """Loss graph for ``n_bags`` bags whose regions are stacked row-wise.

    ``segment`` (n_bags, n_regions) is a 0/1 matrix assigning regions to
    bags, so one graph covers image bags (one frame each) and video bags.
    """
    g = Graph()
    X = g.input("regions", (n_regions, region_dim))
    S = g.input("segment", (n_bags, n_regions))
    Y = g.input("labels", (n_bags, n_attr))
    W = g.param("W", (n_attr, region_dim))
    b = g.param("b", (n_attr,))
    p = g.sigmoid(g.add(g.matmul(X, W, trans_b=True), b))
    q = g.clip(p, PROB_FLOOR, 1 - PROB_FLOOR)
    log_miss = g.matmul(S, g.log(g.affine(q, -1.0, 1.0)))
    bag = g.clip(g.affine(g.exp(log_miss), -1.0, 1.0), PROB_FLOOR, 1 - PROB_FLOOR)
    g.output("bag_probs", bag)
    ce = g.add(g.mul(Y, g.log(bag)), g.mul(g.affine(Y, -1.0, 1.0), g.log(g.affine(bag, -1.0, 1.0))))
    g.output("loss", g.affine(g.mean(ce), -1.0))
    return g


def _batch_bindings(bags):
    regions = np.concatenate([bag.regions for bag in bags], axis=0)
    segment = np.zeros((len(bags), regions.shape[0]))
    start = 0
    for k, bag in enumerate(bags):
        n = bag.regions.shape[0]
        segment[k, start : start + n] = 1.0
        start += n
    return {"regions": regions, "segment": segment, "labels": np.stack([bag.labels for bag in bags])}


class MILModel:
    """Caches loss graphs by batch layout; evaluates loss and gradients."""

    def __init__(self):
        self._graphs = {}

    def graph(self, bags):
        key = tuple(bag.regions.shape[0] for bag in bags) + (bags[0].regions.shape[1], bags[0].labels.shape[0])
        if key not in self._graphs:
            n_regions = sum(key[:-2])
            self._graphs[key] = build_mil_graph(n_regions, key[-2], key[-1], len(bags))
        return self._graphs[key]

    def loss_and_grads(self, bags, params):
        g = self.graph(bags)
        out = g.evaluate({**_batch_bindings(bags), **params})
        return float(out["loss"][0]), g.backward("loss")

    def loss(self, bags, params):
        g = self.graph(bags)
        return float(g.evaluate({**_batch_bindings(bags), **params})["loss"][0])


@dataclass
class MILConfig:
    epochs: int = 100
    learning_rate: float = 2.0
    batch_size: int = 1
    seed: int = 0
    clip_norm: float = 5.0


def init_detectors(attributes, region_dim, bag_regions, seed):
    # bias so that an untrained bag of ``bag_regions`` regions starts near 0.5
    W = 0.01 * glorot_uniform((len(attributes), region_dim), seed, "mil.W")
    p0 = 1.0 - 0.5 ** (1.0 / bag_regions)
    b = np.full(len(attributes), math.log(p0 / (1 - p0)))
    return AttributeDetectors(list(attributes), W, b)


def train_mil(bags, attributes, config: MILConfig = MILConfig(), log=None):
    """SGD on the noisy-OR cross-entropy; one step per ``batch_size`` bags.

    Returns ``(detectors, loss_trace)``.
    """
    bags = list(bags)
    if not bags:
        raise ValueError("no bags to train on")
    for bag in bags:
        if bag.labels.shape != (len(attributes),):
            raise ValueError("bag labels must have one entry per attribute")
    bag_regions = bags[0].regions.shape[0]
    det = init_detectors(attributes, bags[0].regions.shape[1], bag_regions, config.seed)
    params = det.params()
    model = MILModel()
    rng = np.random.default_rng(config.seed)
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(bags))
        total = 0.0
        for start in range(0, len(bags), config.batch_size):
            batch = [bags[i] for i in order[start : start + config.batch_size]]
            loss, grads = model.loss_and_grads(batch, params)
            if not math.isfinite(loss):
                raise FloatingPointError(f"MIL loss diverged at epoch {epoch}")
            grads = clip_grad_norm(grads, config.clip_norm)
            params = sgd_step(params, grads, config.learning_rate)
            total += loss * len(batch)
        trace.append(total / len(bags))
        if log is not None:
            log(epoch, trace[-1])
    return AttributeDetectors(list(attributes), params["W"], params["b"]), trace


def image_bags(videos, attributes):
    """One bag per frame, labelled with its video's caption attributes."""
    bags = []
    for v in videos:
        labels = attribute_labels(v, attributes)
        bags.extend(RegionBag(v.frame_regions(j), labels) for j in range(v.n_frames))
    return bags


def video_bags(videos, attributes):
    return [RegionBag(v.region_grids.reshape(v.n_frames, -1, v.region_grids.shape[-1]),
                      attribute_labels(v, attributes)) for v in videos]


def _check_video(video):
    if video.region_grids is None or video.region_grids.size == 0 or video.n_frames < 1:
        raise ValueError(f"video {video.id} has no region grids")


def frame_distributions(video: VideoExample, detectors):
    """Per-frame image-bag probabilities, shape (n_frames, n_attr)."""
    _check_video(video)
    return np.stack([noisy_or_image(region_probabilities(video.frame_regions(j), detectors))
                     for j in range(video.n_frames)])


def image_attribute_representation(video: VideoExample, detectors):
    """Mean over frames of the per-frame noisy-OR distribution."""
    return frame_distributions(video, detectors).mean(axis=0)


def video_attribute_representation(video: VideoExample, detectors):
    """Noisy-OR over the regions of all frames at once."""
    _check_video(video)
    return noisy_or_image(region_probabilities(video.all_regions(), detectors))


def bag_accuracy(videos, detectors, domain, attributes=None, threshold=0.5):
    """Fraction of (video, attribute) decisions that match caption labels."""
    rep = image_attribute_representation if domain == "image" else video_attribute_representation
    cols = list(range(len(detectors.attributes)))
    if attributes is not None:
        cols = [detectors.attributes.index(a) for a in attributes]
    hits = total = 0
    for v in videos:
        pred = rep(v, detectors)[cols] >= threshold
        truth = attribute_labels(v, detectors.attributes)[cols] > 0.5
        hits += int(np.sum(pred == truth))
        total += len(cols)
    return hits / total
