"""Two-layer LSTM captioner with transferred semantic attributes.

The first LSTM layer reads the embedded input (the projected video at the
initial step, then embedded words).  Its hidden output plus the fused
attribute vector forms the second layer's input, and the second layer's
hidden state feeds the vocabulary softmax.

Fusion variants::

    none  0
    i     T_Ai A_i
    v     T_Av A_v
    iv0   T_Ai A_i + T_Av A_v
    iv1   (T_Ai A_i) * g + T_Av A_v
    iv2   T_Ai A_i + (T_Av A_v) * g
    iv3   (T_Ai A_i) * (1 - g) + (T_Av A_v) * g

with the transfer gate ``g = sigmoid(G_s w + G_h h_prev + G_i A_i + G_v A_v + b_g)``.

All model code is written against an ops object, so the same functions
run eagerly on numpy arrays (decoding) or build an autodiff graph
(training).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import Eager, Graph, clip_grad_norm, glorot_uniform, sgd_step

VARIANTS = ("none", "i", "v", "iv0", "iv1", "iv2", "iv3")
GATED = ("iv1", "iv2", "iv3")


def normalize_variant(variant):
    v = str(variant).lower()
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    return v


def uses_image(variant):
    return variant in ("i", "iv0") + GATED


def uses_video(variant):
    return variant in ("v", "iv0") + GATED


@dataclass(frozen=True)
class ModelDims:
    vocab: int
    video: int
    attr_image: int
    attr_video: int
    embed: int = 64
    hidden: int = 64


def param_shapes(dims: ModelDims, variant):
    variant = normalize_variant(variant)
    De, Dh, V = dims.embed, dims.hidden, dims.vocab
    shapes = {
        "T_v": (De, dims.video),
        "T_s": (De, V),
        "f1.W": (4 * De, 2 * De),
        "f1.b": (4 * De,),
        "f2.W": (4 * Dh, De + Dh),
        "f2.b": (4 * Dh,),
        "out.W": (V, Dh),
        "out.b": (V,),
    }
    if uses_image(variant):
        shapes["T_Ai"] = (De, dims.attr_image)
    if uses_video(variant):
        shapes["T_Av"] = (De, dims.attr_video)
    if variant in GATED:
        shapes.update({
            "G_s": (De, V),
            "G_h": (De, Dh),
            "G_i": (De, dims.attr_image),
            "G_v": (De, dims.attr_video),
            "G_b": (De,),
        })
    return shapes


def init_params(dims: ModelDims, variant, seed=0):
    """Glorot-uniform matrices, zero biases, forget-gate biases at 1.

    Each tensor draws from its own name-keyed stream, so parameters that
    two variants share start identical under the same seed.
    """
    params = {}
    for name, shape in param_shapes(dims, variant).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = glorot_uniform(shape, seed, name)
    for layer, H in (("f1", dims.embed), ("f2", dims.hidden)):
        params[f"{layer}.b"][H : 2 * H] = 1.0
    return params


class StepState(NamedTuple):
    h1: np.ndarray
    c1: np.ndarray
    h2: np.ndarray
    c2: np.ndarray


def encode_video(frame_features, clip_features):
    """Concatenated mean-pooled frame and clip features."""
    frames = np.asarray(frame_features, dtype=np.float64)
    clips = np.asarray(clip_features, dtype=np.float64)
    if frames.ndim != 2 or clips.ndim != 2 or len(frames) == 0 or len(clips) == 0:
        raise ValueError("need at least one frame and one clip feature vector")
    return np.concatenate([frames.mean(axis=0), clips.mean(axis=0)])


# -- model equations, backend-agnostic -----------------------------------


def lstm_cell(ops, x, h, c, W, b, H):
    z = ops.add(ops.matmul(ops.concat([x, h]), W, trans_b=True), b)
    i = ops.sigmoid(ops.slice(z, 0, H))
    f = ops.sigmoid(ops.slice(z, H, 2 * H))
    o = ops.sigmoid(ops.slice(z, 2 * H, 3 * H))
    u = ops.tanh(ops.slice(z, 3 * H, 4 * H))
    c_new = ops.add(ops.mul(f, c), ops.mul(i, u))
    return ops.mul(o, ops.tanh(c_new)), c_new


def attribute_context(ops, P, variant, A_i, A_v):
    """Per-sequence constants of the fusion: projected attributes and gate offset."""
    ctx = {}
    if uses_image(variant):
        ctx["img"] = ops.matmul(A_i, P["T_Ai"], trans_b=True)
    if uses_video(variant):
        ctx["vid"] = ops.matmul(A_v, P["T_Av"], trans_b=True)
    if variant in GATED:
        ctx["gate_static"] = ops.add(
            ops.add(ops.matmul(A_i, P["G_i"], trans_b=True), ops.matmul(A_v, P["G_v"], trans_b=True)),
            P["G_b"],
        )
    return ctx


def transfer_gate(ops, P, word, h_prev, ctx):
    pre = ops.add(ops.add(ops.matmul(word, P["G_s"], trans_b=True),
                          ops.matmul(h_prev, P["G_h"], trans_b=True)), ctx["gate_static"])
    return ops.sigmoid(pre)


def transfer_unit(ops, variant, img, vid, gate=None):
    """Fuse projected image/video attributes; ``None`` means the zero vector."""
    if variant in GATED and gate is None:
        raise ValueError(f"variant {variant} needs the transfer gate output")
    if variant == "none":
        return None
    if variant == "i":
        return img
    if variant == "v":
        return vid
    if variant == "iv0":
        return ops.add(img, vid)
    if variant == "iv1":
        return ops.add(ops.mul(img, gate), vid)
    if variant == "iv2":
        return ops.add(img, ops.mul(vid, gate))
    return ops.add(ops.mul(img, ops.affine(gate, -1.0, 1.0)), ops.mul(vid, gate))


def core_step(ops, P, variant, dims, state, embedded, word, ctx):
    """One recurrent step; returns the new state tuple (h1, c1, h2, c2)."""
    h1, c1, h2, c2 = state
    h1, c1 = lstm_cell(ops, embedded, h1, c1, P["f1.W"], P["f1.b"], dims.embed)
    gate = transfer_gate(ops, P, word, h2, ctx) if variant in GATED else None
    fused = transfer_unit(ops, variant, ctx.get("img"), ctx.get("vid"), gate)
    x = h1 if fused is None else ops.add(h1, fused)
    h2, c2 = lstm_cell(ops, x, h2, c2, P["f2.W"], P["f2.b"], dims.hidden)
    return h1, c1, h2, c2


def vocab_log_probs(ops, P, h2):
    return ops.log_softmax(ops.add(ops.matmul(h2, P["out.W"], trans_b=True), P["out.b"]))


# -- model object -------------------------------------------------------


def _rows(x, width, batch=None):
    """Promote a vector to a batch of one; ``None`` becomes zeros (unused attributes)."""
    if x is None:
        return np.zeros((batch or 1, width))
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 1 else x


class CaptionModel:
    """Parameters plus eager inference and cached training graphs."""

    def __init__(self, dims: ModelDims, variant="iv3", params=None, seed=0):
        self.dims = dims
        self.variant = normalize_variant(variant)
        self.params = init_params(dims, self.variant, seed) if params is None else dict(params)
        expected = param_shapes(dims, self.variant)
        if set(self.params) != set(expected):
            raise ValueError(f"parameter names {sorted(self.params)} do not match variant {self.variant}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        self._graphs = {}

    # eager inference; every array argument carries a leading batch axis

    def start(self, video, A_i, A_v, params=None):
        """Run the video step (t = -1); returns ``(state, ctx)``."""
        P = self.params if params is None else params
        E, d = Eager, self.dims
        video = _rows(video, d.video)
        A_i, A_v = _rows(A_i, d.attr_image, video.shape[0]), _rows(A_v, d.attr_video, video.shape[0])
        self._check_inputs(video, A_i, A_v)
        B = video.shape[0]
        ctx = attribute_context(E, P, self.variant, A_i, A_v)
        zeros_e, zeros_h = np.zeros((B, d.embed)), np.zeros((B, d.hidden))
        state = (zeros_e, zeros_e, zeros_h, zeros_h)
        embedded = E.matmul(video, P["T_v"], trans_b=True)
        state = core_step(E, P, self.variant, d, state, embedded, np.zeros((B, d.vocab)), ctx)
        return StepState(*state), ctx

    def step(self, state, token_ids, ctx, params=None):
        """Feed one token per row; returns ``(state, log_probs)`` with log_probs (B, vocab)."""
        P = self.params if params is None else params
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        if np.any(ids < 0) or np.any(ids >= self.dims.vocab):
            raise IndexError(f"token id out of range for vocabulary of {self.dims.vocab}")
        word = np.zeros((len(ids), self.dims.vocab))
        word[np.arange(len(ids)), ids] = 1.0
        embedded = Eager.matmul(word, P["T_s"], trans_b=True)
        new = core_step(Eager, P, self.variant, self.dims, state, embedded, word, ctx)
        return StepState(*new), vocab_log_probs(Eager, P, new[2])

    def step_log_probs(self, video, A_i, A_v, tokens, params=None):
        """Per-position log-probabilities of ``tokens`` under teacher forcing."""
        tokens = list(tokens)
        if not tokens:
            raise ValueError("caption must contain at least the end token")
        if any(not 0 <= t < self.dims.vocab for t in tokens):
            raise IndexError(f"token id out of range for vocabulary of {self.dims.vocab}")
        state, ctx = self.start(video, A_i, A_v, params)
        prev, out = 0, []  # BOS id is 0
        for t in tokens:
            state, logp = self.step(state, [prev], ctx, params)
            out.append(float(logp[0, t]))
            prev = t
        return out

    def sequence_log_prob(self, video, A_i, A_v, tokens, params=None):
        return math.fsum(self.step_log_probs(video, A_i, A_v, tokens, params))

    def _check_inputs(self, video, A_i, A_v):
        d = self.dims
        if video.shape[1] != d.video:
            raise ValueError(f"video representation has length {video.shape[1]}, model expects {d.video}")
        if uses_image(self.variant) or self.variant in GATED:
            if A_i.shape[1] != d.attr_image:
                raise ValueError(f"A_i has length {A_i.shape[1]}, model expects {d.attr_image}")
        if uses_video(self.variant) or self.variant in GATED:
            if A_v.shape[1] != d.attr_video:
                raise ValueError(f"A_v has length {A_v.shape[1]}, model expects {d.attr_video}")

    # training graphs

    def loss_graph(self, batch_size, steps):
        key = (batch_size, steps)
        if key not in self._graphs:
            self._graphs[key] = build_loss_graph(self.dims, self.variant, batch_size, steps)
        return self._graphs[key]

    def loss_and_grads(self, batch, params=None, grads=True):
        """Mean negative log-likelihood of ``batch`` of :class:`Example`."""
        P = self.params if params is None else params
        g = self.loss_graph(len(batch), max(len(ex.tokens) for ex in batch))
        out = g.evaluate({**P, **batch_bindings(self.dims, batch)})
        loss = float(out["loss"][0])
        return (loss, g.backward("loss")) if grads else (loss, None)


@dataclass
class Example:
    video: np.ndarray
    A_i: np.ndarray
    A_v: np.ndarray
    tokens: list  # target ids, ending in EOS


def build_loss_graph(dims: ModelDims, variant, batch_size, steps):
    """Teacher-forced NLL over ``steps`` positions for a padded batch.

    Targets are one-hot rows; padded positions have all-zero target rows
    and therefore contribute nothing.
    """
    g = Graph()
    B = batch_size
    P = {name: g.param(name, shape) for name, shape in param_shapes(dims, variant).items()}
    video = g.input("video", (B, dims.video))
    A_i = g.input("A_i", (B, dims.attr_image)) if uses_image(variant) or variant in GATED else None
    A_v = g.input("A_v", (B, dims.attr_video)) if uses_video(variant) or variant in GATED else None
    ctx = attribute_context(g, P, variant, A_i, A_v)
    zeros_e = g.constant(np.zeros((B, dims.embed)))
    zeros_h = g.constant(np.zeros((B, dims.hidden)))
    state = (zeros_e, zeros_e, zeros_h, zeros_h)
    embedded = g.matmul(video, P["T_v"], trans_b=True)
    zero_word = g.constant(np.zeros((B, dims.vocab)))
    state = core_step(g, P, variant, dims, state, embedded, zero_word, ctx)
    total = None
    for t in range(steps):
        word = g.input(f"word{t}", (B, dims.vocab))
        target = g.input(f"target{t}", (B, dims.vocab))
        state = core_step(g, P, variant, dims, state, g.matmul(word, P["T_s"], trans_b=True), word, ctx)
        picked = g.sum(g.mul(target, vocab_log_probs(g, P, state[2])))
        total = picked if total is None else g.add(total, picked)
        g.output(f"logp{t}", picked)
    g.output("loss", g.affine(total, -1.0 / B))
    return g


def batch_bindings(dims, batch):
    B = len(batch)
    steps = max(len(ex.tokens) for ex in batch)
    bind = {
        "video": np.stack([np.asarray(ex.video, dtype=np.float64) for ex in batch]),
        "A_i": np.stack([np.asarray(ex.A_i, dtype=np.float64) for ex in batch]),
        "A_v": np.stack([np.asarray(ex.A_v, dtype=np.float64) for ex in batch]),
    }
    for t in range(steps):
        word = np.zeros((B, dims.vocab))
        target = np.zeros((B, dims.vocab))
        for b, ex in enumerate(batch):
            if t < len(ex.tokens):
                target[b, ex.tokens[t]] = 1.0
            prev = 0 if t == 0 else ex.tokens[min(t, len(ex.tokens)) - 1]
            word[b, prev] = 1.0
        bind[f"word{t}"], bind[f"target{t}"] = word, target
    return bind


# -- training -----------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.1
    batch_size: int = 1
    clip_norm: float = 5.0
    seed: int = 0


@dataclass
class TrainResult:
    model: CaptionModel
    losses: list = field(default_factory=list)  # full-corpus mean NLL after each epoch
    per_token: list = field(default_factory=list)


def corpus_loss(model: CaptionModel, examples, params=None):
    """Mean sentence NLL and per-token NLL over all examples (one batch)."""
    loss, _ = model.loss_and_grads(examples, params, grads=False)
    n_tokens = sum(len(ex.tokens) for ex in examples)
    return loss, loss * len(examples) / n_tokens


def training_loss(model: CaptionModel, batch, params=None):
    if not batch:
        raise ValueError("empty batch")
    return model.loss_and_grads(list(batch), params)


def train(examples, dims: ModelDims, variant, config: TrainConfig = TrainConfig(), log=None) -> TrainResult:
    examples = list(examples)
    if not examples:
        raise ValueError("no training examples")
    model = CaptionModel(dims, variant, seed=config.seed)
    params = model.params
    rng = np.random.default_rng(config.seed)
    result = TrainResult(model)
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(examples), config.batch_size):
            batch = [examples[i] for i in order[start : start + config.batch_size]]
            loss, grads = model.loss_and_grads(batch, params)
            if not math.isfinite(loss):
                raise FloatingPointError(f"training loss is {loss} at epoch {epoch}")
            params = sgd_step(params, clip_grad_norm(grads, config.clip_norm), config.learning_rate)
        loss, per_token = corpus_loss(model, examples, params)
        if not math.isfinite(loss):
            raise FloatingPointError(f"training loss is {loss} at epoch {epoch}")
        result.losses.append(loss)
        result.per_token.append(per_token)
        if log is not None:
            log(epoch, loss, per_token)
    model.params = params
    return result


def config_dict(cfg):
    return asdict(cfg)
