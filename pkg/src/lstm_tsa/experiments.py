"""Paired desk-scale ablations: image vs video MIL, and fusion variants."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .captioner import Example, ModelDims, TrainConfig, encode_video, train
from .corpus import CorpusConfig, build_vocabulary, generate_synthetic_corpus, select_attributes
from .mil import (MILConfig, bag_accuracy, image_attribute_representation, image_bags,
                  train_mil, video_attribute_representation, video_bags)


@dataclass
class AblationConfig:
    corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(n_videos=100))
    mil_train: int = 80  # videos used to fit detectors; the rest are held out
    caption_videos: int = 20
    mil: MILConfig = field(default_factory=MILConfig)
    # full-batch descent: minibatch noise swamps the small variant gaps at this scale
    caption: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=400, learning_rate=1.0, batch_size=20))
    embed: int = 32
    hidden: int = 32
    vocab_size: int = 1000


@dataclass
class Prepared:
    corpus: object
    attributes: list
    image_detectors: object
    video_detectors: object
    vocab: object
    examples: list
    dims: ModelDims


def build_examples(videos, vocab, image_det=None, video_det=None, n_attr_image=0, n_attr_video=0):
    """One training example per (video, reference caption)."""
    out = []
    for v in videos:
        A_i = image_attribute_representation(v, image_det) if image_det else np.zeros(n_attr_image)
        A_v = video_attribute_representation(v, video_det) if video_det else np.zeros(n_attr_video)
        rep = encode_video(v.frame_features, v.clip_features)
        out.extend(Example(rep, A_i, A_v, vocab.encode(c)) for c in v.captions)
    return out


def prepare(seed, config: AblationConfig) -> Prepared:
    corpus = generate_synthetic_corpus(replace(config.corpus, seed=seed))
    fit = corpus.videos[: config.mil_train]
    attrs = select_attributes(fit)
    mil_cfg = replace(config.mil, seed=seed)
    video_det, _ = train_mil(video_bags(fit, attrs), attrs, mil_cfg)
    image_det, _ = train_mil(image_bags(fit, attrs), attrs, replace(mil_cfg, batch_size=corpus.n_frames))
    cap_videos = corpus.videos[: config.caption_videos]
    vocab = build_vocabulary([c for v in cap_videos for c in v.captions], config.vocab_size)
    examples = build_examples(cap_videos, vocab, image_det, video_det)
    dims = ModelDims(len(vocab), examples[0].video.size, len(attrs), len(attrs), config.embed, config.hidden)
    return Prepared(corpus, attrs, image_det, video_det, vocab, examples, dims)


def mil_ablation(seeds, config: AblationConfig = AblationConfig()):
    """Held-out dynamic-attribute accuracy per MIL domain, and I vs V captioner loss."""
    rows = []
    for seed in seeds:
        prep = prepare(seed, config)
        held_out = prep.corpus.videos[config.mil_train :]
        dyn = [a for a in prep.corpus.dynamic_attributes if a in prep.attributes]
        cap_cfg = replace(config.caption, seed=seed)
        loss_i = train(prep.examples, prep.dims, "i", cap_cfg).losses[-1]
        loss_v = train(prep.examples, prep.dims, "v", cap_cfg).losses[-1]
        rows.append({
            "seed": seed,
            "image_dynamic_acc": bag_accuracy(held_out, prep.image_detectors, "image", dyn),
            "video_dynamic_acc": bag_accuracy(held_out, prep.video_detectors, "video", dyn),
            "loss_i": loss_i,
            "loss_v": loss_v,
        })
    return rows


def fusion_ablation(seeds, config: AblationConfig = AblationConfig(), variants=("iv0", "iv1", "iv2", "iv3")):
    """Final training loss of each fusion variant, paired by seed."""
    rows = []
    for seed in seeds:
        prep = prepare(seed, config)
        cap_cfg = replace(config.caption, seed=seed)
        row = {"seed": seed}
        for variant in variants:
            row[variant] = train(prep.examples, prep.dims, variant, cap_cfg).losses[-1]
        rows.append(row)
    return rows


def format_table(rows):
    """Tab-separated table with a header line."""
    if not rows:
        return ""
    keys = list(rows[0])
    lines = ["\t".join(keys)]
    for row in rows:
        lines.append("\t".join(f"{row[k]:.6g}" if isinstance(row[k], float) else str(row[k]) for k in keys))
    return "\n".join(lines)
