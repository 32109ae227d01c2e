"""Command-line entry point: ``lstm-tsa <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, replace

from . import captioner as cap
from .checkpoint import CheckpointError, check_shapes, load_checkpoint, save_checkpoint
from .corpus import (CorpusConfig, CorpusFormatError, Vocabulary, build_vocabulary,
                     generate_synthetic_corpus, load_corpus, load_predictions, save_corpus,
                     save_predictions, select_attributes)
from .decoder import beam_search, greedy_decode
from .captioner import encode_video
from .gradcheck import TOLERANCE as GRADCHECK_TOL, gradcheck_report
from .experiments import AblationConfig, build_examples, format_table, fusion_ablation, mil_ablation
from .metrics import evaluate, format_report, records_from
from .mil import (AttributeDetectors, MILConfig, bag_accuracy,
                  image_attribute_representation, image_bags, train_mil,
                  video_attribute_representation, video_bags)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return parse


pos_int, pos_float = _positive(int), _positive(float)


def _run_config(args):
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# -- loading helpers ----------------------------------------------------


def _load_corpus(path):
    try:
        return load_corpus(path)
    except FileNotFoundError:
        raise DataError(f"corpus not found: {path}") from None
    except CorpusFormatError as exc:
        raise DataError(str(exc)) from None


def _load_detectors(path):
    try:
        header, params = load_checkpoint(path, kind=("mil-image", "mil-video"))
    except FileNotFoundError:
        raise DataError(f"detector checkpoint not found: {path}") from None
    attrs = header["config"]["attributes"]
    check_shapes(header, params, {"W": (len(attrs), header["config"]["region_dim"]), "b": (len(attrs),)}, path)
    return header, AttributeDetectors(attrs, params["W"], params["b"])


def load_caption_model(path):
    try:
        header, params = load_checkpoint(path, kind="caption-model")
    except FileNotFoundError:
        raise DataError(f"model checkpoint not found: {path}") from None
    cfg = header["config"]
    dims = cap.ModelDims(**cfg["dims"])
    check_shapes(header, params, cap.param_shapes(dims, cfg["variant"]), path)
    vocab = Vocabulary(cfg["vocabulary"][3:])
    if len(vocab) != dims.vocab:
        raise CheckpointError(f"{path}: vocabulary has {len(vocab)} tokens, dims declare {dims.vocab}")
    return header, cap.CaptionModel(dims, cfg["variant"], params), vocab


def _detectors_for(variant, image_path, video_path):
    need_i = cap.uses_image(variant)
    need_v = cap.uses_video(variant)
    if variant in cap.GATED and not (image_path and video_path):
        raise UsageError(f"variant {variant} needs both --image-detectors and --video-detectors")
    if need_i and not image_path:
        raise UsageError(f"variant {variant} needs --image-detectors")
    if need_v and not video_path:
        raise UsageError(f"variant {variant} needs --video-detectors")
    image_det = _load_detectors(image_path)[1] if need_i else None
    video_det = _load_detectors(video_path)[1] if need_v else None
    return image_det, video_det


# -- commands -----------------------------------------------------------


def cmd_gen_corpus(args):
    cfg = CorpusConfig(n_videos=args.videos, n_frames=args.frames, seed=args.seed, vocab_size=args.vocab_size,
                       n_subjects=args.subjects, n_verbs=args.verbs, n_objects=args.objects)
    try:
        corpus = generate_synthetic_corpus(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.videos)} videos to {args.out} "
          f"(N_v={corpus.n_frames}, frame_dim={corpus.frame_dim}, clip_dim={corpus.clip_dim}, "
          f"grid={corpus.grid_size}, region_dim={corpus.region_dim})")


def cmd_train_mil(args):
    corpus = _load_corpus(args.corpus)
    attrs = select_attributes(corpus.videos, args.attributes)
    if not attrs:
        raise DataError("corpus has no learnable attributes (every word is in every video)")
    if args.domain == "video":
        bags, batch = video_bags(corpus.videos, attrs), 1
    else:
        bags, batch = image_bags(corpus.videos, attrs), corpus.n_frames
    config = MILConfig(epochs=args.epochs, learning_rate=args.lr, seed=args.seed, batch_size=batch)
    det, trace = train_mil(bags, attrs, config)
    header = {"attributes": attrs, "region_dim": corpus.region_dim, "run": _run_config(args),
              "mil": asdict(config)}
    save_checkpoint(args.out, f"mil-{args.domain}", header, det.params())
    for epoch in range(0, len(trace), max(1, len(trace) // 10)):
        print(f"epoch\t{epoch}\tloss\t{trace[epoch]!r}", file=sys.stderr)
    print(f"final_loss\t{trace[-1]!r}")
    print(f"bag_accuracy\t{bag_accuracy(corpus.videos, det, args.domain)!r}")
    dyn = [a for a in corpus.dynamic_attributes if a in attrs]
    if dyn:
        print(f"dynamic_bag_accuracy\t{bag_accuracy(corpus.videos, det, args.domain, dyn)!r}")


def cmd_train_caption(args):
    corpus = _load_corpus(args.corpus)
    variant = args.variant
    image_det, video_det = _detectors_for(variant, args.image_detectors, args.video_detectors)
    vocab = build_vocabulary(corpus.all_captions(), args.vocab_size)
    n_i = len(image_det.attributes) if image_det else 0
    n_v = len(video_det.attributes) if video_det else 0
    examples = build_examples(corpus.videos, vocab, image_det, video_det, n_i, n_v)
    dims = cap.ModelDims(len(vocab), examples[0].video.size, n_i, n_v, args.embed, args.hidden)
    config = cap.TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                             clip_norm=args.clip, seed=args.seed)

    def log(epoch, loss, per_token):
        print(f"epoch\t{epoch}\tloss\t{loss!r}\tper_token\t{per_token!r}")

    result = cap.train(examples, dims, variant, config, log=log)
    header = {"variant": variant, "dims": asdict(dims), "vocabulary": vocab.tokens,
              "image_attributes": image_det.attributes if image_det else [],
              "video_attributes": video_det.attributes if video_det else [],
              "train": asdict(config), "run": _run_config(args)}
    save_checkpoint(args.out, "caption-model", header, result.model.params)
    print(f"final_loss\t{result.losses[-1]!r}")


def _check_detectors(header, image_det, video_det):
    cfg = header["config"]
    for det, key in ((image_det, "image_attributes"), (video_det, "video_attributes")):
        if det is not None and det.attributes != cfg[key]:
            raise DataError(f"detector attributes do not match the model's {key}")


def cmd_caption(args):
    header, model, vocab = load_caption_model(args.model)
    corpus = _load_corpus(args.corpus)
    image_det, video_det = _detectors_for(model.variant, args.image_detectors, args.video_detectors)
    _check_detectors(header, image_det, video_det)
    predictions = []
    for v in corpus.videos:
        video = encode_video(v.frame_features, v.clip_features)
        A_i = image_attribute_representation(v, image_det) if image_det else None
        A_v = video_attribute_representation(v, video_det) if video_det else None
        if args.greedy:
            hyp = greedy_decode(model, video, A_i, A_v, args.max_len)
        else:
            hyp = beam_search(model, video, A_i, A_v, args.beam, args.max_len)
        words = vocab.decode(hyp.tokens)
        predictions.append((v.id, words))
        print(f"{v.id}\t{' '.join(words)}\t{hyp.score!r}")
    if args.out:
        save_predictions(predictions, args.out)


def cmd_evaluate(args):
    corpus = _load_corpus(args.corpus)
    try:
        preds = load_predictions(args.predictions)
    except FileNotFoundError:
        raise DataError(f"predictions not found: {args.predictions}") from None
    except CorpusFormatError as exc:
        raise DataError(str(exc)) from None
    refs = {v.id: v.captions for v in corpus.videos}
    try:
        records = records_from(preds, refs)
    except KeyError as exc:
        raise DataError(str(exc.args[0])) from None
    print(format_report(evaluate(records), machine=args.format == "tsv"))


def cmd_gradcheck(args):
    rows = gradcheck_report(args.embed, args.hidden, args.vocab, args.seed)
    worst = 0.0
    for group, name, err in rows:
        print(f"{group}\t{name}\t{err:.3e}")
        worst = max(worst, err)
    print(f"max_relative_error\t{worst:.3e}")
    if worst >= GRADCHECK_TOL:
        print(f"gradient check FAILED (>= {GRADCHECK_TOL})", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def _ablation_config(args):
    cfg = AblationConfig()
    cfg.caption = replace(cfg.caption, epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size)
    cfg.embed = cfg.hidden = args.dim
    return cfg


def cmd_ablate_mil(args):
    print(format_table(mil_ablation(range(args.seeds), _ablation_config(args))))


def cmd_ablate_fusion(args):
    print(format_table(fusion_ablation(range(args.seeds), _ablation_config(args))))


# -- parser -------------------------------------------------------------


_ABL = AblationConfig()


def build_parser():
    p = _Parser(prog="lstm-tsa", description="Video captioning with transferred semantic attributes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--videos", type=pos_int, default=20)
    g.add_argument("--frames", type=pos_int, default=CorpusConfig.n_frames)
    g.add_argument("--subjects", type=pos_int, default=CorpusConfig.n_subjects)
    g.add_argument("--verbs", type=pos_int, default=CorpusConfig.n_verbs)
    g.add_argument("--objects", type=int, default=CorpusConfig.n_objects)
    g.add_argument("--vocab-size", type=pos_int, default=CorpusConfig.vocab_size)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_corpus)

    m = sub.add_parser("train-mil", help="train noisy-OR attribute detectors")
    m.add_argument("--corpus", required=True)
    m.add_argument("--domain", choices=("image", "video"), required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--attributes", type=pos_int, default=None, help="keep the K most common attribute words")
    m.add_argument("--epochs", type=pos_int, default=MILConfig.epochs)
    m.add_argument("--lr", type=pos_float, default=MILConfig.learning_rate)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_train_mil)

    t = sub.add_parser("train-caption", help="train the captioner")
    t.add_argument("--corpus", required=True)
    t.add_argument("--variant", type=str.lower, choices=cap.VARIANTS, default="iv3")
    t.add_argument("--image-detectors")
    t.add_argument("--video-detectors")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=pos_int, default=100)
    t.add_argument("--lr", type=pos_float, default=0.1)
    t.add_argument("--batch-size", type=pos_int, default=1)
    t.add_argument("--clip", type=pos_float, default=5.0)
    t.add_argument("--embed", type=pos_int, default=64)
    t.add_argument("--hidden", type=pos_int, default=64)
    t.add_argument("--vocab-size", type=pos_int, default=1000)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train_caption)

    c = sub.add_parser("caption", help="decode captions for every video")
    c.add_argument("--model", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--image-detectors")
    c.add_argument("--video-detectors")
    c.add_argument("--out", help="prediction file to write")
    c.add_argument("--beam", type=pos_int, default=4)
    c.add_argument("--greedy", action="store_true")
    c.add_argument("--max-len", type=pos_int, default=20)
    c.set_defaults(func=cmd_caption)

    e = sub.add_parser("evaluate", help="BLEU@1-4 and CIDEr-D of a prediction file")
    e.add_argument("--corpus", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--format", choices=("tsv", "text"), default="tsv")
    e.set_defaults(func=cmd_evaluate)

    k = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    k.add_argument("--embed", type=pos_int, default=4)
    k.add_argument("--hidden", type=pos_int, default=4)
    k.add_argument("--vocab", type=pos_int, default=5)
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(func=cmd_gradcheck)

    for name, func, help_ in (("ablate-mil", cmd_ablate_mil, "image- vs video-MIL table"),
                              ("ablate-fusion", cmd_ablate_fusion, "transfer-unit variant table")):
        a = sub.add_parser(name, help=help_)
        a.add_argument("--seeds", type=pos_int, default=5)
        a.add_argument("--epochs", type=pos_int, default=_ABL.caption.epochs)
        a.add_argument("--lr", type=pos_float, default=_ABL.caption.learning_rate)
        a.add_argument("--batch-size", type=pos_int, default=_ABL.caption.batch_size)
        a.add_argument("--dim", type=pos_int, default=_ABL.embed)
        a.set_defaults(func=func)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(f"lstm-tsa: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, CorpusFormatError) as exc:
        print(f"lstm-tsa: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"lstm-tsa: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
