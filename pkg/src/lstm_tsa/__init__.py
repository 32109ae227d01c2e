"""LSTM with transferred semantic attributes for video captioning.

Everything runs on numpy: a small reverse-mode autodiff engine, noisy-OR
attribute detectors, the two-layer captioner with its transfer unit,
decoders, caption metrics and a synthetic corpus generator.
"""

from .autodiff import Eager, Graph, GraphError, finite_difference_gradient, relative_error
from .captioner import VARIANTS, CaptionModel, Example, ModelDims, TrainConfig, train
from .corpus import (Corpus, CorpusConfig, CorpusFormatError, VideoExample, Vocabulary,
                     build_vocabulary, generate_synthetic_corpus, load_corpus, save_corpus)
from .decoder import Hypothesis, beam_search, exhaustive_decode, greedy_decode
from .metrics import EvaluationRecord, bleu_n, cider_d, evaluate
from .mil import (AttributeDetectors, MILConfig, RegionBag, noisy_or_image, noisy_or_video,
                  train_mil)

__all__ = [
    "Eager", "Graph", "GraphError", "finite_difference_gradient", "relative_error",
    "VARIANTS", "CaptionModel", "Example", "ModelDims", "TrainConfig", "train",
    "Corpus", "CorpusConfig", "CorpusFormatError", "VideoExample", "Vocabulary",
    "build_vocabulary", "generate_synthetic_corpus", "load_corpus", "save_corpus",
    "Hypothesis", "beam_search", "exhaustive_decode", "greedy_decode",
    "EvaluationRecord", "bleu_n", "cider_d", "evaluate",
    "AttributeDetectors", "MILConfig", "RegionBag", "noisy_or_image", "noisy_or_video", "train_mil",
]
__version__ = "0.1.0"
