"""Conversational semantic role labeling with predicate-aware attention and a
speaker-aware utterance graph, on a small in-house autodiff core."""

from .corpus import ArgumentSpan, Conversation, Corpus, CorpusError, Frame, Utterance, load_corpus
from .harness import Metrics, TrainConfig, evaluate, run_ablation, train
from .model import CSAGN, ModelConfig, Switches

__version__ = "0.1.0"

__all__ = [
    "ArgumentSpan",
    "CSAGN",
    "Conversation",
    "Corpus",
    "CorpusError",
    "Frame",
    "Metrics",
    "ModelConfig",
    "Switches",
    "TrainConfig",
    "Utterance",
    "evaluate",
    "load_corpus",
    "run_ablation",
    "train",
]
