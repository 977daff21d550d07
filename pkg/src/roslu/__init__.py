"""Noise-robust slot filling: a transformer slot generator trained against a
gradient-reversal domain discriminator, with the noising, training and
evaluation pipeline around it."""

from .data import NoiseConfig, RawExample, SlotSpan, Vocab, bio_to_spans, build_vocab, inject_noise, load_split, make_target
from .evaluate import EvalReport, correction_analysis, evaluate, parse_generated, slot_f1
from .model import ModelConfig, RoSLU, TaggingBaseline
from .rng import Rng
from .train import TrainConfig, grid_search_alpha, load_checkpoint, save_checkpoint, train

__all__ = [
    "EvalReport", "ModelConfig", "NoiseConfig", "RawExample", "Rng", "RoSLU", "SlotSpan", "TaggingBaseline",
    "TrainConfig", "Vocab", "bio_to_spans", "build_vocab", "correction_analysis", "evaluate",
    "grid_search_alpha", "inject_noise", "load_checkpoint", "load_split", "make_target", "parse_generated",
    "save_checkpoint", "slot_f1", "train",
]
