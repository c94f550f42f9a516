"""Generative masked language modelling for translation, captioning and multimodal translation.

A single bidirectional transformer reads ``[SPEC] source [SEP] prefix [MASK] [SEP] regions``
and predicts the token under the mask; generation shifts the mask right until ``[STOP]``.
"""

from .embeddings import Conditioning, Modality, RegionFeature, compose_input
from .inference import EvalReport, bleu, congruence_eval, greedy_decode, stepwise_nll, zero_shot_eval
from .tasks import Sample, TaskSpec, UnrolledExample, shuffle_images, unroll
from .trainer import TrainConfig, lr_at, run_ablation, train
from .transformer import (ModelConfig, Parameters, forward, init_hybrid, init_random, load_checkpoint,
                          mlm_loss, save_checkpoint)
from .vocab import Vocabulary, build_vocab, decode, encode

__version__ = "0.1.0"

__all__ = [
    "Conditioning", "EvalReport", "Modality", "ModelConfig", "Parameters", "RegionFeature",
    "Sample", "TaskSpec", "TrainConfig", "UnrolledExample", "Vocabulary", "bleu", "build_vocab",
    "compose_input", "congruence_eval", "decode", "encode", "forward", "greedy_decode",
    "init_hybrid", "init_random", "load_checkpoint", "lr_at", "mlm_loss", "run_ablation",
    "save_checkpoint", "shuffle_images", "stepwise_nll", "train", "unroll", "zero_shot_eval",
]
