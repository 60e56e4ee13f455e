"""Two-stage training over a tiny decoder with simulated data parallelism."""

from .checkpoint import Checkpoint, CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import STAGE_TRAINABLE, STAGES, TrainConfig
from .loops import (
    TrainResult,
    batch_indices,
    caption_example,
    conversation_samples,
    finetune,
    make_toy_corpus,
    model_from_checkpoint,
    pretrain_align,
    resume,
    toy_alignment_data,
    toy_tokenizer,
    train_steps,
)
from .model import FeatureStore, LMConfig, MultimodalModel, Sample, TinyDecoderLM
from .parallel import DataParallelResult, full_batch_gradients, simulate_data_parallel_step

__all__ = [
    "STAGES",
    "STAGE_TRAINABLE",
    "Checkpoint",
    "CheckpointFormatError",
    "DataParallelResult",
    "FeatureStore",
    "LMConfig",
    "MultimodalModel",
    "Sample",
    "TinyDecoderLM",
    "TrainConfig",
    "TrainResult",
    "batch_indices",
    "caption_example",
    "conversation_samples",
    "finetune",
    "full_batch_gradients",
    "load_checkpoint",
    "make_toy_corpus",
    "model_from_checkpoint",
    "pretrain_align",
    "resume",
    "save_checkpoint",
    "simulate_data_parallel_step",
    "toy_alignment_data",
    "toy_tokenizer",
    "train_steps",
]
