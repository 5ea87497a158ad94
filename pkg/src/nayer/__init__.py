"""Data-free knowledge distillation from constant label-text embeddings.

A frozen teacher is distilled into a student without its training data:
per-class text embeddings feed a per-round-reinitialized noisy layer and a
small upsampling generator; synthetic batches accumulate in a replay memory
the student trains on.
"""

from .config import DistillSchedule, EmbeddingSource, GeneratorSettings, RunConfig, preset_config
from .data import DatasetBundle, Normalizer, load_dataset
from .distill import DistillResult, MemoryBuffer, distill, load_classifier, save_classifier
from .embeddings import LTEPool, PromptTemplate, build_prompts, fallback_embeddings, load_embedding_file, lookup
from .losses import LossWeights, loss_bn, loss_ce, loss_generator, loss_kl, loss_student
from .metrics import convergence_time, diversity_score, runtime_report
from .models import evaluate, instrumented_forward, make_model, pretrain_teacher
from .synthesis import (
    ImageGenerator,
    InputMode,
    LatentMapper,
    NoisyLayer,
    SyntheticBatch,
    make_generator,
    make_latent,
    reinit_noisy_layer,
    spectral_normalize,
    synthesize,
)

__version__ = "0.1.0"

__all__ = [
    "DatasetBundle", "DistillResult", "DistillSchedule", "EmbeddingSource", "GeneratorSettings",
    "ImageGenerator", "InputMode", "LTEPool", "LatentMapper", "LossWeights", "MemoryBuffer",
    "Normalizer", "NoisyLayer", "PromptTemplate", "RunConfig", "SyntheticBatch",
    "build_prompts", "convergence_time", "distill", "diversity_score", "evaluate",
    "fallback_embeddings", "instrumented_forward", "load_classifier", "load_dataset",
    "load_embedding_file", "lookup", "loss_bn", "loss_ce", "loss_generator", "loss_kl",
    "loss_student", "make_generator", "make_latent", "make_model", "preset_config",
    "pretrain_teacher", "reinit_noisy_layer", "runtime_report", "save_classifier",
    "spectral_normalize", "synthesize",
]
