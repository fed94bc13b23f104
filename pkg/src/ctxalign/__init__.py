"""Contrastive + contextual alignment of dual-encoder embeddings at desk
scale, with a minimal reverse-mode tensor engine."""

from .tensor import Tensor, Tape, build, backward, grad_check
from .losses import (
    LossConfig,
    AffinityReport,
    LossBreakdown,
    cosine_similarity_matrix,
    contrastive_loss,
    contextual_affinity,
    contextual_similarity,
    contextual_loss,
    total_loss,
)
from .encoders import Dims, ModelParams, init_params
from .data import CorpusSpec, PairCorpus, PairRecord, generate, save_corpus, load_corpus
from .training import TrainConfig, Checkpoint, train, fine_tune, save_checkpoint, load_checkpoint
from .evaluation import (
    ClassPrompt,
    EvalResult,
    build_class_embeddings,
    zero_shot_classify,
    retrieve,
    recall_at_k,
    project_2d,
)

__version__ = "0.1.0"
