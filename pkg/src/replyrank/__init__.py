"""Speaker-aware multi-turn response selection at desk scale.

Pipeline pieces: corpus ingestion, speaker-based channel disentanglement, a
deterministic tokenizer, four-track input encoding, a small numpy
transformer with exact analytic gradients, two-phase training and a
ranking/evaluation harness.
"""

from .corpus import CandidatePool, CorpusError, DialogueExample, Utterance
from .disentangle import FilteredContext, MatchRole, assign_speaker_roles, cap_context, filter_channel
from .encoding import EncodedInput, MatchingInstance, build_input, encode_instance, mark_turns
from .evaluation import (
    MetricReport,
    RankedPool,
    mean_average_precision,
    mean_reciprocal_rank,
    precision_at_one,
    rank_pool,
    recall_at_k,
    select_threshold,
)
from .model import ModelConfig, backward, forward, init_params, score
from .tokenizer import Vocabulary, build_vocab, detokenize, tokenize
from .training import TrainConfig, adaptation_loss, finetune_loss, plan_masking, train

__version__ = "0.1.0"

__all__ = [
    "CandidatePool",
    "CorpusError",
    "DialogueExample",
    "EncodedInput",
    "FilteredContext",
    "MatchRole",
    "MatchingInstance",
    "MetricReport",
    "ModelConfig",
    "RankedPool",
    "TrainConfig",
    "Utterance",
    "Vocabulary",
    "adaptation_loss",
    "assign_speaker_roles",
    "backward",
    "build_input",
    "build_vocab",
    "cap_context",
    "detokenize",
    "encode_instance",
    "filter_channel",
    "finetune_loss",
    "forward",
    "init_params",
    "mark_turns",
    "mean_average_precision",
    "mean_reciprocal_rank",
    "plan_masking",
    "precision_at_one",
    "rank_pool",
    "recall_at_k",
    "score",
    "select_threshold",
    "tokenize",
    "train",
]
