"""Metric learning with a gated ranking loss and a dual (original + masked) input encoder."""

from .diffcore import Tape, Tensor, backward, finite_diff_grad
from .encoder import EncoderConfig, EncoderParams, ImagePair, encode, encode_batch, init_params
from .evaluation import EvalReport, FeatureSet, evaluate, evaluate_single_query, multi_query_pool
from .kernels import BACKEND
from .losses import (
    EmbeddingBatch,
    LossParams,
    RankingBatch,
    batch_npair_loss,
    batch_ranking_loss,
    npair_loss,
    ranking_loss,
    ranking_loss_full,
    similarity,
    softmax_ce,
    triplet_loss_hard,
)
from .sampler import BatchSampler, BatchSpec, DatasetIndex, InsufficientDataError

__version__ = "0.1.0"
