"""retlab: a desk-scale retrieval lab.

Dense and sparse single-vector retrieval over a small trainable
bidirectional encoder, with MNTP pretraining, contrastive / distillation
fine-tuning, FLOP-regularized sparse representations served from an
inverted index, and TREC-style evaluation.
"""

from .autodiff import Tensor, backward, finite_difference_check
from .encoder import EncoderConfig, EncoderModel, TokenSequence, encode_sequence, \
    mntp_loss, select_mask_positions
from .evaluation import Qrels, Run, mrr_at_k, ndcg_at_k, paired_t_test
from .index import DenseStore, InvertedIndex, build_inverted_index, search_dense, search_sparse
from .objectives import TrainingGroup, cl_loss, combined_loss, kl_div_loss, \
    margin_mse_loss, oracle_teacher_score
from .represent import DenseVector, SparseVector, dense_pool, flop_penalty, \
    relevance_score, sparse_project
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train
from .vocab import Vocabulary, build_vocabulary, tokenize

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "finite_difference_check",
    "EncoderConfig", "EncoderModel", "TokenSequence", "encode_sequence",
    "mntp_loss", "select_mask_positions",
    "Qrels", "Run", "mrr_at_k", "ndcg_at_k", "paired_t_test",
    "DenseStore", "InvertedIndex", "build_inverted_index", "search_dense", "search_sparse",
    "TrainingGroup", "cl_loss", "combined_loss", "kl_div_loss",
    "margin_mse_loss", "oracle_teacher_score",
    "DenseVector", "SparseVector", "dense_pool", "flop_penalty",
    "relevance_score", "sparse_project",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
    "Vocabulary", "build_vocabulary", "tokenize",
]
