"""Feed-forward latent domain adaptation with support/query cross-attention."""

from .attention import AttentionRecord, CrossAttention, cross_attend
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Benchmark, DomainSpec, DomainSplit, Episode, make_eval_suite, sample_episode
from .errors import (CheckpointError, ConfigError, ContractError, FFDAError, NumericError,
                     SamplerError, ShapeError)
from .methods import METHODS, run_task
from .metrics import attention_histogram, evaluate, evaluate_model, worst_decile
from .model import ArchConfig, ModelParams, adapt_and_predict, build_model
from .tensor import Tape, Tensor, backward, precision
from .train import SGD, TrainConfig, train, train_step

__version__ = "0.1.0"
