"""Gated parameter-transfer toolkit.

A small, numpy-only stack for studying learned transfer between a frozen
source network and a trainable target network: a reverse-mode tape, the
gated transfer unit, CNN/RNN assemblies, structured-sparsity penalties, a
training harness with classic baselines, and a config-driven CLI.
"""

from .data import LabeledDataset, SplitSpec, Splits, load_idx, resize_bilinear, split, \
    synth_glyphs, synth_transfer_pair
from .errors import ConfigError, ContractError, ParseError, ShapeError
from .nets import (AssembledModel, NetworkSpec, PlainModel, TransferState,
                   apply_transfer_state, assemble_ptu_cnn, assemble_ptu_rnn,
                   build_cnn, build_rnn, forward, lenet_spec, load_checkpoint,
                   rnn_spec, save_checkpoint, tiny_cnn_spec)
from .regularizers import PenaltyConfig, group_lasso_penalty, l1_penalty, l2_penalty, \
    total_regularized_loss
from .tensor import Tape, Tensor, backward, finite_difference_check
from .train import (ExperimentReport, TrainConfig, TransferTask, compare_methods,
                    cross_entropy_loss, enumerate_ft_strategies, holdout_select,
                    knn_classify, random_guess, run_methods, sgd_step, train)
from .unit import GateStats, PtuOutput, PtuParams, gate_statistics, ptu_forward, ptu_init

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
