"""Kronecker-product compression of recurrent layers."""

from .kron import (KroneckerChain, KroneckerPair, KronShapeError, ShapePlan, compression_ratio,
                   kp_expand, kp_expand_chain, kp_matvec, kp_matvec_chain, kp_matvec_grad,
                   plan_factor_shapes, prime_factorize)
from .operators import (DenseOperator, KronOperator, LinearOperator, LowRankOperator,
                        SparseOperator, StackedOperator)
from .baselines import (LowRankPair, PruneSchedule, SparseCSR, lowrank_for_budget,
                        magnitude_prune, schedule_sparsity, small_baseline)
from .cells import (Cell, CellSpec, CellState, bidirectional_forward, build_cell, cell_backward,
                    fastrnn_step, gru_step, lstm_step, rnn_step, sequence_forward)
from .train import (SequenceClassifier, SequenceDataset, TrainConfig, build_model,
                    finite_diff_check, make_separable_sequences, optimizer_step, train_model)
from . import analysis, archive, bench, datasets

__version__ = "0.1.0"
