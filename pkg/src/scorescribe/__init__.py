"""End-to-end monophonic optical music recognition.

A staff image goes through a residual recurrent convolutional feature
extractor and a bidirectional LSTM stack into per-frame symbol
log-probabilities, trained with CTC and decoded greedily. Ships with its
own reverse-mode autodiff core, evaluation metrics, dataset/synthetic
corpora and a CLI.
"""

from .autodiff import GradCheckError, RunningStats, ShapeError, Tensor, grad_check, no_grad
from .ctc import CtcError, brute_force_likelihood, ctc_loss, greedy_decode
from .data import (
    Batch,
    DataError,
    Incipit,
    Sample,
    SplitSpec,
    Vocabulary,
    build_vocab,
    discover_corpus,
    load_image,
    make_batch,
    parse_encoding,
    split_ids,
    synth_generate,
    synth_vocab,
)
from .metrics import EvalReport, compute_er, compute_ser, compute_ser_macro, edit_distance, format_cell
from .model import ArchConfig, ProbLattice, TranscriptionModel, count_frames, init_params, map_to_sequence
from .training import (
    Adam,
    Checkpoint,
    CheckpointChecksumError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointVersionError,
    NumericError,
    TrainResult,
    TrainSettings,
    checkpoint_load,
    checkpoint_save,
    evaluate_model,
    restore_model,
    snapshot_model,
    train,
)

__version__ = "0.1.0"
