"""Vessel-segmentation transformer built on a NumPy autodiff core.

The package provides a reverse-mode tape (`Tape`/`Tensor`), the layers and
blocks of the TransCC architecture, a synthetic vessel-phantom dataset with
PGM I/O, BCE/Adam training with binary checkpoints, overlap- and
distance-based evaluation metrics, and a finite-difference gradient checker.
"""

from .config import RunConfig, config_text, load_config_file, make_run_config
from .data import (
    Dataset,
    PhantomConfig,
    Record,
    SampleBatch,
    batch_stream,
    build_manifest,
    generate_dataset,
    generate_phantom,
    load_dataset,
    read_pgm,
    read_sample,
    write_pgm,
    write_sample,
)
from .decoder import ConvBlock, Decoder, SkipBranch
from .encoder import EncoderStack, FeedForwardBlock, MepBlock, MsaBlock
from .errors import (
    BadCheckpointError,
    DetachedTensorError,
    EmptyBoundaryError,
    EmptySplitError,
    IndivisibleInputError,
    InvalidConfigError,
    InvalidRateError,
    MalformedPgmError,
    MissingGradientError,
    MissingPairError,
    NanLossError,
    NotScalarError,
    ShapeMismatchError,
    TokenCountMismatchError,
    TransccError,
)
from .fie import FieEmbedding, PatchEmbedding, map_to_tokens, tokens_to_map
from .gradcheck import Check, CheckResult, finite_difference, run_check, run_suite
from .layers import (
    BatchNorm2d,
    Buffer,
    Conv2d,
    ConvTranspose2d,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    Parameter,
)
from .metrics import (
    MetricsReport,
    SampleMetrics,
    asd,
    bce_loss,
    boundary,
    dice,
    f1_micro,
    hausdorff,
    iou,
)
from .model import ModelConfig, TransCC, VARIANTS, build_model, count_params
from .tensor import Tape, Tensor
from .training import (
    Adam,
    evaluate,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    train_model,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BadCheckpointError",
    "BatchNorm2d",
    "Buffer",
    "Check",
    "CheckResult",
    "Conv2d",
    "ConvBlock",
    "ConvTranspose2d",
    "Dataset",
    "Decoder",
    "DetachedTensorError",
    "Dropout",
    "EmptyBoundaryError",
    "EmptySplitError",
    "EncoderStack",
    "FeedForwardBlock",
    "FieEmbedding",
    "IndivisibleInputError",
    "InvalidConfigError",
    "InvalidRateError",
    "LayerNorm",
    "Linear",
    "MalformedPgmError",
    "MepBlock",
    "MetricsReport",
    "MissingGradientError",
    "MissingPairError",
    "ModelConfig",
    "Module",
    "MsaBlock",
    "NanLossError",
    "NotScalarError",
    "Parameter",
    "PatchEmbedding",
    "PhantomConfig",
    "Record",
    "RunConfig",
    "SampleBatch",
    "SampleMetrics",
    "ShapeMismatchError",
    "SkipBranch",
    "Tape",
    "Tensor",
    "TokenCountMismatchError",
    "TransCC",
    "TransccError",
    "VARIANTS",
    "asd",
    "batch_stream",
    "bce_loss",
    "boundary",
    "build_manifest",
    "build_model",
    "config_text",
    "count_params",
    "dice",
    "evaluate",
    "f1_micro",
    "finite_difference",
    "generate_dataset",
    "generate_phantom",
    "hausdorff",
    "iou",
    "load_checkpoint",
    "load_config_file",
    "load_dataset",
    "main",
    "make_run_config",
    "read_checkpoint",
    "read_pgm",
    "read_sample",
    "run_check",
    "run_suite",
    "save_checkpoint",
    "train_model",
    "write_pgm",
    "write_sample",
]


def main(argv: list[str] | None = None) -> int:
    """Console entry point (re-export of :func:`transcc.cli.main`)."""
    from .cli import main as _main

    return _main(argv)
