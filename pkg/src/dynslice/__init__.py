"""Redundancy-guided dynamic PCA slicing for a small numpy transformer."""

__version__ = "0.1.0"

from .container import load_model, save_model
from .corpora import load_jsonl, make_choice_items, save_jsonl, synthetic_text
from .errors import (
    DynSliceError,
    FormatError,
    NumericalError,
    PreconditionError,
    ScheduleError,
    SelectionError,
    TaskError,
    TrainingError,
    TransformError,
)
from .evaluation import (
    EvalTask,
    SweepReport,
    choice_accuracy,
    perplexity,
    sb_grid,
    score_choices,
    select_sb_by_calibration,
    sweep_sb,
)
from .linalg import EigenDecomposition, gram_accumulate, random_orthogonal, sym_eig
from .model import HiddenTrace, ModelConfig, TransformerModel, decode, encode, forward, init_model
from .profiler import CovarianceStats, LayerProfile, collect_covariances, normalize_lr, profile_lr
from .schedule import (
    SliceSchedule,
    build_schedule,
    clamp_and_redistribute,
    compute_schedule,
    constant_schedule,
    to_kept_dims,
)
from .slicer import (
    SlicedModel,
    absorb_norm_scales,
    compute_rotations,
    count_parameters,
    drop_layers_baseline,
    slice_model,
)
from .train import TrainHyperparams, train_toy
