"""stochpool: stochastic average pooling operators and their verification lab.

The library implements stochastic average pooling (train phase: channel-shared
random subsampling, average pooling, sqrt(p) scaling; test phase: plain average
pooling) together with its companion operators (dropout, stochastic
subsampling, probability-map pooling, structured spatial masks), a Monte-Carlo
moment lab that verifies the second-moment consistency the design targets, and
a small trainable network exercising the forward/backward path end to end.
"""

from .errors import (
    DegenerateInputError,
    EmptySubsampleError,
    InvalidConfigError,
    InvalidInputError,
    InvalidPatternError,
    InvalidPoolingError,
    InvalidProbabilityError,
    InvalidShapeError,
    StochPoolError,
    TrainingFailureError,
    UnsupportedConfigurationError,
)
from .masks import (
    CHANNEL_MODES,
    PATTERN_KINDS,
    IndexSet,
    KeepMask,
    PatternSpec,
    broadcast_mask,
    circular_shift,
    keep_count,
    make_pattern_mask,
    pattern_grid,
    read_pgm,
    subsample_indices,
    write_pgm,
)
from .momentlab import (
    DEFAULT_PROBS,
    DEFAULT_SIDES,
    MomentReport,
    MomentRow,
    SweepConfig,
    consistency_summary,
    run_inconsistency_demos,
    run_keepprob_sweep,
    run_spatial_sweep,
    unscaled_tolerance,
)
from .pooling import (
    Phase,
    SapSavedState,
    avg_pool_1d,
    avg_pool_2d,
    dropout,
    dropout_mask,
    global_avg_pool,
    sap_backward,
    sap_forward,
    stochastic_subsample,
    zeiler_stochastic_pool,
)
from .rng import RngStream
from .tensor import as_tensor4, mean, sample_gaussian, second_moment, variance
from .toynet import (
    HEAD_KINDS,
    SyntheticDataset,
    ToyNetParams,
    TrainConfig,
    TrainResult,
    evaluate,
    head_moment_diagnostic,
    make_synthetic_dataset,
    train_toy,
    write_trace_csv,
)

__version__ = "0.1.0"
