"""Feed-forward networks with learnable, differentiable pooling operators
and an unsupervised test-time adaptation harness for their parameters."""

from .adaptation import (
    AdaptConfig,
    AdaptReport,
    adapt_speaker,
    first_pass_labels,
    run_adaptation_experiment,
)
from .datagen import (
    ShiftSpec,
    SpeakerDataset,
    best_line_accuracy,
    gen_closed_region,
    gen_multispeaker,
    load_dataset,
    save_dataset,
)
from .errors import (
    ConfigError,
    ContractViolation,
    DiffpoolError,
    DimensionError,
    OracleError,
    ParseError,
    TrainingError,
)
from .network import (
    ForwardTrace,
    Gradients,
    InitSpec,
    LayerConfig,
    Model,
    backward,
    build_model,
    forward,
    load_model,
    save_model,
)
from .numeric import (
    activation_forward,
    affine_forward,
    cross_entropy,
    derive_rng,
    fd_gradient,
    make_rng,
    sigmoid,
    softmax,
)
from .pooling import (
    GaussPoolParams,
    LhucParams,
    LpPoolParams,
    PoolSpec,
    PoolWorkspace,
    gauss_backward,
    gauss_forward,
    lhuc_apply,
    lhuc_backward,
    lp_backward,
    lp_forward,
)
from .training import (
    EvalResult,
    NewbobConfig,
    TrainConfig,
    TrainReport,
    evaluate,
    newbob_action,
    sgd_step,
    split_train_valid,
    train,
)

__version__ = "0.1.0"
