"""f-divergence preference optimization (f-PO) over tabular policies."""

from .errors import (
    ConfigError,
    DegenerateRewardError,
    DivergenceError,
    DomainError,
    FPOError,
    LengthError,
    NonFiniteError,
    OptimizationError,
    ShapeError,
    SupportError,
)
from .generators import (
    Generator,
    alpha_divergence,
    check_generator,
    default_generators,
    eval_generator,
    eval_generator_derivative,
    forward_kl,
    jensen_shannon,
    jeffreys,
    log_grid,
    parse_generator,
    register_generator,
    reverse_kl,
)
from .policy import (
    RewardTable,
    TabularPolicy,
    exact_f_divergence,
    geometric_mixture,
    log_ratio_g,
    mean_tv_hat,
    mean_tv_optimal,
    optimal_policy,
    policy_distribution,
    tv_distance,
)
from .losses import (
    KSampleBatch,
    LossConfig,
    LossValue,
    PairwiseBatch,
    dpo_loss,
    exo_loss,
    fpo_loss,
    fpo_loss_general,
    fpo_loss_pairwise_reward,
    fpo_loss_pairwise_smoothed,
    loss_gradient_check,
    simpo_style_delta,
)
from .trainer import OptimizerConfig, TrainReport, train, uniform_init
from .datagen import SyntheticTask, make_synthetic_task, sample_preferences, sample_reward_dataset

__version__ = "0.1.0"
