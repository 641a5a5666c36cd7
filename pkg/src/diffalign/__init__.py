"""Reward finetuning of small conditional diffusion models by backpropagating through the sampler."""
from .data import CLASS_NAMES, ShapesDataset, make_shapes
from .diffusion import (
    DenoiserParams,
    NoiseSchedule,
    PretrainConfig,
    init_denoiser,
    make_schedule,
    pretrain,
    sample,
)
from .errors import (
    ConfigValidationError,
    ContractError,
    DependencyError,
    NumericAbort,
    NumericOverflowError,
    ShapeError,
)
from .estimators import ConditionalDiffusion, RewardFinetuner, StripeDetector
from .finetune import (
    FinetuneConfig,
    RunMetrics,
    TruncationPolicy,
    align_loss,
    diversity_metric,
    evaluate,
    finetune,
    rwr_finetune,
    truncated_rollout,
)
from .lora import AdapterSet, attach_lora, merge, mix, set_active_window
from .rewards import make_reward, train_detector

__version__ = "0.1.0"
