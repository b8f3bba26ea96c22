"""Prior-regularized normalizing-flow imputation for partially observed images."""

from .errors import (
    CheckpointError,
    ConfigError,
    EmptySampleError,
    FlowOverflowError,
    IdxFormatError,
    PrflowError,
    ShapeError,
    TrainingDivergedError,
)
from .flow import CouplingLayer, FlowNetwork, latent_log_density
from .imputer import (
    ImputerNetwork,
    MaskedSample,
    impute,
    impute_batch,
    impute_dataset,
    merge_observed,
    shallow_init,
    shallow_init_batch,
)
from .prior import FilterBank, gradient_maps, prior_gradient, prior_penalty
from .training import (
    Adam,
    TrainConfig,
    Trainer,
    TrainState,
    auto_lambda,
    has_converged,
    loss_flow,
    loss_j1,
    loss_j2,
    loss_j3,
    networks_from_state,
    total_imputer_loss,
)
from .data import (
    ImageDataset,
    MaskSpec,
    generate_synthetic,
    load_checkpoint,
    load_digits_dataset,
    load_idx,
    mask_for_index,
    read_idx,
    sample_mask,
    save_checkpoint,
    save_idx,
)
from .metrics import (
    BenchmarkClassifier,
    GaussianStats,
    frechet_distance,
    gaussian_stats,
    rmse_missing,
    scc,
    train_benchmark_classifier,
)

__version__ = "0.1.0"
