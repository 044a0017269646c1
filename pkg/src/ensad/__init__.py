"""Translation-ensemble adapter for cross-lingual conditional generation.

A small attention module fuses a source sentence embedding with embeddings
of its translations into a single conditioning vector, trained jointly
with a toy conditional GAN under adversarial and contrastive losses. All
numerics are hand-derived numpy (optionally numba-compiled); runs are
deterministic given (dataset, configs, seed).
"""

from .adapter import (
    STRATEGIES,
    EnsAdConfig,
    EnsAdParams,
    attention_export_record,
    attention_scores,
    backward,
    forward,
    fuse_mean_pool,
    fuse_select,
    init_params,
    param_count,
)
from .data import (
    DataFormatError,
    Dataset,
    EmbeddingEnsemble,
    SyntheticSpec,
    augment_noise,
    generate_synthetic,
    load_jsonl,
    save_jsonl,
)
from .evaluation import (
    EvalReport,
    FrechetStats,
    compare_strategies,
    evaluate,
    fit_gaussian,
    frechet_distance,
    save_report,
)
from .gan import (
    AdamState,
    Checkpoint,
    GanConfig,
    LossParts,
    ToyGanParams,
    TrainingDiverged,
    adam_step,
    disc_logit,
    finetune_pipeline,
    generate,
    init_gan_params,
    load_checkpoint,
    loss_adv_disc,
    loss_adv_ensad,
    loss_contrastive,
    save_checkpoint,
    total_losses,
    train,
)
from .numkit import ConvergenceError, NotPsdError, SeededRng, derive_seed

__version__ = "0.1.0"

__all__ = [
    "STRATEGIES",
    "AdamState",
    "Checkpoint",
    "ConvergenceError",
    "DataFormatError",
    "Dataset",
    "EmbeddingEnsemble",
    "EnsAdConfig",
    "EnsAdParams",
    "EvalReport",
    "FrechetStats",
    "GanConfig",
    "LossParts",
    "NotPsdError",
    "SeededRng",
    "SyntheticSpec",
    "ToyGanParams",
    "TrainingDiverged",
    "adam_step",
    "attention_export_record",
    "attention_scores",
    "augment_noise",
    "backward",
    "compare_strategies",
    "derive_seed",
    "disc_logit",
    "evaluate",
    "finetune_pipeline",
    "fit_gaussian",
    "forward",
    "frechet_distance",
    "fuse_mean_pool",
    "fuse_select",
    "generate",
    "generate_synthetic",
    "init_gan_params",
    "init_params",
    "load_checkpoint",
    "load_jsonl",
    "loss_adv_disc",
    "loss_adv_ensad",
    "loss_contrastive",
    "param_count",
    "save_checkpoint",
    "save_jsonl",
    "save_report",
    "total_losses",
    "train",
]
