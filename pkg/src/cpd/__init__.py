"""Cross-modal pair discrimination: contrastive training over paired
two-modality feature data, with a memory-bank NCE approximation, a two-stage
schedule, and a frozen-feature evaluation suite."""

from .data import PairedDataset, PairedInstance, SyntheticSpec, generate, load, save, split
from .encoders import (
    EncoderParams,
    ForwardCache,
    OptimizerState,
    backward,
    forward,
    init_params,
    l2_normalize,
    sgd_step,
)
from .errors import CpdError
from .evaluation import (
    LabeledFeatureSet,
    ProbeConfig,
    knn_classify,
    linear_probe,
    retrieval_recall,
    zero_shot_classify,
)
from .memory_bank import MemoryBank, init_bank
from .objectives import (
    NceConfig,
    cpd_grad_formula,
    cpd_loss_exact,
    cpd_prob_exact,
    mmid_loss_exact,
    nce_loss,
    nce_posterior,
    ranking_loss,
)
from .trainer import (
    CurriculumState,
    MetricsRecord,
    TrainingConfig,
    TrainingResult,
    calibrate_z,
    plateau_step,
    run_curriculum,
    train_epoch,
)

__version__ = "0.1.0"

__all__ = [
    "CpdError",
    "CurriculumState",
    "EncoderParams",
    "ForwardCache",
    "LabeledFeatureSet",
    "MemoryBank",
    "MetricsRecord",
    "NceConfig",
    "OptimizerState",
    "PairedDataset",
    "PairedInstance",
    "ProbeConfig",
    "SyntheticSpec",
    "TrainingConfig",
    "TrainingResult",
    "backward",
    "calibrate_z",
    "cpd_grad_formula",
    "cpd_loss_exact",
    "cpd_prob_exact",
    "forward",
    "generate",
    "init_bank",
    "init_params",
    "knn_classify",
    "l2_normalize",
    "linear_probe",
    "load",
    "mmid_loss_exact",
    "nce_loss",
    "nce_posterior",
    "plateau_step",
    "ranking_loss",
    "retrieval_recall",
    "run_curriculum",
    "save",
    "sgd_step",
    "split",
    "train_epoch",
    "zero_shot_classify",
]
