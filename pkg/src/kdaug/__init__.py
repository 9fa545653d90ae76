"""Knowledge distillation with time-series augmentation for wearable activity recognition."""
from ._backend import BACKEND
from .augment import GENEACTIV_BOUNDS, PAMAP2_BOUNDS, AugmentationPolicy, apply_policy, augment_window
from .dataio import (DatasetSplit, Recording, SyntheticConfig, Window, WindowSet, holdout_split, load_generic_csv,
                     load_pamap2, loso_splits, make_synthetic, normalize, segment_windows)
from .distill import (GENEACTIV_SCHEDULE, PAMAP2_SCHEDULE, KDConfig, TrainedRun, TrainingSchedule, kd_loss, lr_at,
                      select_eskd_teacher, softmax_with_temperature, train_kd, train_scratch)
from .evaluation import accuracy, aggregate, ece, timing_benchmark, welch_ttest
from .models import Checkpoint, ModelSpec, build, count_parameters, resnet18, wrn

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "GENEACTIV_BOUNDS", "PAMAP2_BOUNDS", "AugmentationPolicy", "apply_policy", "augment_window",
    "DatasetSplit", "Recording", "SyntheticConfig", "Window", "WindowSet", "holdout_split", "load_generic_csv",
    "load_pamap2", "loso_splits", "make_synthetic", "normalize", "segment_windows", "GENEACTIV_SCHEDULE",
    "PAMAP2_SCHEDULE", "KDConfig", "TrainedRun", "TrainingSchedule", "kd_loss", "lr_at", "select_eskd_teacher",
    "softmax_with_temperature", "train_kd", "train_scratch", "accuracy", "aggregate", "ece", "timing_benchmark",
    "welch_ttest", "Checkpoint", "ModelSpec", "build", "count_parameters", "resnet18", "wrn",
]
