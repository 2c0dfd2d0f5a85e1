"""Trainable heads over region descriptors and the model bundle."""

from .bundle import (
    ModelBundle,
    check_layout,
    load_bundle,
    refine_boxes,
    regress,
    regress_boxes,
    save_bundle,
    score,
)
from .heads import (
    LinearHead,
    Regressor,
    irreducible_loss,
    regressor_config,
    softmax_config,
    train_regressor,
    train_softmax_head,
)
from .labels import LabelRule, SampleKind, SampleLabels, TrainingSample, label_samples, training_samples
from .svm import (
    LinearSVM,
    MiningResult,
    SVMConfig,
    hinge_objective,
    train_linear_svm,
    train_svm_hard_negative,
)

__all__ = [
    "LabelRule", "LinearHead", "LinearSVM", "MiningResult", "ModelBundle", "Regressor", "SVMConfig",
    "SampleKind", "SampleLabels", "TrainingSample", "check_layout", "hinge_objective", "irreducible_loss",
    "label_samples", "load_bundle", "refine_boxes", "regress", "regress_boxes", "regressor_config",
    "save_bundle", "score", "softmax_config", "train_linear_svm", "train_regressor", "train_softmax_head",
    "train_svm_hard_negative", "training_samples",
]
