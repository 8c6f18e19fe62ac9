"""Domain-robust binary image classification on a small numpy autodiff engine.

The training recipe combines feature-statistics mixing, attention-refined
cross-domain alignment and distillation from a moving-average teacher.
``MixAlignDistilClassifier`` is the scikit-learn style entry point; the
``training`` module and the ``mixalign`` command drive full experiments.
"""

from .config import TrainConfig
from .data import DomainSpec, make_domains, make_split
from .estimator import MixAlignDistilClassifier
from .metrics import MetricsReport, balanced_accuracy, evaluate_scores, roc_auc
from .tensor import Tensor, no_grad

__all__ = [
    "MixAlignDistilClassifier",
    "TrainConfig",
    "DomainSpec",
    "make_domains",
    "make_split",
    "MetricsReport",
    "balanced_accuracy",
    "evaluate_scores",
    "roc_auc",
    "Tensor",
    "no_grad",
]

__version__ = "0.1.0"
