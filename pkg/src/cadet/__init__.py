"""cadet: continual anomaly detection for batch quality inspection.

A classifier and a new-defect detector are trained jointly over
class-incremental data batches; only detector-flagged samples are sent to a
labeling oracle, and updates anchor to the previous model through a
Fisher-weighted penalty plus a capped replay buffer.
"""

__version__ = "0.1.0"

from .net import NetworkSpec, cross_entropy, forward, backward, softmax
from .pipeline import InspectionOracle, ModelState, Sample, run_batches
from .scores import (
    MahalanobisParams,
    MaxSoftmaxParams,
    OdinParams,
    fit_mahalanobis,
    mahalanobis_score,
    odin_score,
    temperature_scale,
)
from .trainer import Threshold, fisher_diagonal, hinge_terms, update_threshold

__all__ = [
    "__version__",
    "NetworkSpec",
    "cross_entropy",
    "forward",
    "backward",
    "softmax",
    "InspectionOracle",
    "ModelState",
    "Sample",
    "run_batches",
    "MahalanobisParams",
    "MaxSoftmaxParams",
    "OdinParams",
    "fit_mahalanobis",
    "mahalanobis_score",
    "odin_score",
    "temperature_scale",
    "Threshold",
    "fisher_diagonal",
    "hinge_terms",
    "update_threshold",
]
