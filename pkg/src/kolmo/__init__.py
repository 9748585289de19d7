"""Neural Kolmogorov multi-state survival models.

Transition probabilities come from integrating the Kolmogorov forward and
backward equations whose rate matrix is a neural network of time, the
current transition kernel, covariates and a learned memory. The package
also ships a ground-truth simulator, nonparametric estimators, survival
metrics and a latent-variable extension.
"""
from .kernels import BACKEND
from .likelihood import TrainConfig, batch_loss, build_model, fit, subject_nll
from .statespace import (Dataset, SubjectRecord, TransitionTopology, competing_risks, illness_death,
                         normalize_covariates, two_state, validate_dataset)
from .survnode import ConstantRateModel, SurvNodeModel, hazard_rates, occupation, transition_matrix

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConstantRateModel",
    "Dataset",
    "SubjectRecord",
    "SurvNodeModel",
    "TrainConfig",
    "TransitionTopology",
    "batch_loss",
    "build_model",
    "competing_risks",
    "fit",
    "hazard_rates",
    "illness_death",
    "normalize_covariates",
    "occupation",
    "subject_nll",
    "transition_matrix",
    "two_state",
    "validate_dataset",
]
