"""Distributional imputation for longitudinal trials with monotone dropout."""

from .data import TrialDataset, load_dataset, write_dataset
from .estimands import AteAncova, AteSimple, CdfCurve, Qte, RiskDiff, parse_estimand
from .imputation import ImputationSet, impute
from .inference import BootstrapConfig, InferenceOutput, mi_inference, rubin_combine, weighted_bootstrap
from .mmrm import MmrmFit, fit
from .sensitivity import SensitivityModel

__version__ = "0.1.0"

__all__ = [
    "TrialDataset",
    "load_dataset",
    "write_dataset",
    "AteAncova",
    "AteSimple",
    "CdfCurve",
    "Qte",
    "RiskDiff",
    "parse_estimand",
    "ImputationSet",
    "impute",
    "BootstrapConfig",
    "InferenceOutput",
    "mi_inference",
    "rubin_combine",
    "weighted_bootstrap",
    "MmrmFit",
    "fit",
    "SensitivityModel",
]
